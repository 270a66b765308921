"""Frozen-encoder segmentation finetuning with prompt-free prediction heads.

A small ViT encoder produces a patch-feature grid; interchangeable heads
(two-way attention decoder, CNN, linear) map it to multi-class masks, and a
box-prompted decoder provides the zero-shot baseline. Training, a synthetic
cardiac phantom, Dice/ASSD metrics, and an experiment CLI round out the
package. Convolution hot kernels run through a compiled extension when
built, with an equivalent numpy fallback (see segheads.backend).
"""

from .backend import active_backend, available_backends
from .encoder import EncoderConfig, ImageEmbedding, ViTEncoder
from .heads import (AutoSamHead, CnnHead, LinearHead, PromptedDecoder,
                    box_from_mask, build_head)
from .model import SegModel, build_model
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "EncoderConfig",
    "ImageEmbedding",
    "ViTEncoder",
    "AutoSamHead",
    "CnnHead",
    "LinearHead",
    "PromptedDecoder",
    "box_from_mask",
    "build_head",
    "SegModel",
    "build_model",
    "active_backend",
    "available_backends",
    "__version__",
]
