"""Encoder + head composite used by training and evaluation."""

from __future__ import annotations

import numpy as np

from .encoder import EncoderConfig, ViTEncoder
from .heads import build_head
from .nn import Module
from .tensor import Tensor


class SegModel(Module):
    def __init__(self, encoder: ViTEncoder, head: Module):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.encoder(images))

    __call__ = forward

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        """Forward a (N, 3, H, W) float batch outside the training graph."""
        out = self.forward(Tensor(np.ascontiguousarray(images, dtype=np.float32)))
        return out.data


def build_model(enc_cfg: EncoderConfig, head_kind: str, num_classes: int,
                seed: int, cnn_depth: int = 4, twoway_layers: int = 2,
                dtype=np.float32) -> SegModel:
    """Deterministically initialized encoder + head pair."""
    rng = np.random.default_rng(seed)
    encoder = ViTEncoder(enc_cfg, rng, dtype)
    head = build_head(head_kind, enc_cfg.dim, enc_cfg.grid_side, enc_cfg.img_size,
                      num_classes, rng, cnn_depth=cnn_depth,
                      twoway_layers=twoway_layers, heads=enc_cfg.heads, dtype=dtype)
    return SegModel(encoder, head)
