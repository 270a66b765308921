"""ViT-style image encoder producing a square grid of patch features.

The encoder runs pre-norm transformer blocks with window attention over
patch embeddings and projects the result through a 1x1 neck; freezing it
excludes every encoder parameter from optimization so heads train alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Mlp, Module, ModuleList, MultiHeadAttention
from .tensor import ShapeError, Tensor

SCALE_PRESETS = {
    "tiny": (32, 4),
    "small": (64, 6),
    "base": (128, 8),
}


@dataclass
class EncoderConfig:
    img_size: int = 64
    patch: int = 8
    dim: int = 32
    depth: int = 4
    heads: int = 4
    window: int = 8
    scale_tag: str = "tiny"

    def __post_init__(self):
        if self.img_size % self.patch != 0:
            raise ValueError("img_size must be divisible by patch")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.grid_side % self.window != 0:
            raise ValueError("grid side must be divisible by window")

    @property
    def grid_side(self) -> int:
        return self.img_size // self.patch

    @classmethod
    def from_scale(cls, tag: str, img_size: int = 64, patch: int = 8) -> "EncoderConfig":
        if tag not in SCALE_PRESETS:
            raise ValueError(f"unknown scale tag {tag!r}")
        dim, depth = SCALE_PRESETS[tag]
        return cls(img_size=img_size, patch=patch, dim=dim, depth=depth,
                   heads=4, window=img_size // patch, scale_tag=tag)


@dataclass
class ImageEmbedding:
    """Encoder output: a (N, dim, G, G) grid of patch features."""
    grid: Tensor

    @property
    def dim(self) -> int:
        return self.grid.shape[1]

    @property
    def side(self) -> int:
        return self.grid.shape[2]


def window_partition(x: Tensor, window: int) -> Tensor:
    """(N, G, G, d) -> (N * nw * nw, window*window, d) token windows.

    With one window this is a pure reshape, so the windowed path with
    window == G is bitwise identical to global attention.
    """
    n, g, g2, d = x.shape
    nw = g // window
    x = x.reshape(n, nw, window, nw, window, d)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * nw * nw, window * window, d)


def window_merge(x: Tensor, n: int, g: int, window: int) -> Tensor:
    nw = g // window
    x = x.reshape(n, nw, nw, window, window, x.shape[-1])
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, g, g, x.shape[-1])


class PatchEmbed(Module):
    """Non-overlapping patch projection plus a learned positional table."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        p = cfg.patch
        g = cfg.grid_side
        self.proj = Linear(3 * p * p, cfg.dim, rng, dtype)
        self.pos = Tensor((rng.standard_normal((g * g, cfg.dim)) * 0.02).astype(dtype),
                          requires_grad=True)
        self.patch = p
        self.grid_side = g

    def forward(self, images: Tensor) -> Tensor:
        n, c, h, w = images.shape
        p, g = self.patch, self.grid_side
        if c != 3 or h != g * p or w != g * p:
            raise ShapeError(f"expected (N,3,{g * p},{g * p}) images, got {images.shape}")
        x = images.reshape(n, 3, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(n, g * g, 3 * p * p)
        return self.proj(x) + self.pos

    __call__ = forward


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, dtype=dtype)

    def forward(self, x: Tensor, window: int) -> Tensor:
        n, g = x.shape[0], x.shape[1]
        h = self.norm1(x)
        h = window_partition(h, window)
        h = self.attn(h, h, h)
        h = window_merge(h, n, g, window)
        x = x + h
        return x + self.mlp(self.norm2(x))

    __call__ = forward


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng, dtype)
        self.blocks = ModuleList(
            EncoderBlock(cfg.dim, cfg.heads, rng, dtype=dtype)
            for _ in range(cfg.depth))
        self.norm = LayerNorm(cfg.dim, dtype=dtype)
        self.neck = Linear(cfg.dim, cfg.dim, rng, dtype)
        self._frozen = False

    def forward(self, images: Tensor) -> ImageEmbedding:
        cfg = self.cfg
        n = images.shape[0]
        g = cfg.grid_side
        seq = self.patch_embed(images)
        x = seq.reshape(n, g, g, cfg.dim)
        for block in self.blocks:
            x = block(x, cfg.window)
        x = self.neck(self.norm(x))
        grid = x.transpose(0, 3, 1, 2)
        return ImageEmbedding(grid=grid)

    __call__ = forward

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set_frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.set_requires_grad(not flag)
