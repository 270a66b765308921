"""Decoders over a frozen image-embedding grid.

Four heads share the machinery here:

* ``AutoSamHead``    - two-way attention decoder with the prompt tokens
                       removed; auxiliary embeddings and the grid are
                       duplicated once per class so one forward yields
                       every class mask.
* ``CnnHead``        - k-stage convolutional decoder, always 4x upscale.
* ``LinearHead``     - two transposed convs plus 1x1 convs.
* ``PromptedDecoder``- the promptable variant driven by box-corner tokens,
                       used as the zero-shot baseline.

All prompt-free heads consume exactly one ImageEmbedding and nothing else.
"""

from __future__ import annotations

import numpy as np

from .encoder import ImageEmbedding
from .nn import (Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, Module,
                 ModuleList, MultiHeadAttention)
from .tensor import (ShapeError, Tensor, bilinear_resize, broadcast_to,
                     concat, gelu, reshape, stack, tsum)


class NoForegroundError(ValueError):
    """A mask expected to contain foreground pixels was empty."""


class DegenerateBoxError(ValueError):
    """Box corners do not span a positive area inside the image."""


# -- two-way attention ----------------------------------------------------------


class TwoWayBlock(Module):
    """One decoder layer: token self-attention, token->grid cross-attention,
    token MLP, then grid->token cross-attention, each residual + layernorm."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 2, dtype=np.float32):
        super().__init__()
        # cross-attention runs at half width, like the promptable original
        inner = max(dim // 2, heads)
        inner = ((inner + heads - 1) // heads) * heads
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.cross_t2g = MultiHeadAttention(dim, heads, rng, internal_dim=inner,
                                            dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, dtype=dtype)
        self.norm3 = LayerNorm(dim, dtype=dtype)
        self.cross_g2t = MultiHeadAttention(dim, heads, rng, internal_dim=inner,
                                            dtype=dtype)
        self.norm4 = LayerNorm(dim, dtype=dtype)

    def forward(self, tokens: Tensor, grid: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.cross_t2g(tokens, grid, grid))
        tokens = self.norm3(tokens + self.mlp(tokens))
        grid = self.norm4(grid + self.cross_g2t(grid, tokens, tokens))
        return tokens, grid

    __call__ = forward


class TwoWayTransformer(Module):
    """Stack of two-way blocks over a token sequence and a grid sequence.

    Positional encodings for the grid cells are added by the caller before
    entry, so permuting grid rows together with their encodings permutes
    the grid output identically.
    """

    def __init__(self, dim: int, depth: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.layers = ModuleList(
            TwoWayBlock(dim, heads, rng, dtype=dtype) for _ in range(depth))

    def forward(self, tokens: Tensor, grid: Tensor) -> tuple[Tensor, Tensor]:
        if tokens.shape[-1] != grid.shape[-1]:
            raise ShapeError("token width must equal grid embedding width")
        for layer in self.layers:
            tokens, grid = layer(tokens, grid)
        return tokens, grid

    __call__ = forward


# -- shared decoder core ---------------------------------------------------------


class AuxiliaryEmbeddings(Module):
    """Learned output tokens: confidence (iou) plus fg/bg mask tokens.

    Sequence order is fixed as [iou, fg, bg]; prompt tokens, when a caller
    supplies them, are appended after these.
    """

    IOU, FG, BG = 0, 1, 2

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.iou_token = Tensor(rng.standard_normal(dim).astype(dtype), requires_grad=True)
        self.fg_mask_token = Tensor(rng.standard_normal(dim).astype(dtype), requires_grad=True)
        self.bg_mask_token = Tensor(rng.standard_normal(dim).astype(dtype), requires_grad=True)

    def tokens(self, batch: int) -> Tensor:
        base = stack([self.iou_token, self.fg_mask_token, self.bg_mask_token], axis=0)
        return broadcast_to(reshape(base, (1, 3, base.shape[-1])),
                            (batch, 3, base.shape[-1]))


class MaskDecoderCore(Module):
    """Two-way transformer, 4x grid upscaler, and mask-token projector.

    Produces one logit map per call; multi-class heads call it once per
    class group, the prompted decoder once per prompt set. Grid cells get
    a fixed sinusoidal positional code over their normalized centers, the
    same encoding family box-corner prompts use, so position references
    line up across the two.
    """

    def __init__(self, dim: int, grid_side: int, twoway_layers: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.grid_side = grid_side
        self.transformer = TwoWayTransformer(dim, twoway_layers, heads, rng, dtype)
        c4 = max(dim // 4, 1)
        c8 = max(dim // 8, 1)
        self.up1 = ConvTranspose2d(dim, c4, 2, rng, stride=2, dtype=dtype)
        self.up2 = ConvTranspose2d(c4, c8, 2, rng, stride=2, dtype=dtype)
        self.token_mlp = Mlp(dim, dim, rng, out_dim=c8, dtype=dtype)
        self._grid_pos_const = _grid_sincos_table(grid_side, dim, dtype)

    @property
    def grid_pos(self) -> Tensor:
        return Tensor(self._grid_pos_const)

    def forward(self, tokens: Tensor, grid: Tensor) -> tuple[Tensor, Tensor]:
        """tokens: (N, T, dim) with [iou, fg, bg, ...] order; grid: (N, dim, G, G).

        Returns (mask logit map (N, 4G, 4G), iou embedding (N, dim)).
        """
        n, d, g, _ = grid.shape
        seq = reshape(grid, (n, d, g * g)).transpose(0, 2, 1) + self.grid_pos
        tok, out_seq = self.transformer(tokens, seq)

        fg = tok[:, AuxiliaryEmbeddings.FG, :]                 # (N, dim)
        weights = self.token_mlp(fg)                           # (N, c8)
        iou = tok[:, AuxiliaryEmbeddings.IOU, :]

        spatial = out_seq.transpose(0, 2, 1).reshape(n, d, g, g)
        up = gelu(self.up1(spatial))
        up = gelu(self.up2(up))                                # (N, c8, 4G, 4G)
        w4 = reshape(weights, (n, up.shape[1], 1, 1))
        mask = tsum(up * w4, axis=1)                           # (N, 4G, 4G)
        return mask, iou

    __call__ = forward


# -- prompt-free heads -----------------------------------------------------------


class AutoSamHead(Module):
    """Prompt-free two-way decoder duplicated over C foreground classes
    plus one background group; channel c of the output is class c."""

    def __init__(self, dim: int, grid_side: int, img_size: int, num_classes: int,
                 rng: np.random.Generator, twoway_layers: int = 2, heads: int = 4,
                 dtype=np.float32):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.img_size = img_size
        self.num_classes = num_classes
        self.core = MaskDecoderCore(dim, grid_side, twoway_layers, heads, rng, dtype)
        self.groups = ModuleList(
            AuxiliaryEmbeddings(dim, rng, dtype) for _ in range(num_classes + 1))
        self.last_iou: list[Tensor] | None = None

    def _group_map(self, grid: Tensor, index: int) -> tuple[Tensor, Tensor]:
        tokens = self.groups[index].tokens(grid.shape[0])
        mask, iou = self.core(tokens, grid)
        return reshape(mask, (mask.shape[0], 1, mask.shape[1], mask.shape[2])), iou

    def forward(self, embedding: ImageEmbedding) -> Tensor:
        grid = embedding.grid
        maps, ious = [], []
        for idx in range(len(self.groups)):
            m, iou = self._group_map(grid, idx)
            maps.append(m)
            ious.append(iou)
        self.last_iou = ious  # confidence embeddings, exposed read-only
        logits = concat(maps, axis=1)
        return bilinear_resize(logits, self.img_size, self.img_size)

    __call__ = forward

    def forward_single_group(self, embedding: ImageEmbedding, index: int) -> Tensor:
        """One group's logit map at input resolution (duplication oracle)."""
        m, _ = self._group_map(embedding.grid, index)
        return bilinear_resize(m, self.img_size, self.img_size)


class CnnHead(Module):
    """k-stage convolutional decoder; the last two stages upscale 2x each
    so the grid always grows exactly 4x before the final resize."""

    def __init__(self, dim: int, grid_side: int, img_size: int, num_classes: int,
                 rng: np.random.Generator, k: int = 4, min_channels: int = 16,
                 dtype=np.float32):
        super().__init__()
        if k < 2:
            raise ValueError("cnn head needs at least 2 stages")
        self.img_size = img_size
        self.num_classes = num_classes
        self.k = k
        stages = []
        c_in = dim
        for i in range(k):
            c_out = max(dim // (2 ** (i + 1)), min_channels)
            first = Conv2d(c_in, c_out, 3, rng, stride=1, pad=1, dtype=dtype)
            if i >= k - 2:
                second = ConvTranspose2d(c_out, c_out, 2, rng, stride=2, dtype=dtype)
            else:
                second = Conv2d(c_out, c_out, 3, rng, stride=1, pad=1, dtype=dtype)
            block = Module()
            block.first = first
            block.second = second
            stages.append(block)
            c_in = c_out
        self.stages = ModuleList(stages)
        self.classifier = Conv2d(c_in, num_classes + 1, 1, rng, dtype=dtype)

    def forward(self, embedding: ImageEmbedding) -> Tensor:
        x = embedding.grid
        for stage in self.stages:
            x = gelu(stage.first(x))
            x = gelu(stage.second(x))
        logits = self.classifier(x)
        return bilinear_resize(logits, self.img_size, self.img_size)

    __call__ = forward


class LinearHead(Module):
    """Two transposed convs then two 1x1 convs: the lightest decoder."""

    def __init__(self, dim: int, grid_side: int, img_size: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.img_size = img_size
        self.num_classes = num_classes
        c4 = max(dim // 4, 1)
        c8 = max(dim // 8, 1)
        self.up1 = ConvTranspose2d(dim, c4, 2, rng, stride=2, dtype=dtype)
        self.up2 = ConvTranspose2d(c4, c8, 2, rng, stride=2, dtype=dtype)
        self.fc1 = Conv2d(c8, c8, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(c8, num_classes + 1, 1, rng, dtype=dtype)

    def forward(self, embedding: ImageEmbedding) -> Tensor:
        x = self.up2(self.up1(embedding.grid))
        logits = self.fc2(gelu(self.fc1(x)))
        return bilinear_resize(logits, self.img_size, self.img_size)

    __call__ = forward


# -- prompted decoder (zero-shot baseline) ---------------------------------------


def box_from_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x0, y0, x1, y1) bounding box of a binary mask's nonzero pixels."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise NoForegroundError("mask has no foreground pixels")
    return (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def _sincos_position(x: float, y: float, dim: int, dtype) -> np.ndarray:
    """Fixed sinusoidal encoding of a 2D position normalized to [0, 1]."""
    if dim % 4 != 0:
        raise ValueError("position encoding needs dim divisible by 4")
    nf = dim // 4
    freqs = (2.0 * np.pi) * (2.0 ** np.arange(nf))
    parts = [np.sin(freqs * x), np.cos(freqs * x),
             np.sin(freqs * y), np.cos(freqs * y)]
    return np.concatenate(parts).astype(dtype)


def _grid_sincos_table(grid_side: int, dim: int, dtype) -> np.ndarray:
    """Sinusoidal codes of every grid cell center, (G*G, dim) row-major."""
    rows = []
    for gy in range(grid_side):
        for gx in range(grid_side):
            rows.append(_sincos_position((gx + 0.5) / grid_side,
                                         (gy + 0.5) / grid_side, dim, dtype))
    return np.stack(rows)


class PromptedDecoder(Module):
    """Decoder conditioned on box-corner prompt tokens appended after the
    auxiliary embeddings; predicts a single foreground logit map that is
    thresholded at zero for evaluation."""

    def __init__(self, dim: int, grid_side: int, img_size: int,
                 rng: np.random.Generator, twoway_layers: int = 2, heads: int = 4,
                 dtype=np.float32):
        super().__init__()
        self.img_size = img_size
        self.core = MaskDecoderCore(dim, grid_side, twoway_layers, heads, rng, dtype)
        self.aux = AuxiliaryEmbeddings(dim, rng, dtype)
        self.corner_embed = Tensor(rng.standard_normal((2, dim)).astype(dtype),
                                   requires_grad=True)
        self._dtype = dtype

    def encode_box(self, box: tuple[float, float, float, float]) -> Tensor:
        """Two prompt tokens: sinusoidal corner positions plus a learned
        corner-type embedding (index 0 top-left, 1 bottom-right).

        Corner coordinates live on pixel-edge positions, so valid boxes
        span [-0.5, img-0.5] with x0 < x1 and y0 < y1.
        """
        x0, y0, x1, y1 = (float(v) for v in box)
        lo, hi = -0.5, self.img_size - 0.5
        if not (lo <= x0 < x1 <= hi and lo <= y0 < y1 <= hi):
            raise DegenerateBoxError(f"invalid box {box} for image size {self.img_size}")
        dim = self.corner_embed.shape[1]
        scale = float(self.img_size)
        pe = np.stack([
            _sincos_position((x0 + 0.5) / scale, (y0 + 0.5) / scale, dim, self._dtype),
            _sincos_position((x1 + 0.5) / scale, (y1 + 0.5) / scale, dim, self._dtype),
        ])
        return Tensor(pe) + self.corner_embed

    def forward(self, embedding: ImageEmbedding, prompts: Tensor) -> Tensor:
        grid = embedding.grid
        n = grid.shape[0]
        if prompts.ndim == 2:
            prompts = broadcast_to(
                reshape(prompts, (1,) + prompts.shape), (n,) + prompts.shape)
        tokens = concat([self.aux.tokens(n), prompts], axis=1)
        mask, _ = self.core(tokens, grid)
        logits = reshape(mask, (n, 1, mask.shape[1], mask.shape[2]))
        return bilinear_resize(logits, self.img_size, self.img_size)

    __call__ = forward


# -- head factory and gradient checks --------------------------------------------

HEAD_KINDS = ("autosam", "cnn", "linear")


def build_head(kind: str, dim: int, grid_side: int, img_size: int,
               num_classes: int, rng: np.random.Generator, cnn_depth: int = 4,
               twoway_layers: int = 2, heads: int = 4, dtype=np.float32) -> Module:
    if kind == "autosam":
        return AutoSamHead(dim, grid_side, img_size, num_classes, rng,
                           twoway_layers=twoway_layers, heads=heads, dtype=dtype)
    if kind == "cnn":
        return CnnHead(dim, grid_side, img_size, num_classes, rng, k=cnn_depth,
                       dtype=dtype)
    if kind == "linear":
        return LinearHead(dim, grid_side, img_size, num_classes, rng, dtype=dtype)
    raise ValueError(f"unknown head kind {kind!r}")


def gradcheck_heads(tolerance: float = 1e-4, verbose: bool = False
                    ) -> list[tuple[str, float, bool]]:
    """Finite-difference checks through one two-way layer and every head
    end-to-end on a 16x16 toy configuration, float64."""
    from .gradcheck import check_gradients, finite_diff_grad, relative_error

    results = []

    def record(name, err):
        ok = err <= tolerance
        results.append((name, err, ok))
        if verbose:
            print(f"  {name:<24s} rel_err={err:.3e} {'ok' if ok else 'FAIL'}")

    rng = np.random.default_rng(7)
    dim, g, img, heads = 8, 2, 16, 2

    # one two-way layer, gradients wrt tokens and grid sequence
    block = TwoWayBlock(dim, heads, rng, dtype=np.float64)
    proj_t = Tensor(rng.uniform(-1, 1, (1, 3, dim)))
    proj_g = Tensor(rng.uniform(-1, 1, (1, g * g, dim)))

    def twoway_scalar(tokens, grid):
        t, s = block(tokens, grid)
        return tsum(t * proj_t) + tsum(s * proj_g)

    err = check_gradients(twoway_scalar, [
        rng.uniform(-1, 1, (1, 3, dim)), rng.uniform(-1, 1, (1, g * g, dim))])
    record("two_way_attention", err)

    def head_case(name, head):
        proj = Tensor(rng.uniform(-1, 1, (1, head.num_classes + 1, img, img)))
        grid0 = rng.uniform(-1, 1, (1, dim, g, g))
        params = list(head.named_parameters())

        def loss_from(grid_arr):
            emb = ImageEmbedding(grid=Tensor(grid_arr))
            return tsum(head(emb) * proj)

        grid_leaf = Tensor(grid0, requires_grad=True)
        loss = tsum(head(ImageEmbedding(grid=grid_leaf)) * proj)
        loss.backward()

        worst = relative_error(grid_leaf.grad,
                               finite_diff_grad(lambda a: loss_from(a).item(),
                                                grid0.copy()))
        for pname, p in params:
            def f(x, _p=p):
                saved = _p.data
                _p.data = x
                try:
                    return loss_from(grid0).item()
                finally:
                    _p.data = saved

            fd = finite_diff_grad(f, p.data.copy())
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, relative_error(got, fd))
        head.zero_grad()
        record(name, worst)

    head_case("autosam_head", AutoSamHead(dim, g, img, num_classes=1, rng=rng,
                                          twoway_layers=1, heads=heads,
                                          dtype=np.float64))
    head_case("cnn_head", CnnHead(dim, g, img, num_classes=1, rng=rng, k=2,
                                  dtype=np.float64))
    head_case("linear_head", LinearHead(dim, g, img, num_classes=1, rng=rng,
                                        dtype=np.float64))
    return results
