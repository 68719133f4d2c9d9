"""Cross-attention transformer fusing image features with the hand prior.

Spatial positions are tokens (row-major over the grid) and channels are
features. Every 1x1 convolution is applied as the equivalent per-token
linear map on ``[B, N, C]`` token matrices.
"""
from __future__ import annotations

import math

import numpy as np

from .nn import Linear, Module
from .tensor import ShapeError, Tensor, concat, matmul, relu, softmax

GRID = (32, 32)


def positional_encoding(h: int, w: int, d_model: int, base: float = 10000.0) -> np.ndarray:
    """2D sinusoidal table ``[h*w, d_model]``.

    The first half of the channels encodes the row, the second half the
    column; within each half, channels alternate sin/cos over
    ``d_model // 4`` frequencies ``base ** (-2i / (d_model / 2))``.
    """
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4 for 2D sinusoidal encoding")
    half = d_model // 2
    freqs = base ** (-np.arange(0, half, 2) / half)

    def axis_code(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = np.divmod(np.arange(h * w), w)
    return np.concatenate([axis_code(rows.astype(float)), axis_code(cols.astype(float))], axis=1)


def positional_encode(t: Tensor, grid: tuple[int, int] = GRID) -> Tensor:
    """Add the sinusoidal table to token features ``[..., N, d_model]``."""
    n, d = t.shape[-2], t.shape[-1]
    if n != grid[0] * grid[1]:
        raise ShapeError(f"{n} tokens do not tile a {grid[0]}x{grid[1]} grid")
    return t + Tensor(positional_encoding(grid[0], grid[1], d), dtype=t.dtype)


def to_tokens(x: Tensor) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, H*W, C]``."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def from_tokens(t: Tensor, hw: tuple[int, int]) -> Tensor:
    b, n, c = t.shape
    return t.transpose(0, 2, 1).reshape(b, c, hw[0], hw[1])


def split_heads(t: Tensor, h: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, record: list | None = None,
           residual: bool = True) -> Tensor:
    """``q + softmax(q k^T / sqrt(d_head)) v`` per head, heads concatenated.

    ``residual=False`` drops the leading ``q`` term.
    """
    if q.shape[-1] % heads:
        raise ShapeError(f"d_model {q.shape[-1]} not divisible by {heads} heads")
    dh = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = matmul(qh * (1.0 / math.sqrt(dh)), kh.transpose(0, 1, 3, 2))
    a = softmax(logits, axis=-1)
    if record is not None:
        record.append(a.data)
    out = merge_heads(matmul(a, vh))
    return q + out if residual else out


class TokenMLP(Module):
    """Residual two-layer MLP: ``y + W2 relu(W1 y)``."""

    def __init__(self, d: int, rng: np.random.Generator, hidden_mult: int = 2):
        self.fc1 = Linear(d, hidden_mult * d, rng)
        self.fc2 = Linear(hidden_mult * d, d, rng)

    def forward(self, y: Tensor) -> Tensor:
        return y + self.fc2(relu(self.fc1(y)))


class CatBlock(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError("heads must divide d_model")
        self.d_model, self.heads = d_model, heads
        self.proj = {s: {n: Linear(d_model, d_model, rng) for n in "qkv"} for s in "IP"}
        self.mlp = {s: TokenMLP(d_model, rng) for s in "IP"}
        self.last_attn: list[np.ndarray] = []

    def forward(self, F_I: Tensor, F_P: Tensor, grid) -> tuple[Tensor, Tensor]:
        return cross_attend(self, F_I, F_P, grid)


def cross_attend(block: CatBlock, F_I: Tensor, F_P: Tensor, grid=GRID) -> tuple[Tensor, Tensor]:
    """One bidirectional block on token matrices ``[B, N, d_model]``."""
    if F_I.shape != F_P.shape:
        raise ShapeError(f"stream shapes differ: {F_I.shape} vs {F_P.shape}")
    if F_I.shape[-1] != block.d_model:
        raise ShapeError(f"streams must have {block.d_model} features, got {F_I.shape[-1]}")
    qkv = {}
    for s, F in (("I", F_I), ("P", F_P)):
        p = block.proj[s]
        qkv[s] = (positional_encode(p["q"](F), grid), positional_encode(p["k"](F), grid), p["v"](F))
    block.last_attn = []
    (qI, kI, vI), (qP, kP, vP) = qkv["I"], qkv["P"]
    i_to_p = attend(qP, kI, vI, block.heads, block.last_attn)
    p_to_i = attend(qI, kP, vP, block.heads, block.last_attn)
    return block.mlp["I"](F_I + p_to_i), block.mlp["P"](F_P + i_to_p)


class CatStack(Module):
    """Entry lifts -> CAT blocks -> concat -> 1x1 fuse to ``out_channels``."""

    def __init__(self, rng: np.random.Generator, c_image: int = 256, c_prior: int = 21,
                 d_model: int = 256, heads: int = 4, blocks: int = 2, out_channels: int = 256):
        if blocks < 1:
            raise ValueError("need at least one CAT block")
        self.lift_I = Linear(c_image, d_model, rng)
        self.lift_P = Linear(c_prior, d_model, rng)
        self.blocks = [CatBlock(d_model, heads, rng) for _ in range(blocks)]
        self.fuse = Linear(2 * d_model, out_channels, rng)

    def forward(self, F_I: Tensor, F_P: Tensor) -> Tensor:
        return cat_fuse(self, F_I, F_P)


def _batched(F_I: Tensor, F_P: Tensor):
    if F_I.ndim == 3 and F_P.ndim == 3:
        return F_I.reshape((1,) + F_I.shape), F_P.reshape((1,) + F_P.shape), True
    if F_I.ndim == 4 and F_P.ndim == 4:
        return F_I, F_P, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W] streams, got {F_I.shape} and {F_P.shape}")


def cat_fuse(stack: CatStack, F_I: Tensor, F_P: Tensor) -> Tensor:
    F_I, F_P, single = _batched(F_I, F_P)
    if F_I.shape[0] != F_P.shape[0] or F_I.shape[2:] != F_P.shape[2:]:
        raise ShapeError(f"image {F_I.shape} and prior {F_P.shape} grids differ")
    grid = F_I.shape[2:]
    tI = stack.lift_I(to_tokens(F_I))
    tP = stack.lift_P(to_tokens(F_P))
    for block in stack.blocks:
        tI, tP = block(tI, tP, grid)
    out = from_tokens(stack.fuse(concat([tI, tP], axis=-1)), grid)
    return out.reshape(out.shape[1:]) if single else out


class SelfAttentionLayer(Module):
    """Standard transformer layer: x + MHA(x), then residual MLP."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q, self.k, self.v = (Linear(d, d, rng) for _ in range(3))
        self.mlp = TokenMLP(d, rng)
        self.last_attn: list[np.ndarray] = []

    def forward(self, x: Tensor, grid) -> Tensor:
        self.last_attn = []
        q = positional_encode(self.q(x), grid)
        k = positional_encode(self.k(x), grid)
        y = attend(q, k, self.v(x), self.heads, self.last_attn, residual=False)
        return self.mlp(x + y)


class PlainTransformer(Module):
    """Ablation baseline: self-attention layers over the channel-concatenated streams."""

    def __init__(self, rng: np.random.Generator, c_image: int = 256, c_prior: int = 21,
                 d_model: int = 256, heads: int = 4, layers: int = 2, out_channels: int = 256):
        self.lift_I = Linear(c_image, d_model, rng)
        self.lift_P = Linear(c_prior, d_model, rng)
        self.layers = [SelfAttentionLayer(2 * d_model, heads, rng) for _ in range(layers)]
        self.fuse = Linear(2 * d_model, out_channels, rng)

    def forward(self, F_I: Tensor, F_P: Tensor) -> Tensor:
        return plain_transformer_baseline(self, F_I, F_P)


def plain_transformer_baseline(model: PlainTransformer, F_I: Tensor, F_P: Tensor) -> Tensor:
    F_I, F_P, single = _batched(F_I, F_P)
    grid = F_I.shape[2:]
    x = concat([model.lift_I(to_tokens(F_I)), model.lift_P(to_tokens(F_P))], axis=-1)
    for layer in model.layers:
        x = layer(x, grid)
    out = from_tokens(model.fuse(x), grid)
    return out.reshape(out.shape[1:]) if single else out
