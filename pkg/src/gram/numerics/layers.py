"""Residual transformer-style blocks built from the primitive ops.

Both block kinds are pre-normalized: y = x + f(rms_norm(x)). The attention
block mixes positions (full bidirectional attention, optional rotary
position encoding); the gated-MLP block is strictly position-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gram.errors import ConfigError
from gram.numerics import tensor as T
from gram.numerics.tensor import Tensor


@dataclass
class SwigluParams:
    """Gated MLP: down( silu(x@gate) * (x@up) ). No residual, no norm."""
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class SwigluBlockParams:
    norm_gain: Tensor
    mlp: SwigluParams


@dataclass
class AttentionParams:
    norm_gain: Tensor
    w_qkv: Tensor  # [D, 3D]
    w_out: Tensor  # [D, D]


@dataclass
class AttentionBlockParams:
    """One full layer: residual self-attention then a residual gated MLP."""
    attn: AttentionParams
    mlp: SwigluBlockParams


def rope_tables(n_positions: int, head_dim: int, dtype=np.float32, base: float = 10000.0):
    """cos/sin tables of shape [P, head_dim//2] for rotary position encoding."""
    if head_dim % 2 != 0:
        raise ConfigError("rotary encoding needs an even head dim")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(0, half, dtype=np.float64) / half)
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def swiglu_mlp(x: Tensor, p: SwigluParams) -> Tensor:
    gate = T.silu(T.matmul(x, p.w_gate))
    up = T.matmul(x, p.w_up)
    return T.matmul(T.mul(gate, up), p.w_down)


def swiglu_block(x: Tensor, p: SwigluBlockParams) -> Tensor:
    """Residual position-wise gated MLP; preserves shape."""
    return T.add(x, swiglu_mlp(T.rms_norm(x, p.norm_gain), p.mlp))


def self_attention(x: Tensor, p: AttentionParams, n_heads: int,
                   rope_cos: np.ndarray | None, rope_sin: np.ndarray | None) -> Tensor:
    b, n, d = x.shape
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    qkv = T.matmul(x, p.w_qkv)  # [B, P, 3D]
    heads = []
    for i in range(3):
        part = T.slice_axis(qkv, 2, i * d, (i + 1) * d)
        part = T.reshape(part, (b, n, n_heads, hd))
        heads.append(T.transpose(part, (0, 2, 1, 3)))  # [B, H, P, hd]
    q, k, v = heads
    if rope_cos is not None:
        q = T.rope(q, rope_cos, rope_sin)
        k = T.rope(k, rope_cos, rope_sin)
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = T.softmax_last(scores)
    ctx = T.bmm(attn, v)  # [B, H, P, hd]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return T.matmul(ctx, p.w_out)


def attention_block(x: Tensor, p: AttentionBlockParams, n_heads: int,
                    rope_cos: np.ndarray | None = None,
                    rope_sin: np.ndarray | None = None) -> Tensor:
    """Residual self-attention followed by a residual gated MLP; preserves
    shape. Positions mix only in the attention sublayer."""
    x = T.add(x, self_attention(T.rms_norm(x, p.attn.norm_gain), p.attn, n_heads,
                                rope_cos, rope_sin))
    return swiglu_block(x, p.mlp)
