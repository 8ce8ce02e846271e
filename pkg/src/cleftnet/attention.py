"""Attention blocks: the resizing feature augmentor and two baselines.

The feature augmentor (FA) attends a *learnable* query tensor over the
voxels of its input.  Keys and values come from 1x1x1 convolutions of the
input; the query is a free-parameter tensor whose spatial shape picks the
output size, so the block can stand in for pooling (query at half size),
deconvolution (double size), or a stride-1 convolution (same size).  A
shape-matched residual path (max pooling / trilinear upsampling / identity)
is added to the attended output.

Baselines: plain self-attention (input-dependent query, size preserving)
and gated attention that scales voxels (spatial-wise) or channels
(channel-wise) with softmax importance scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .errors import ShapeError
from . import tensor as T
from .tensor import Tensor

RESIDUAL_KINDS = ("maxpool-half", "trilinear-double", "identity")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv1x1_kernel(rng, name, c_in, c_out, dtype) -> Parameter:
    return Parameter(name, kaiming_uniform(rng, (1, 1, 1, c_in, c_out), c_in, dtype))


@dataclass
class FAParams:
    """Free parameters of one feature augmentor.

    ``query`` has shape (d_q, h_q, w_q, c_q) with c_q equal to the key
    channel count.  ``residual`` selects the shape-matched residual mapping
    and must be consistent with the query-vs-input spatial ratio: each axis
    halves (or stays) for "maxpool-half", doubles (or stays) for
    "trilinear-double", and matches exactly for "identity".
    """

    query: Parameter
    key_kernel: Parameter
    value_kernel: Parameter
    out_kernel: Parameter
    residual: str

    def __post_init__(self):
        if self.residual not in RESIDUAL_KINDS:
            raise ShapeError(f"unknown residual kind {self.residual!r}")
        if self.query.shape[-1] != self.key_kernel.shape[-1]:
            raise ShapeError(
                f"query channels ({self.query.shape[-1]}) must equal key channels "
                f"({self.key_kernel.shape[-1]})")

    def parameters(self):
        return [self.query, self.key_kernel, self.value_kernel, self.out_kernel]


def init_fa(rng: np.random.Generator, name: str, channels: int, query_shape,
            residual: str, attn_channels: int | None = None,
            dtype=np.float32, query_std: float = 0.02) -> FAParams:
    """Build FA parameters: Gaussian(0, query_std) query, Kaiming-uniform projections.

    ``attn_channels`` is both the key and value width; default channels // 2
    (minimum 1).
    """
    ck = attn_channels if attn_channels is not None else max(1, channels // 2)
    dq, hq, wq = query_shape
    query = Parameter(f"{name}.query",
                      (rng.normal(0.0, query_std, size=(dq, hq, wq, ck))).astype(dtype))
    return FAParams(
        query=query,
        key_kernel=conv1x1_kernel(rng, f"{name}.key", channels, ck, dtype),
        value_kernel=conv1x1_kernel(rng, f"{name}.value", channels, ck, dtype),
        out_kernel=conv1x1_kernel(rng, f"{name}.out", ck, channels, dtype),
        residual=residual,
    )


def _axis_factors(in_spatial, q_spatial, residual: str):
    """Per-axis resize factors implied by the query shape; validated against kind."""
    factors = []
    for n, q in zip(in_spatial, q_spatial):
        if residual == "identity":
            if n != q:
                raise ShapeError(f"identity residual needs matching extents, got {n} vs {q}")
            factors.append(1)
        elif residual == "maxpool-half":
            if q == n:
                factors.append(1)
            elif 2 * q == n:
                factors.append(2)
            else:
                raise ShapeError(f"maxpool-half residual needs query extent n or n/2, got {q} for {n}")
        else:  # trilinear-double
            if q == n:
                factors.append(1)
            elif q == 2 * n:
                factors.append(2)
            else:
                raise ShapeError(f"trilinear-double residual needs query extent n or 2n, got {q} for {n}")
    return tuple(factors)


def _residual_map(x: Tensor, p: FAParams, factors) -> Tensor:
    if p.residual == "identity" or all(f == 1 for f in factors):
        return x
    if p.residual == "maxpool-half":
        return T.maxpool3d(x, factors)
    return T.trilinear_upsample(x, factors)


def _as_voxel_rows(x: Tensor):
    """(b,d,h,w,c) -> (b, d*h*w, c); row i is the channel vector of voxel i."""
    b, d, h, w, c = x.shape
    return T.reshape(x, (b, d * h * w, c))


def fa_attend(x: Tensor, p: FAParams) -> Tensor:
    """The attention core: attended values Z of shape (b, d_q, h_q, w_q, c_v).

    Z = V . softmax_columns(K^T Q); each output voxel is a weighted sum of
    all input value vectors, weights given by key-query dot products.
    Exposed separately so the residual-free part can be tested on its own.
    """
    xb = x if x.ndim == 5 else T.reshape(x, (1,) + x.shape)
    keys = _as_voxel_rows(T.conv3d(xb, p.key_kernel))      # (b, s, ck)
    values = _as_voxel_rows(T.conv3d(xb, p.value_kernel))  # (b, s, cv)
    dq, hq, wq, ck = p.query.shape
    t = dq * hq * wq
    qmat = T.swap_last_axes(T.reshape(p.query, (t, ck)))   # (ck, t)
    logits = T.matmul(keys, qmat)                          # (b, s, t) = K^T Q
    attn = T.softmax_columns(logits)                       # columns sum to 1 over s
    zmat = T.matmul(T.swap_last_axes(values), attn)        # (b, cv, t)
    z = T.reshape(T.swap_last_axes(zmat), (xb.shape[0], dq, hq, wq, values.shape[-1]))
    return z if x.ndim == 5 else T.reshape(z, z.shape[1:])


def fa_forward(x: Tensor, p: FAParams) -> Tensor:
    """Feature augmentor: attended output plus the shape-matched residual.

    ``x`` is (d,h,w,c) or (b,d,h,w,c); output spatial extents equal the
    query's, channel count equals the input's.
    """
    if x.ndim not in (4, 5):
        raise ShapeError(f"fa_forward expects a rank-4 or rank-5 tensor, got rank {x.ndim}")
    spatial = x.shape[-4:-1]
    factors = _axis_factors(spatial, p.query.shape[:3], p.residual)
    if p.key_kernel.shape[3] != x.shape[-1]:
        raise ShapeError(
            f"fa_forward channel mismatch: input has {x.shape[-1]}, "
            f"projections expect {p.key_kernel.shape[3]}")
    z = fa_attend(x, p)
    mixed = T.conv3d(z, p.out_kernel)
    return T.add(mixed, _residual_map(x, p, factors))


@dataclass
class SAParams:
    """Self-attention parameters: all three projections are input-dependent."""

    query_kernel: Parameter
    key_kernel: Parameter
    value_kernel: Parameter
    out_kernel: Parameter

    def parameters(self):
        return [self.query_kernel, self.key_kernel, self.value_kernel, self.out_kernel]


def init_self_attention(rng, name, channels, attn_channels=None, dtype=np.float32) -> SAParams:
    ck = attn_channels if attn_channels is not None else max(1, channels // 2)
    return SAParams(
        query_kernel=conv1x1_kernel(rng, f"{name}.query", channels, ck, dtype),
        key_kernel=conv1x1_kernel(rng, f"{name}.key", channels, ck, dtype),
        value_kernel=conv1x1_kernel(rng, f"{name}.value", channels, ck, dtype),
        out_kernel=conv1x1_kernel(rng, f"{name}.out", ck, channels, dtype),
    )


def self_attention(x: Tensor, p: SAParams) -> Tensor:
    """Size-preserving attention with an input-dependent query; identity residual."""
    if x.ndim not in (4, 5):
        raise ShapeError(f"self_attention expects a rank-4 or rank-5 tensor, got rank {x.ndim}")
    xb = x if x.ndim == 5 else T.reshape(x, (1,) + x.shape)
    b, d, h, w, c = xb.shape
    keys = _as_voxel_rows(T.conv3d(xb, p.key_kernel))
    values = _as_voxel_rows(T.conv3d(xb, p.value_kernel))
    queries = _as_voxel_rows(T.conv3d(xb, p.query_kernel))
    logits = T.matmul(keys, T.swap_last_axes(queries))     # (b, s_key, s_query)
    attn = T.softmax_columns(logits)
    zmat = T.matmul(T.swap_last_axes(values), attn)        # (b, cv, s)
    z = T.reshape(T.swap_last_axes(zmat), (b, d, h, w, values.shape[-1]))
    out = T.add(T.conv3d(z, p.out_kernel), xb)
    return out if x.ndim == 5 else T.reshape(out, out.shape[1:])


@dataclass
class GateParams:
    """Gated-attention vector: per-voxel scores ("spatial") or per-channel ("channel")."""

    vector: Parameter
    kind: str  # "spatial" | "channel"


def init_gate(rng, name, length, kind, dtype=np.float32, std: float = 0.02) -> GateParams:
    if kind not in ("spatial", "channel"):
        raise ShapeError(f"unknown gate kind {kind!r}")
    return GateParams(Parameter(name, rng.normal(0.0, std, size=(length,)).astype(dtype)), kind)


def gated_attention_swa(x: Tensor, q: Tensor | Parameter) -> Tensor:
    """Scale each voxel vector by its softmax importance score <m_i, q>."""
    if x.ndim not in (4, 5):
        raise ShapeError(f"gated_attention_swa expects rank 4 or 5, got {x.ndim}")
    c = x.shape[-1]
    if q.shape != (c,):
        raise ShapeError(f"spatial gate expects a length-{c} vector, got {q.shape}")
    xb = x if x.ndim == 5 else T.reshape(x, (1,) + x.shape)
    rows = _as_voxel_rows(xb)                              # (b, s, c)
    logits = T.matmul(rows, T.reshape(q, (c, 1)))          # (b, s, 1)
    scores = T.softmax_columns(logits)                     # softmax over voxels
    out = T.reshape(T.mul(rows, scores), xb.shape)
    return out if x.ndim == 5 else T.reshape(out, out.shape[1:])


def gated_attention_cwa(x: Tensor, q: Tensor | Parameter) -> Tensor:
    """Scale each channel by its softmax importance score <m~_j, q>."""
    if x.ndim not in (4, 5):
        raise ShapeError(f"gated_attention_cwa expects rank 4 or 5, got {x.ndim}")
    spatial = x.shape[-4:-1]
    s = int(np.prod(spatial))
    if q.shape != (s,):
        raise ShapeError(f"channel gate expects a length-{s} vector, got {q.shape}")
    xb = x if x.ndim == 5 else T.reshape(x, (1,) + x.shape)
    rows = _as_voxel_rows(xb)                              # (b, s, c)
    logits = T.matmul(T.swap_last_axes(rows), T.reshape(q, (s, 1)))  # (b, c, 1)
    scores = T.softmax_columns(logits)                     # softmax over channels
    out = T.reshape(T.mul(rows, T.swap_last_axes(scores)), xb.shape)
    return out if x.ndim == 5 else T.reshape(out, out.shape[1:])
