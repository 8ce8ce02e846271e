"""Label augmentation: exact distance transforms, boundary maps, and losses.

Each voxel's scalar segmentation label is augmented to the vector
[segmentation, boundary], where the boundary channel is the tanh of the
voxel's Euclidean distance to the nearest background voxel (zero outside the
labeled structure).  Cleft voxels therefore carry values in
[tanh(1), 1) and background voxels exactly 0, so the boundary channel's
support equals the segmentation mask.

The distance transform is the exact separable squared-distance algorithm
(per-axis lower envelope of parabolas), not an approximation: squared
distances come out exactly for integer spacings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTargetError, ShapeError
from . import tensor as T
from .tensor import Tensor, as_tensor

# stand-in for +infinity that survives envelope arithmetic without NaNs
_FAR = 1e20

CLAMP_EPS = 1e-7
# A sigmoid head never emits exactly 0, so "predicted boundary positive"
# needs a threshold.  tanh(1) is the smallest boundary value any true cleft
# voxel carries; it also sits well above the background boundary stream's
# training equilibrium sqrt(a2(1-p)/(2 a1 (1-beta_b))) <= 0.46, so correct
# background never churns in and out of the fired set during training.
BOUNDARY_TAU = np.tanh(1.0)


def _envelope_1d(row, step_sq: float, n: int):
    """g[i] = min_j row[j] + step_sq*(i-j)^2 via the lower envelope of parabolas."""
    v = [0] * n          # sites of the envelope parabolas
    z = [0.0] * (n + 1)  # breakpoints between them
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        fq = row[q] + step_sq * q * q
        while True:
            p = v[k]
            s = (fq - (row[p] + step_sq * p * p)) / (2.0 * step_sq * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    out = [0.0] * n
    j = 0
    for i in range(n):
        while z[j + 1] < i:
            j += 1
        p = v[j]
        out[i] = row[p] + step_sq * (i - p) * (i - p)
    return out


def _edt_pass(f: np.ndarray, axis: int, step: float) -> np.ndarray:
    moved = np.moveaxis(f, axis, -1)
    shape = moved.shape
    flat = np.ascontiguousarray(moved).reshape(-1, shape[-1])
    n = shape[-1]
    step_sq = step * step
    for r in range(flat.shape[0]):
        row = flat[r]
        if row.min() >= _FAR:  # nothing reachable along this line yet
            continue
        flat[r] = _envelope_1d(row.tolist(), step_sq, n)
    return np.moveaxis(flat.reshape(shape), -1, axis)


def euclidean_distance_transform_squared(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared anisotropic Euclidean distance to the nearest set voxel.

    ``mask`` marks the target set (nonzero = target); the result is 0 on
    targets.  Raises :class:`EmptyTargetError` when the target set is empty.
    """
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ShapeError(f"distance transform expects a (d,h,w) mask, got rank {m.ndim}")
    targets = m != 0
    if not targets.any():
        raise EmptyTargetError("distance transform target set is empty")
    f = np.where(targets, 0.0, _FAR)
    for axis, step in enumerate(spacing):
        f = _edt_pass(f, axis, float(step))
    return f


def euclidean_distance_transform(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact anisotropic Euclidean distance to the nearest set voxel."""
    return np.sqrt(euclidean_distance_transform_squared(mask, spacing))


def tanh_distance_map(y_s) -> np.ndarray:
    """Boundary channel: tanh of the distance to the nearest background voxel.

    Unit voxel spacing (tanh saturates within a few voxels, so physical
    spacings would flatten the map to 1).  Zero outside the labeled set; an
    all-background input yields all zeros; an input with no background at
    all has no defined boundary and raises.
    """
    y = np.asarray(y_s) != 0
    if y.ndim != 3:
        raise ShapeError(f"tanh_distance_map expects a (d,h,w) mask, got rank {y.ndim}")
    if y.all():
        raise EmptyTargetError("tanh distance map undefined: mask has no background voxels")
    if not y.any():
        return np.zeros(y.shape, dtype=np.float64)
    dist = euclidean_distance_transform(~y)
    return np.where(y, np.tanh(dist), 0.0)


@dataclass
class LossWeights:
    """Mixing weights of the total loss; the balance ratios beta_s/beta_b are
    recomputed from each batch inside the individual losses."""

    alpha1: float = 0.5
    alpha2: float = 0.2


def _batch_size(shape) -> int:
    # (b,d,h,w) predictions carry a batch axis; anything lower-rank is one volume
    return shape[0] if len(shape) == 4 else 1


def segmentation_balance(y_s) -> float:
    """Ratio of non-cleft voxels to all voxels (the weight of the cleft term)."""
    y = np.asarray(y_s) != 0
    return 1.0 - y.sum() / y.size


def boundary_balance(y_b) -> float:
    """Ratio of voxels with positive boundary label to all voxels."""
    y = np.asarray(y_b)
    return float((y > 0).sum() / y.size)


def segmentation_loss(pred, y_s, batch_size: int | None = None) -> Tensor:
    """Class-balanced binary cross-entropy over cleft probabilities.

    The cleft term is weighted by the non-cleft voxel ratio and vice versa,
    so the sparse positive class dominates the loss.  Sums over voxels,
    divided by the batch size for scale stability.
    """
    p = as_tensor(pred)
    y = np.asarray(y_s)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != label shape {y.shape}")
    beta = segmentation_balance(y)
    pos = (y != 0).astype(p.dtype)
    neg = 1.0 - pos
    pc = T.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos_term = T.sum_all(T.mul(as_tensor(pos), T.log(pc)))
    neg_term = T.sum_all(T.mul(as_tensor(neg), T.log(1.0 - pc)))
    b = batch_size if batch_size is not None else _batch_size(p.shape)
    return (pos_term * (-beta) + neg_term * (-(1.0 - beta))) * (1.0 / b)


def boundary_loss(pred_b, y_b, batch_size: int | None = None) -> Tensor:
    """Balance-weighted L2 loss on the boundary regression channel."""
    p = as_tensor(pred_b)
    y = np.asarray(y_b)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != label shape {y.shape}")
    beta = boundary_balance(y)
    pos = (y > 0).astype(p.dtype)
    neg = 1.0 - pos
    sq = T.square(T.sub(as_tensor(y.astype(p.dtype)), p))
    b = batch_size if batch_size is not None else _batch_size(p.shape)
    return (T.sum_all(T.mul(as_tensor(pos), sq)) * beta
            + T.sum_all(T.mul(as_tensor(neg), sq)) * (1.0 - beta)) * (1.0 / b)


# The silent-boundary coherence charge -(1-b)*log(p) has an interior
# equilibrium at p* = a2(1-b)/(a2(1-b) + (1-beta_s)) <= 0.89 for accepted
# training batches (>= 200 cleft voxels of 8192, alpha2 = 0.2); gating the
# charge strictly above p* makes the in-set gradient point out of the set,
# so falsely-positive voxels are released toward zero instead of pinned.
SEGMENTATION_TAU = 0.9


def coherence_loss(pred_s, pred_b, batch_size: int | None = None,
                   gates: tuple | None = None) -> Tensor:
    """Penalty for disagreement between the two prediction streams.

    Two incoherence patterns are charged.  Where the boundary stream fires
    (above BOUNDARY_TAU), -log of the boundary value weighted by (1 - p_s):
    heavy for near-boundary values the segmentation stream disowns.  Where
    the boundary stream is silent *but the segmentation stream is decisively
    positive* (above SEGMENTATION_TAU), -log p_s weighted by (1 - boundary).
    Restricting the silent term to decisive positives keeps correct
    background free of charge, so the loss vanishes on coherent confident
    predictions.  The gating masks are data-dependent constants (no gradient
    through the set membership); ``gates`` pins them explicitly, which the
    finite-difference checks use so a perturbation cannot flip a voxel's set
    and pollute the difference quotient.
    """
    ps = as_tensor(pred_s)
    pb = as_tensor(pred_b)
    if ps.shape != pb.shape:
        raise ShapeError(f"stream shapes differ: {ps.shape} vs {pb.shape}")
    psc = T.clip(ps, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pbc = T.clip(pb, CLAMP_EPS, 1.0 - CLAMP_EPS)
    if gates is not None:
        fired = np.asarray(gates[0], dtype=ps.dtype)
        silent_pos = np.asarray(gates[1], dtype=ps.dtype)
    else:
        fired = (pbc.data > BOUNDARY_TAU).astype(ps.dtype)
        silent_pos = ((pbc.data <= BOUNDARY_TAU) & (psc.data > SEGMENTATION_TAU)).astype(ps.dtype)
    fired_term = T.mul(as_tensor(fired), T.mul(1.0 - psc, T.log(pbc)))
    silent_term = T.mul(as_tensor(silent_pos), T.mul(1.0 - pbc, T.log(psc)))
    b = batch_size if batch_size is not None else _batch_size(ps.shape)
    return (T.sum_all(fired_term) + T.sum_all(silent_term)) * (-1.0 / b)


def total_loss(pred_s, pred_b, y_s, y_b, weights: LossWeights | None = None,
               batch_size: int | None = None) -> Tensor:
    """Weighted sum of segmentation, boundary, and coherence losses."""
    w = weights or LossWeights()
    ls = segmentation_loss(pred_s, y_s, batch_size)
    lb = boundary_loss(pred_b, y_b, batch_size)
    lc = coherence_loss(pred_s, pred_b, batch_size)
    return ls + lb * w.alpha1 + lc * w.alpha2
