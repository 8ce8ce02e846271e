"""Independent brute-force oracles the fast implementations are checked against.

Everything here is deliberately naive: O(n^2) pairwise scans, nested loops,
pair enumeration.  Nothing imports the code paths under test.
"""
import numpy as np


def edt_squared_bruteforce(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """min over target voxels of the squared anisotropic distance, pairwise."""
    m = np.asarray(mask) != 0
    targets = np.argwhere(m).astype(np.float64)
    assert targets.size, "oracle needs a nonempty target set"
    coords = np.indices(m.shape).reshape(3, -1).T.astype(np.float64)
    s = np.asarray(spacing, dtype=np.float64)
    diff = (coords[:, None, :] - targets[None, :, :]) * s
    d2 = (diff * diff).sum(axis=2).min(axis=1)
    return d2.reshape(m.shape)


def tdm_bruteforce(y_s) -> np.ndarray:
    y = np.asarray(y_s) != 0
    if not y.any():
        return np.zeros(y.shape, dtype=np.float64)
    dist = np.sqrt(edt_squared_bruteforce(~y))
    return np.where(y, np.tanh(dist), 0.0)


def maxpool_bruteforce(x, window) -> np.ndarray:
    d, h, w, c = x.shape
    wd, wh, ww = window
    out = np.empty((d // wd, h // wh, w // ww, c), dtype=x.dtype)
    for i in range(d // wd):
        for j in range(h // wh):
            for k in range(w // ww):
                block = x[i * wd:(i + 1) * wd, j * wh:(j + 1) * wh, k * ww:(k + 1) * ww]
                out[i, j, k] = block.reshape(-1, c).max(axis=0)
    return out


def conv3d_bruteforce(x, kernel, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    kd, kh, kw, ci, co = kernel.shape
    pd, ph, pw = padding
    xp = np.pad(x, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    sd, sh, sw = stride
    do = (xp.shape[0] - kd) // sd + 1
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    out = np.zeros((do, ho, wo, co), dtype=np.float64)
    for z in range(do):
        for y in range(ho):
            for t in range(wo):
                win = xp[z * sd:z * sd + kd, y * sh:y * sh + kh, t * sw:t * sw + kw]
                for o in range(co):
                    out[z, y, t, o] = float((win * kernel[..., o]).sum())
    return out


def interp1d_oracle(values, factor: int) -> np.ndarray:
    """Scalar linear interpolation, align-corners=false, clamped at borders."""
    n = len(values)
    out = np.empty(n * factor, dtype=np.float64)
    for i in range(n * factor):
        c = (i + 0.5) / factor - 0.5
        c = min(max(c, 0.0), n - 1.0)
        lo = int(np.floor(c))
        hi = min(lo + 1, n - 1)
        f = c - lo
        out[i] = (1.0 - f) * values[lo] + f * values[hi]
    return out


def upsample_bruteforce(x, factors) -> np.ndarray:
    """Separable application of the scalar oracle along each spatial axis."""
    out = np.asarray(x, dtype=np.float64)
    for axis, f in enumerate(factors):
        if f == 1:
            continue
        moved = np.moveaxis(out, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        rows = np.stack([interp1d_oracle(row, f) for row in flat])
        out = np.moveaxis(rows.reshape(moved.shape[:-1] + (moved.shape[-1] * f,)), -1, axis)
    return out


def auc_pairs(scores, labels) -> float:
    """Pair enumeration: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() != 0
    pos = s[y]
    neg = s[~y]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def directed_mean_distance(from_mask, to_mask, spacing) -> float:
    """Mean over from-voxels of the distance to the nearest to-voxel, pairwise."""
    src = np.argwhere(np.asarray(from_mask) != 0).astype(np.float64)
    dst = np.argwhere(np.asarray(to_mask) != 0).astype(np.float64)
    s = np.asarray(spacing, dtype=np.float64)
    diff = (src[:, None, :] - dst[None, :, :]) * s
    d = np.sqrt((diff * diff).sum(axis=2)).min(axis=1)
    return float(d.mean())


def cremi_bruteforce(pred, gt, spacing=(1.0, 1.0, 1.0)):
    adgt = directed_mean_distance(pred, gt, spacing)
    adf = directed_mean_distance(gt, pred, spacing)
    return adgt, adf, (adgt + adf) / 2.0
