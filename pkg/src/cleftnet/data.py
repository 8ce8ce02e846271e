"""Volume I/O, CREMI import, patch sampling, augmentation, synthetic data.

The on-disk container is VOL1: a little-endian binary file holding one
(d,h,w) array plus its voxel spacing.

    magic   b"VOL1"
    extents u32 d, h, w
    kind    u8 (0 = raw u8, 1 = mask u8, 2 = field f32)
    spacing f32 s_d, s_h, s_w        (nm, or 1 for synthetic data)
    payload row-major array bytes

A dataset volume is a pair of files (raw + mask); predictions are f32
fields.  Round-trips are bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError
from .labels import tanh_distance_map

VOL1_MAGIC = b"VOL1"
KIND_CODES = {"raw": 0, "mask": 1, "field": 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
KIND_DTYPES = {"raw": np.uint8, "mask": np.uint8, "field": np.dtype("<f4")}

CREMI_SPACING = (40.0, 4.0, 4.0)
CREMI_BACKGROUND = 0xFFFFFFFFFFFFFFFF  # uint64 max marks non-cleft voxels


def write_vol1(path, data: np.ndarray, spacing, kind: str) -> None:
    if kind not in KIND_CODES:
        raise FormatError(f"unknown VOL1 kind {kind!r}")
    arr = np.ascontiguousarray(data, dtype=KIND_DTYPES[kind])
    if arr.ndim != 3:
        raise FormatError(f"VOL1 stores (d,h,w) arrays, got rank {arr.ndim}")
    d, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(VOL1_MAGIC)
        fh.write(struct.pack("<III", d, h, w))
        fh.write(struct.pack("<B", KIND_CODES[kind]))
        fh.write(struct.pack("<fff", *spacing))
        fh.write(arr.tobytes())


def read_vol1(path):
    """Returns (array, spacing, kind)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = 4 + 12 + 1 + 12
    if len(blob) < head or blob[:4] != VOL1_MAGIC:
        raise FormatError(f"{path}: not a VOL1 file")
    d, h, w = struct.unpack("<III", blob[4:16])
    (code,) = struct.unpack("<B", blob[16:17])
    spacing = struct.unpack("<fff", blob[17:29])
    if code not in CODE_KINDS:
        raise FormatError(f"{path}: unknown VOL1 kind code {code}")
    kind = CODE_KINDS[code]
    dtype = KIND_DTYPES[kind]
    expected = d * h * w * dtype.itemsize if kind == "field" else d * h * w
    payload = blob[head:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).copy()
    return arr, tuple(float(s) for s in spacing), kind


@dataclass
class Volume:
    """An image stack with its binary annotation and voxel spacing."""

    raw: np.ndarray          # u8 (d,h,w)
    labels: np.ndarray       # u8 (d,h,w), 1 marks cleft voxels
    spacing: tuple = (1.0, 1.0, 1.0)
    name: str = ""
    _boundary: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.raw.shape != self.labels.shape:
            raise DataError(f"raw shape {self.raw.shape} != labels shape {self.labels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.raw.shape

    def boundary_map(self) -> np.ndarray:
        """Full-volume tanh distance map, computed once and cached."""
        if self._boundary is None:
            self._boundary = tanh_distance_map(self.labels).astype(np.float32)
        return self._boundary

    @classmethod
    def load(cls, raw_path, labels_path, name: str = "") -> "Volume":
        raw, spacing, kind = read_vol1(raw_path)
        if kind != "raw":
            raise DataError(f"{raw_path}: expected a raw volume, got kind {kind!r}")
        labels, lsp, lkind = read_vol1(labels_path)
        if lkind != "mask":
            raise DataError(f"{labels_path}: expected a mask volume, got kind {lkind!r}")
        if labels.shape != raw.shape:
            raise DataError(f"{labels_path}: shape {labels.shape} != raw shape {raw.shape}")
        return cls(raw, labels, spacing, name or str(raw_path))

    def save(self, raw_path, labels_path) -> None:
        write_vol1(raw_path, self.raw, self.spacing, "raw")
        write_vol1(labels_path, self.labels, self.spacing, "mask")


def _list_h5_datasets(h5file) -> list[str]:
    found = []
    h5file.visititems(lambda name, obj: found.append(name) if hasattr(obj, "shape") else None)
    return found


def import_cremi(path, raw_dataset_path: str = "volumes/raw",
                 cleft_dataset_path: str = "volumes/labels/clefts",
                 background_sentinel: int = CREMI_BACKGROUND,
                 name: str = "") -> Volume:
    """Read an HDF5 CREMI container into a Volume.

    Cleft labels are integer ids; a voxel is a cleft voxel iff its id differs
    from the background sentinel.  Spacing is read from the raw dataset's
    ``resolution`` attribute when present, else defaults to 40 x 4 x 4 nm.
    """
    import h5py

    with h5py.File(path, "r") as fh:
        for ds_path in (raw_dataset_path, cleft_dataset_path):
            if ds_path not in fh:
                available = ", ".join(_list_h5_datasets(fh)) or "(none)"
                raise DataError(f"{path}: dataset {ds_path!r} not found; available: {available}")
        raw_ds = fh[raw_dataset_path]
        raw = np.asarray(raw_ds, dtype=np.uint8)
        ids = np.asarray(fh[cleft_dataset_path])
        labels = (ids != background_sentinel).astype(np.uint8)
        resolution = raw_ds.attrs.get("resolution")
        spacing = tuple(float(s) for s in resolution) if resolution is not None else CREMI_SPACING
    return Volume(raw, labels, spacing, name or str(path))


@dataclass
class PatchSample:
    """One training example cropped from a volume.

    ``y_b`` is cropped from the full-volume boundary map, so distances are
    not truncated by the patch border.
    """

    raw: np.ndarray          # f32 in [0,1]
    y_s: np.ndarray          # u8
    y_b: np.ndarray          # f32
    origin: tuple
    draws: int = 1
    augmented: dict | None = None


def sample_patch(volume: Volume, size, rng: np.random.Generator,
                 min_cleft: int = 200, reject_prob: float = 0.95) -> PatchSample:
    """Uniform random crop with rejection of mostly-background patches.

    A draw with fewer than ``min_cleft`` cleft voxels is redrawn with
    probability ``reject_prob``; the loop repeats until a draw is kept.
    """
    size = tuple(size)
    shape = volume.shape
    if any(p > n for p, n in zip(size, shape)):
        raise DataError(f"patch size {size} exceeds volume shape {shape}")
    boundary = volume.boundary_map()
    draws = 0
    while True:
        draws += 1
        origin = tuple(int(rng.integers(0, n - p + 1)) for p, n in zip(size, shape))
        sl = tuple(slice(o, o + p) for o, p in zip(origin, size))
        n_cleft = int(np.count_nonzero(volume.labels[sl]))
        if n_cleft >= min_cleft or rng.random() >= reject_prob:
            break
    raw = volume.raw[sl].astype(np.float32) / 255.0
    return PatchSample(raw=raw, y_s=volume.labels[sl].copy(),
                       y_b=boundary[sl].copy(), origin=origin, draws=draws)


def augment(patch: PatchSample, rng: np.random.Generator,
            rotate_prob: float = 0.5, flip_prob: float = 0.5,
            grayscale_prob: float = 0.2) -> PatchSample:
    """Random in-plane rotation, single-axis flip, and intensity jitter.

    Rotations are 90-degree multiples in the (h,w) plane (the depth axis is
    anisotropic, so label geometry stays exact); the grayscale transform is
    an affine intensity jitter raw <- clamp(a*raw + b) on the image only.
    All decisions land in the ``augmented`` record.
    """
    raw, y_s, y_b = patch.raw, patch.y_s, patch.y_b
    record: dict = {"rotate_k": 0, "flip_axis": None, "grayscale": None}
    if rng.random() < rotate_prob:
        k = int(rng.integers(1, 4))
        record["rotate_k"] = k
        raw = np.rot90(raw, k, axes=(1, 2))
        y_s = np.rot90(y_s, k, axes=(1, 2))
        y_b = np.rot90(y_b, k, axes=(1, 2))
    if rng.random() < flip_prob:
        axis = int(rng.integers(0, 3))
        record["flip_axis"] = axis
        raw = np.flip(raw, axis)
        y_s = np.flip(y_s, axis)
        y_b = np.flip(y_b, axis)
    if rng.random() < grayscale_prob:
        a = float(rng.uniform(0.9, 1.1))
        b = float(rng.uniform(-0.1, 0.1))
        record["grayscale"] = (a, b)
        raw = np.clip(a * raw + b, 0.0, 1.0)
    return PatchSample(raw=np.ascontiguousarray(raw, dtype=np.float32),
                       y_s=np.ascontiguousarray(y_s),
                       y_b=np.ascontiguousarray(y_b, dtype=np.float32),
                       origin=patch.origin, draws=patch.draws, augmented=record)


def split_slices(volume: Volume, train_slices: int | None = None,
                 val_slices: int | None = None) -> tuple[Volume, Volume]:
    """Leading slices for training, trailing for validation (default 4:1)."""
    d = volume.shape[0]
    if train_slices is None and val_slices is None:
        val_slices = max(1, d // 5)
    if train_slices is None:
        train_slices = d - val_slices
    if val_slices is None:
        val_slices = d - train_slices
    if train_slices <= 0 or val_slices <= 0 or train_slices + val_slices > d:
        raise DataError(f"cannot split {d} slices into {train_slices} train + {val_slices} val")
    train = Volume(volume.raw[:train_slices].copy(), volume.labels[:train_slices].copy(),
                   volume.spacing, f"{volume.name}/train")
    val = Volume(volume.raw[d - val_slices:].copy(), volume.labels[d - val_slices:].copy(),
                 volume.spacing, f"{volume.name}/val")
    return train, val


def _resize_trilinear(arr: np.ndarray, shape) -> np.ndarray:
    """Separable linear resize to ``shape`` (align-corners=false); float arrays."""
    out = arr.astype(np.float64)
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        coords = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        w = (coords - lo).reshape((1,) * axis + (-1,) + (1,) * (out.ndim - axis - 1))
        out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
    return out


def synthesize(seed: int, extents=(32, 64, 64), n_clefts: int = 4,
               thickness: float = 2.0, noise: float = 0.08) -> Volume:
    """Desk-scale stand-in volume: textured background with thin dark sheets.

    Each sheet is a low-order polynomial surface z = f(y, x) over a random
    in-plane window, rasterized at the given voxel thickness, marked in the
    labels and rendered darker than the background.  Deterministic in
    ``seed``; the labeled fraction stays small (sparse positives).
    """
    d, h, w = extents
    if h < 16 or w < 16:
        raise DataError(f"in-plane extents must be >= 16, got {extents}")
    rng = np.random.default_rng(seed)

    coarse = rng.random((max(2, d // 4), max(2, h // 8), max(2, w // 8)))
    texture = _resize_trilinear(coarse, (d, h, w))
    base = 110.0 + 80.0 * texture + 255.0 * noise * rng.standard_normal((d, h, w))

    labels = np.zeros((d, h, w), dtype=np.uint8)
    zz = np.arange(d, dtype=np.float64)
    for i in range(n_clefts):
        # stratify sheet depths so leading/trailing slice splits both see clefts
        cz = (i + rng.uniform(0.2, 0.8)) / n_clefts * d
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        ey = rng.uniform(0.12, 0.28) * h
        ex = rng.uniform(0.12, 0.28) * w
        coef = rng.uniform(-1.5, 1.5, size=5)
        y0, y1 = max(0, int(cy - ey)), min(h, int(cy + ey) + 1)
        x0, x1 = max(0, int(cx - ex)), min(w, int(cx + ex) + 1)
        ys = (np.arange(y0, y1) - cy) / ey
        xs = (np.arange(x0, x1) - cx) / ex
        u, v = np.meshgrid(ys, xs, indexing="ij")
        surface = cz + coef[0] * u + coef[1] * v + coef[2] * u * u + coef[3] * u * v + coef[4] * v * v
        inside = u * u + v * v <= 1.0
        sheet = (np.abs(zz[:, None, None] - surface[None]) <= thickness / 2.0) & inside[None]
        labels[:, y0:y1, x0:x1] |= sheet.astype(np.uint8)

    base = np.where(labels, base * 0.4, base)
    raw = np.clip(base, 0, 255).astype(np.uint8)
    return Volume(raw, labels, (1.0, 1.0, 1.0), f"synthetic-{seed}")
