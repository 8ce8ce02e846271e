"""Network assembly, checkpointing, and whole-volume inference.

The network is U-Net shaped: four encoder stages, a bottom stage, four
decoder stages, skip connections by channel concatenation.  Every stage is
conv block -> residual block -> resize step, in that order.  The resize step
depends on the block variant:

    fa        resizing attention with a learnable query (downsampling
              queries at half size, upsampling at double, identity at the
              bottom)
    selfattn  size-preserving attention with an input-dependent query,
              followed by max pooling / trilinear upsampling
    gated     spatial-wise gated attention, followed by pooling/upsampling
    plain     pooling/upsampling only (residual U-Net)

Input patches are anisotropic (shallow depth, fine in-plane resolution), so
only the first stage halves the depth; the remaining stages resize height
and width only.

Checkpoints use the CKPT1 container: magic, a JSON header carrying the
config, a named (name, shape, offset) manifest, optional extras, then all
arrays as little-endian float32 in manifest order.  Round-trips are
bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (FAParams, GateParams, SAParams, fa_forward, gated_attention_swa,
                        init_fa, init_gate, init_self_attention, kaiming_uniform,
                        self_attention)
from .autodiff import Parameter
from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import Tensor, as_tensor

CKPT_MAGIC = b"CKPT1"

BLOCK_VARIANTS = ("fa", "selfattn", "gated", "plain")
LABEL_MODES = ("augmented", "segmentation")

# CLI-facing ablation names -> (block variant, label mode)
VARIANTS = {
    "cleftnet": ("fa", "augmented"),
    "no-fa": ("plain", "augmented"),
    "no-la": ("fa", "segmentation"),
    "selfattn": ("selfattn", "augmented"),
    "resunet": ("plain", "segmentation"),
}


@dataclass
class CleftNetConfig:
    """Architecture settings; all sizes are before the desk-scale divisor."""

    channels: tuple = (32, 64, 96, 128)
    bottom_channels: int = 160
    block_variant: str = "fa"
    label_mode: str = "augmented"
    patch_size: tuple = (8, 256, 256)
    in_channels: int = 1
    channel_divisor: int = 1
    num_blocks: int = 4
    attention_channels: int | None = None  # key/value width; default c // 2
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.validate()

    def validate(self) -> None:
        if self.block_variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown block variant {self.block_variant!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {self.label_mode!r}")
        if not 1 <= self.num_blocks <= len(self.channels):
            raise ConfigError(f"num_blocks must be in 1..{len(self.channels)}")
        if any(b >= a for a, b in zip(self.channels[1:], self.channels[:-1])):
            raise ConfigError(f"channel plan must be strictly increasing, got {self.channels}")
        if self.channel_divisor < 1:
            raise ConfigError("channel_divisor must be >= 1")
        d, h, w = self.patch_size
        plan = self.resize_plan()
        fd = int(np.prod([f[0] for f in plan]))
        fh = int(np.prod([f[1] for f in plan]))
        fw = int(np.prod([f[2] for f in plan]))
        if d % fd or h % fh or w % fw:
            raise ShapeError(
                f"patch size {self.patch_size} is not divisible by the "
                f"downsampling plan (needs multiples of {(fd, fh, fw)})")

    def resize_plan(self) -> list:
        """Per-stage (d,h,w) resize factors; only the first stage halves depth."""
        return [(2, 2, 2)] + [(1, 2, 2)] * (self.num_blocks - 1)

    def stage_channels(self) -> list:
        div = self.channel_divisor
        return [max(1, c // div) for c in self.channels[:self.num_blocks]]

    def bottom(self) -> int:
        return max(1, self.bottom_channels // self.channel_divisor)

    @property
    def head_channels(self) -> int:
        return 2 if self.label_mode == "augmented" else 1

    def attn_width(self, channels: int) -> int:
        if self.attention_channels is not None:
            return self.attention_channels
        return max(1, channels // 2)

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "bottom_channels": self.bottom_channels,
            "block_variant": self.block_variant,
            "label_mode": self.label_mode,
            "patch_size": list(self.patch_size),
            "in_channels": self.in_channels,
            "channel_divisor": self.channel_divisor,
            "num_blocks": self.num_blocks,
            "attention_channels": self.attention_channels,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleftNetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys in checkpoint: {sorted(unknown)}")
        kw = dict(d)
        kw["channels"] = tuple(kw.get("channels", (32, 64, 96, 128)))
        kw["patch_size"] = tuple(kw.get("patch_size", (8, 256, 256)))
        return cls(**kw)


class Conv3dLayer:
    def __init__(self, rng, name, c_in, c_out, ksize, dtype, bias=False):
        kd, kh, kw = ksize
        fan_in = kd * kh * kw * c_in
        self.weight = Parameter(f"{name}.w",
                                kaiming_uniform(rng, (kd, kh, kw, c_in, c_out), fan_in, dtype))
        self.bias = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype)) if bias else None
        self.padding = (kd // 2, kh // 2, kw // 2)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv3d(x, self.weight, (1, 1, 1), self.padding)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def state(self):
        return [(p.name, p.data) for p in self.parameters()]


class BatchNormLayer:
    def __init__(self, name, channels, dtype, momentum):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training, self.momentum)

    def parameters(self):
        return [self.gamma, self.beta]

    def state(self):
        return [(self.gamma.name, self.gamma.data), (self.beta.name, self.beta.data),
                (f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class ConvBlock:
    """3x3x3 convolution, batch norm, ELU."""

    def __init__(self, rng, name, c_in, c_out, dtype, momentum):
        self.conv = Conv3dLayer(rng, f"{name}.conv", c_in, c_out, (3, 3, 3), dtype)
        self.bn = BatchNormLayer(f"{name}.bn", c_out, dtype, momentum)

    def __call__(self, x, training):
        return T.elu(self.bn(self.conv(x), training))

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def state(self):
        return self.conv.state() + self.bn.state()


class ResidualBlock:
    """conv-BN-ELU-conv-BN, input added before the final ELU."""

    def __init__(self, rng, name, channels, dtype, momentum):
        self.conv1 = Conv3dLayer(rng, f"{name}.conv1", channels, channels, (3, 3, 3), dtype)
        self.bn1 = BatchNormLayer(f"{name}.bn1", channels, dtype, momentum)
        self.conv2 = Conv3dLayer(rng, f"{name}.conv2", channels, channels, (3, 3, 3), dtype)
        self.bn2 = BatchNormLayer(f"{name}.bn2", channels, dtype, momentum)

    def __call__(self, x, training):
        y = T.elu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        return T.elu(T.add(y, x))

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.conv2.parameters() + self.bn2.parameters())

    def state(self):
        return self.conv1.state() + self.bn1.state() + self.conv2.state() + self.bn2.state()


class ResizeStep:
    """The per-stage resize/attention step for one block variant.

    ``mode`` is "down", "up", or "same"; ``factors`` are the per-axis resize
    ratios.  For the fa variant the attention itself resizes; the other
    variants attend (or not) at the input size and then pool/upsample.
    """

    def __init__(self, rng, name, variant, channels, mode, factors, out_spatial,
                 attn_channels, dtype):
        self.variant = variant
        self.mode = mode
        self.factors = factors
        self.fa: FAParams | None = None
        self.sa: SAParams | None = None
        self.gate: GateParams | None = None
        if variant == "fa":
            residual = {"down": "maxpool-half", "up": "trilinear-double",
                        "same": "identity"}[mode]
            self.fa = init_fa(rng, f"{name}.fa", channels, out_spatial, residual,
                              attn_channels, dtype)
        elif variant == "selfattn":
            self.sa = init_self_attention(rng, f"{name}.attn", channels, attn_channels, dtype)
        elif variant == "gated":
            self.gate = init_gate(rng, f"{name}.gate", channels, "spatial", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.fa is not None:
            return fa_forward(x, self.fa)
        if self.sa is not None:
            x = self_attention(x, self.sa)
        elif self.gate is not None:
            x = gated_attention_swa(x, self.gate.vector)
        if self.mode == "down":
            return T.maxpool3d(x, self.factors)
        if self.mode == "up":
            return T.trilinear_upsample(x, self.factors)
        return x

    def parameters(self):
        if self.fa is not None:
            return self.fa.parameters()
        if self.sa is not None:
            return self.sa.parameters()
        if self.gate is not None:
            return [self.gate.vector]
        return []

    def state(self):
        return [(p.name, p.data) for p in self.parameters()]


class _Stage:
    def __init__(self, conv, res, resize):
        self.conv = conv
        self.res = res
        self.resize = resize

    def parameters(self):
        out = self.conv.parameters() + self.res.parameters()
        if self.resize is not None:
            out += self.resize.parameters()
        return out

    def state(self):
        out = self.conv.state() + self.res.state()
        if self.resize is not None:
            out += self.resize.state()
        return out


class CleftNet:
    """The assembled network; built once for a fixed input patch size."""

    def __init__(self, config: CleftNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        chans = config.stage_channels()
        plan = config.resize_plan()
        momentum = config.bn_momentum
        variant = config.block_variant

        spatial = list(config.patch_size)
        spatials = [tuple(spatial)]
        for f in plan:
            spatial = [n // k for n, k in zip(spatial, f)]
            spatials.append(tuple(spatial))
        # spatials[i] is the resolution entering encoder stage i; [-1] the bottom

        self.encoder: list[_Stage] = []
        c_prev = config.in_channels
        for i, (c, f) in enumerate(zip(chans, plan)):
            name = f"enc{i}"
            conv = ConvBlock(rng, name, c_prev, c, dtype, momentum)
            res = ResidualBlock(rng, f"{name}.res", c, dtype, momentum)
            step = ResizeStep(rng, name, variant, c, "down", f, spatials[i + 1],
                              config.attn_width(c), dtype)
            self.encoder.append(_Stage(conv, res, step))
            c_prev = c

        cb = config.bottom()
        bconv = ConvBlock(rng, "bottom", c_prev, cb, dtype, momentum)
        bres = ResidualBlock(rng, "bottom.res", cb, dtype, momentum)
        bstep = (ResizeStep(rng, "bottom", variant, cb, "same", (1, 1, 1),
                            spatials[-1], config.attn_width(cb), dtype)
                 if variant != "plain" else None)
        self.bottom = _Stage(bconv, bres, bstep)

        self.decoder: list[_Stage] = []
        c_above = cb
        for i in reversed(range(config.num_blocks)):
            c = chans[i]
            name = f"dec{i}"
            conv = ConvBlock(rng, name, c_above, c, dtype, momentum)
            res = ResidualBlock(rng, f"{name}.res", c, dtype, momentum)
            step = ResizeStep(rng, name, variant, c, "up", plan[i], spatials[i],
                              config.attn_width(c), dtype)
            self.decoder.append(_Stage(conv, res, step))
            c_above = 2 * c  # after concatenating the skip

        head_in = 2 * chans[0]
        self.head = Conv3dLayer(rng, "head", head_in, config.head_channels,
                                (1, 1, 1), dtype, bias=True)

    def parameters(self) -> list:
        out = []
        for stage in self.encoder:
            out += stage.parameters()
        out += self.bottom.parameters()
        for stage in self.decoder:
            out += stage.parameters()
        out += self.head.parameters()
        return out

    def state_items(self) -> list:
        """(name, array) pairs: parameters plus batch-norm running buffers."""
        out = []
        for stage in self.encoder:
            out += stage.state()
        out += self.bottom.state()
        for stage in self.decoder:
            out += stage.state()
        out += self.head.state()
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, batch, training: bool = False):
        """(b,d,h,w,in_channels) -> probabilities (b,d,h,w) per output stream.

        Returns (segmentation, boundary); boundary is None in
        segmentation-only mode.  Outputs are sigmoid probabilities in (0,1).
        """
        x = as_tensor(batch, self.dtype)
        if x.ndim != 5:
            raise ShapeError(f"forward expects a (b,d,h,w,c) batch, got rank {x.ndim}")
        if tuple(x.shape[1:4]) != tuple(self.config.patch_size):
            raise ShapeError(
                f"input spatial shape {tuple(x.shape[1:4])} does not match the "
                f"configured patch size {tuple(self.config.patch_size)}")
        if x.shape[-1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[-1]}")

        skips = []
        t = x
        for stage in self.encoder:
            t = stage.conv(t, training)
            t = stage.res(t, training)
            skips.append(t)
            t = stage.resize(t)
        t = self.bottom.conv(t, training)
        t = self.bottom.res(t, training)
        if self.bottom.resize is not None:
            t = self.bottom.resize(t)
        for stage, skip in zip(self.decoder, reversed(skips)):
            t = stage.conv(t, training)
            t = stage.res(t, training)
            t = stage.resize(t)
            t = T.concat([t, skip], axis=-1)
        logits = self.head(t)
        probs = T.sigmoid(logits)
        seg = T.channel(probs, 0)
        if self.config.head_channels == 2:
            return seg, T.channel(probs, 1)
        return seg, None


def build(config: CleftNetConfig, seed: int = 0, dtype=np.float32) -> CleftNet:
    return CleftNet(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# CKPT1 checkpoints


def save_checkpoint(path, model: CleftNet, optimizer_state: dict | None = None,
                    extras: dict | None = None) -> None:
    """Write the model (and optionally optimizer tensors) as a CKPT1 file."""
    items = list(model.state_items())
    if optimizer_state:
        for kind in ("m", "v"):
            for name, arr in optimizer_state[kind].items():
                items.append((f"adam.{kind}.{name}", arr))
        extras = dict(extras or {})
        extras["adam_t"] = optimizer_state["t"]
    manifest = []
    offset = 0
    chunks = []
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append([name, list(arr.shape), offset])
        chunks.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_dict(),
        "manifest": manifest,
        "extras": extras or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Read a CKPT1 file; returns (model, optimizer_state or None, extras).

    The model is rebuilt from the embedded config and every array is
    restored bit-exactly; a manifest that does not match the rebuilt model
    is rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9 or blob[:5] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a CKPT1 checkpoint")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad header: {e}") from e
    payload = blob[9 + hlen:]

    config = CleftNetConfig.from_dict(header["config"])
    model = CleftNet(config, seed=0, dtype=np.float32)
    targets = dict(model.state_items())

    manifest = header["manifest"]
    expected = sum(int(np.prod(shape)) * 4 for _, shape, _ in manifest)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest expects {expected}")

    opt_m: dict = {}
    opt_v: dict = {}
    seen = set()
    for name, shape, offset in manifest:
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        arr = arr.reshape([int(s) for s in shape])
        if name.startswith("adam.m."):
            opt_m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            opt_v[name[len("adam.v."):]] = arr.copy()
        else:
            if name not in targets:
                raise FormatError(f"{path}: manifest entry {name!r} not in the rebuilt model")
            if tuple(arr.shape) != tuple(targets[name].shape):
                raise FormatError(
                    f"{path}: manifest shape {arr.shape} for {name!r} does not match "
                    f"model shape {targets[name].shape}")
            np.copyto(targets[name], arr)
            seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise FormatError(f"{path}: checkpoint is missing model arrays: {sorted(missing)[:4]}...")

    extras = header.get("extras", {})
    optimizer_state = None
    if opt_m or "adam_t" in extras:
        optimizer_state = {"m": opt_m, "v": opt_v, "t": int(extras.get("adam_t", 0))}
    return model, optimizer_state, extras


def save(model: CleftNet, path) -> None:
    save_checkpoint(path, model)


def load(path) -> CleftNet:
    model, _, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# whole-volume inference


def _axis_origins(extent: int, patch: int, step: int) -> list:
    origins = list(range(0, extent - patch + 1, step))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


def predict_volume(model: CleftNet, raw: np.ndarray, overlap=(0, 0, 0)):
    """Sliding-window prediction over a full (d,h,w) u8 volume.

    Windows are the model's configured patch size; with zero overlap this is
    plain tiling (patches stacked back together), otherwise overlapping
    voxels are averaged.  Returns float32 probability fields shaped like the
    input: (segmentation, boundary or None).
    """
    patch = tuple(model.config.patch_size)
    shape = raw.shape
    if any(n < p for n, p in zip(shape, patch)):
        raise DataError(f"volume shape {shape} is smaller than the patch size {patch}")
    steps = tuple(max(1, p - o) for p, o in zip(patch, overlap))
    norm = raw.astype(np.float32) / 255.0

    two_heads = model.config.head_channels == 2
    acc_s = np.zeros(shape, dtype=np.float64)
    acc_b = np.zeros(shape, dtype=np.float64) if two_heads else None
    count = np.zeros(shape, dtype=np.float64)
    for oz in _axis_origins(shape[0], patch[0], steps[0]):
        for oy in _axis_origins(shape[1], patch[1], steps[1]):
            for ox in _axis_origins(shape[2], patch[2], steps[2]):
                sl = (slice(oz, oz + patch[0]), slice(oy, oy + patch[1]),
                      slice(ox, ox + patch[2]))
                window = norm[sl][None, ..., None]
                seg, bnd = model.forward(window, training=False)
                acc_s[sl] += seg.data[0]
                if acc_b is not None:
                    acc_b[sl] += bnd.data[0]
                count[sl] += 1.0
    seg_out = (acc_s / count).astype(np.float32)
    bnd_out = (acc_b / count).astype(np.float32) if acc_b is not None else None
    return seg_out, bnd_out
