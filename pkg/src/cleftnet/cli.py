"""Command-line entry point: synth / train / infer / eval / gradcheck / import.

Runs are configured by an INI file (every key optional, defaults below) with
CLI flags taking precedence.  Unknown sections or keys are rejected.  Every
command is deterministic under --seed and writes a manifest.json recording
the config hash, the seed, and a checksum per artifact.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (NaN loss or failed gradient check).
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import labels as L
from .autodiff import grad_check
from .data import (Volume, import_cremi, read_vol1, split_slices, synthesize,
                   write_vol1)
from .errors import (ConfigError, DataError, EmptyTargetError, FormatError,
                     MetricUndefinedError, NumericalError, ShapeError)
from .metrics import evaluate
from .model import (VARIANTS, CleftNet, CleftNetConfig, load_checkpoint,
                    predict_volume, save_checkpoint)
from .train import TrainConfig, Trainer

# section -> key -> (parser, default).  Defaults are desk scale; full-scale
# values (channels 32..160 at divisor 1, 8x256x256 patches) go in the file.
_INT = int
_FLOAT = float
_STR = str


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(","))


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(","))


def _opt_int(s: str):
    return None if s.strip() == "" else int(s)


SCHEMA: dict = {
    "model": {
        "variant": (_STR, "cleftnet"),
        "block_variant": (_STR, ""),       # optional override: fa|selfattn|gated|plain
        "label_mode": (_STR, ""),          # optional override: augmented|segmentation
        "channels": (_ints, (32, 64, 96, 128)),
        "bottom_channels": (_INT, 160),
        "channel_divisor": (_INT, 8),
        "num_blocks": (_INT, 4),
        "patch_size": (_ints, (8, 32, 32)),
        "attention_channels": (_opt_int, None),
        "bn_momentum": (_FLOAT, 0.1),
    },
    "train": {
        "learning_rate": (_FLOAT, 0.001),
        "batch_size": (_INT, 2),
        "iterations": (_INT, 500),
        "eval_interval": (_INT, 100),
        "seed": (_INT, 0),
        "alpha1": (_FLOAT, 0.5),
        "alpha2": (_FLOAT, 0.2),
        "min_cleft_voxels": (_INT, 200),
        "reject_probability": (_FLOAT, 0.95),
        "rotate_prob": (_FLOAT, 0.5),
        "flip_prob": (_FLOAT, 0.5),
        "grayscale_prob": (_FLOAT, 0.2),
        "augment": (_bool, True),
    },
    "data": {
        "train_raw": (_STR, ""),
        "train_labels": (_STR, ""),
        "val_raw": (_STR, ""),
        "val_labels": (_STR, ""),
    },
    "synth": {
        "extents": (_ints, (32, 64, 64)),
        "n_clefts": (_INT, 4),
        "thickness": (_FLOAT, 2.0),
        "noise": (_FLOAT, 0.08),
    },
    "eval": {
        "threshold": (_FLOAT, 0.5),
        "slices": (_INT, 3),
    },
}


def default_config() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def load_config(path) -> dict:
    """Parse an INI run configuration, rejecting anything outside the schema."""
    cfg = default_config()
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            parser, _ = SCHEMA[section][key]
            try:
                cfg[section][key] = parser(value)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from e
    return cfg


def config_hash(cfg: dict) -> str:
    lines = sorted(f"{sec}.{key}={cfg[sec][key]!r}" for sec in cfg for key in cfg[sec])
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def model_config_from(cfg: dict) -> CleftNetConfig:
    m = cfg["model"]
    variant = m["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    block, label = VARIANTS[variant]
    if m["block_variant"]:
        block = m["block_variant"]
    if m["label_mode"]:
        label = m["label_mode"]
    try:
        return CleftNetConfig(
            channels=m["channels"], bottom_channels=m["bottom_channels"],
            block_variant=block, label_mode=label, patch_size=m["patch_size"],
            channel_divisor=m["channel_divisor"], num_blocks=m["num_blocks"],
            attention_channels=m["attention_channels"], bn_momentum=m["bn_momentum"])
    except ShapeError as e:
        raise ConfigError(str(e)) from e


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"], batch_size=t["batch_size"],
        iterations=t["iterations"], eval_interval=t["eval_interval"],
        seed=t["seed"], alpha1=t["alpha1"], alpha2=t["alpha2"],
        min_cleft_voxels=t["min_cleft_voxels"],
        reject_probability=t["reject_probability"], rotate_prob=t["rotate_prob"],
        flip_prob=t["flip_prob"], grayscale_prob=t["grayscale_prob"],
        augment=t["augment"], eval_threshold=cfg["eval"]["threshold"])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: dict, seed: int, artifacts) -> str:
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p) for p in artifacts},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _apply_overrides(cfg: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "variant", None):
        cfg["model"]["variant"] = args.variant
    if getattr(args, "iterations", None) is not None:
        cfg["train"]["iterations"] = args.iterations
    if getattr(args, "threshold", None) is not None:
        cfg["eval"]["threshold"] = args.threshold


def _ensure_out(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    seed = cfg["train"]["seed"]
    s = cfg["synth"]
    extents = _ints(args.extents) if args.extents else s["extents"]
    n_clefts = args.n_clefts if args.n_clefts is not None else s["n_clefts"]
    if n_clefts == 0:
        print("warning: n_clefts=0 produces a volume with no positive labels", file=sys.stderr)
    volume = synthesize(seed, extents, n_clefts, s["thickness"], s["noise"])
    train_vol, val_vol = split_slices(volume)
    out = _ensure_out(args.out)
    paths = {
        "train_raw": os.path.join(out, "train_raw.vol1"),
        "train_labels": os.path.join(out, "train_labels.vol1"),
        "val_raw": os.path.join(out, "val_raw.vol1"),
        "val_labels": os.path.join(out, "val_labels.vol1"),
    }
    train_vol.save(paths["train_raw"], paths["train_labels"])
    val_vol.save(paths["val_raw"], paths["val_labels"])
    write_manifest(out, "synth", cfg, seed, paths.values())
    frac = volume.labels.mean()
    print(f"synthesized {extents} volume (seed {seed}, {n_clefts} clefts, "
          f"label fraction {frac:.4f}) -> {out}")
    return 0


def _load_volumes(cfg: dict, data_dir) -> tuple:
    d = dict(cfg["data"])
    if data_dir:
        for key in d:
            d[key] = os.path.join(data_dir, f"{key}.vol1")
    for key, path in d.items():
        if not path:
            raise ConfigError(f"no path configured for data.{key} (use --data or a config file)")
        if not os.path.exists(path):
            raise DataError(f"data file not found: {path}")
    train_vol = Volume.load(d["train_raw"], d["train_labels"], "train")
    val_vol = Volume.load(d["val_raw"], d["val_labels"], "val")
    return [train_vol], [val_vol]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    train_cfg = train_config_from(cfg)
    train_vols, val_vols = _load_volumes(cfg, args.data)
    out = _ensure_out(args.out)

    if args.resume:
        model, opt_state, extras = load_checkpoint(args.resume)
        if opt_state is None or "sample_rng" not in extras:
            raise FormatError(f"{args.resume}: checkpoint has no training state to resume")
        trainer = Trainer(model, train_vols, val_vols, train_cfg)
        trainer.restore(opt_state, extras)
        print(f"resumed from {args.resume} at iteration {trainer.iteration}")
    else:
        model = CleftNet(model_config_from(cfg), seed=train_cfg.seed)
        trainer = Trainer(model, train_vols, val_vols, train_cfg)

    log = print if args.verbose else None
    history = trainer.run(out_dir=out, log=log)
    history_path = os.path.join(out, "history.tsv")
    history.write(history_path)
    from .viz import plot_history
    curve_path = os.path.join(out, "loss_curve.png")
    plot_history(history, curve_path)

    artifacts = [history_path, curve_path, os.path.join(out, "latest.ckpt")]
    best = os.path.join(out, "best.ckpt")
    if os.path.exists(best):
        artifacts.append(best)
    write_manifest(out, "train", cfg, train_cfg.seed, artifacts)
    last = history.rows[-1]
    print(f"trained {trainer.iteration} iterations; final loss {last.total:.6f}; "
          f"best val score {trainer.best_cremi:.4f} -> {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    model, _, _ = load_checkpoint(args.checkpoint)
    raw, spacing, kind = read_vol1(args.raw)
    if kind != "raw":
        raise DataError(f"{args.raw}: inference expects a raw u8 volume, got kind {kind!r}")
    overlap = _ints(args.overlap) if args.overlap else (0, 0, 0)
    seg, boundary = predict_volume(model, raw, overlap)
    out = _ensure_out(args.out)
    paths = [os.path.join(out, "pred_seg.vol1")]
    write_vol1(paths[0], seg, spacing, "field")
    if boundary is not None:
        paths.append(os.path.join(out, "pred_boundary.vol1"))
        write_vol1(paths[1], boundary, spacing, "field")
    write_manifest(out, "infer", cfg, cfg["train"]["seed"], paths)
    print(f"predicted {raw.shape} volume with {model.config.block_variant}/"
          f"{model.config.label_mode} checkpoint -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    pred, pred_spacing, pred_kind = read_vol1(args.pred)
    gt, gt_spacing, gt_kind = read_vol1(args.gt)
    if gt_kind != "mask":
        raise DataError(f"{args.gt}: ground truth must be a mask volume, got kind {gt_kind!r}")
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    spacing = _floats(args.spacing) if args.spacing else gt_spacing

    thresholds = _floats(args.sweep) if args.sweep else (cfg["eval"]["threshold"],)
    out = _ensure_out(args.out)
    artifacts = []
    for thr in thresholds:
        report = evaluate(pred, gt, spacing, thr)
        stem = "report" if len(thresholds) == 1 else f"report_t{thr:.2f}"
        txt = os.path.join(out, f"{stem}.txt")
        js = os.path.join(out, f"{stem}.json")
        with open(txt, "w") as fh:
            fh.write(report.to_text())
        with open(js, "w") as fh:
            fh.write(report.to_json())
        artifacts += [txt, js]
        print(f"threshold {thr:g}: F1 {report.f1:.4f}  AUC {report.auc:.4f}  "
              f"score {report.cremi:.4f}")

    if args.slices:
        raw = None
        if args.raw:
            raw, _, rkind = read_vol1(args.raw)
            if rkind != "raw":
                raise DataError(f"{args.raw}: --raw expects a raw volume, got {rkind!r}")
        from .viz import export_slice_panels
        pred_mask = pred >= thresholds[0] if pred_kind == "field" else pred
        artifacts += export_slice_panels(out, gt, pred_mask, raw, count=cfg["eval"]["slices"])

    write_manifest(out, "eval", cfg, cfg["train"]["seed"], artifacts)
    return 0


def _gradcheck_setup(block_variant: str, seed: int = 8):
    """A tiny 64-bit two-stage network plus one fixed labeled patch.

    The head biases are offset so both prediction streams spread across
    their coherence gates; otherwise a freshly initialized model can leave
    the coherence sets empty and the L_c check would pass vacuously.  The
    seed picks a point comfortably away from pooling near-ties (max-window
    argmax flips under the probe make the difference quotient blend two
    subgradients).
    """
    config = CleftNetConfig(
        channels=(32, 64), bottom_channels=96, block_variant=block_variant,
        label_mode="augmented", patch_size=(2, 8, 8), channel_divisor=16,
        num_blocks=2)
    model = CleftNet(config, seed=seed, dtype=np.float64)
    model.head.bias.data += np.array([2.0, 1.0])
    rng = np.random.default_rng(seed)
    raw = rng.random((1, 2, 8, 8, 1), dtype=np.float64)
    y_s = (rng.random((2, 8, 8)) < 0.3).astype(np.uint8)
    y_s[0, 0, 0] = 1  # keep both classes present
    y_s[0, 0, 1] = 0
    y_b = L.tanh_distance_map(y_s)[None]
    # pin the coherence gates at their initial sets: the masks are constants
    # in the backward rule, so the finite-difference probe must hold them
    # fixed too (a perturbation flipping a voxel's set would add the jump to
    # the difference quotient)
    seg, bnd = model.forward(raw, training=True)
    fired = (bnd.data > L.BOUNDARY_TAU)
    gated = (bnd.data <= L.BOUNDARY_TAU) & (seg.data > L.SEGMENTATION_TAU)
    assert fired.any() and gated.any(), "coherence sets are empty; the L_c check would be vacuous"
    return model, raw, y_s[None], y_b, (fired, gated)


def _gradcheck_loss(model, raw, y_s, y_b, gates, term: str, alpha1: float, alpha2: float):
    def f():
        seg, bnd = model.forward(raw, training=True)
        if term == "L_s":
            return L.segmentation_loss(seg, y_s)
        if term == "L_b":
            return L.boundary_loss(bnd, y_b)
        if term == "L_c":
            return L.coherence_loss(seg, bnd, gates=gates)
        ls = L.segmentation_loss(seg, y_s)
        lb = L.boundary_loss(bnd, y_b)
        lc = L.coherence_loss(seg, bnd, gates=gates)
        return ls + lb * alpha1 + lc * alpha2
    return f


def run_gradcheck(tol: float = 1e-4, eps: float = 1e-5, alpha1: float = 0.5,
                  alpha2: float = 0.2, corrupt: bool = False, log=print,
                  max_samples: int = 100) -> dict:
    """Finite-difference checks for every block variant and every loss term.

    Returns a result dict (also serialized by cmd_gradcheck); raises
    :class:`NumericalError` when any check fails.
    """
    checks = [(variant, "total") for variant in ("fa", "selfattn", "gated", "plain")]
    checks += [("fa", term) for term in ("L_s", "L_b", "L_c")]
    hook = None
    if corrupt:
        def hook(grads):
            name = sorted(grads)[0]
            grads[name] = grads[name] * 1.01 + 1e-3
            return grads
    results = {"tol": tol, "eps": eps, "checks": []}
    failed = []
    for variant, term in checks:
        model, raw, y_s, y_b, gates = _gradcheck_setup(variant)
        f = _gradcheck_loss(model, raw, y_s, y_b, gates, term, alpha1, alpha2)
        report = grad_check(f, model.parameters(), eps=eps, tol=tol,
                            grad_hook=hook, max_samples=max_samples)
        entry = {
            "variant": variant,
            "term": term,
            "max_rel_err": report.max_rel_err,
            "passed": report.passed,
            "per_param": report.per_param,
        }
        results["checks"].append(entry)
        status = "pass" if report.passed else "FAIL"
        if log:
            log(f"{status}  {variant:<9} {term:<6} max rel err {report.max_rel_err:.3e} "
                f"(worst: {report.worst()})")
        if not report.passed:
            failed.append(f"{variant}/{term}")
    results["passed"] = not failed
    if failed:
        raise GradcheckFailure(results, f"gradient check failed for: {', '.join(failed)}")
    return results


class GradcheckFailure(NumericalError):
    def __init__(self, results, message):
        super().__init__(message)
        self.results = results


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _ensure_out(args.out)
    path = os.path.join(out, "gradcheck.json")
    try:
        results = run_gradcheck(tol=args.tol, eps=args.eps,
                                alpha1=cfg["train"]["alpha1"],
                                alpha2=cfg["train"]["alpha2"],
                                corrupt=args.corrupt,
                                max_samples=args.max_samples)
    except GradcheckFailure as e:
        with open(path, "w") as fh:
            json.dump(e.results, fh, indent=2, sort_keys=True)
        raise
    with open(path, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    write_manifest(out, "gradcheck", cfg, cfg["train"]["seed"], [path])
    print(f"all gradient checks passed at tol {args.tol:g} -> {path}")
    return 0


def cmd_import(args) -> int:
    cfg = load_config(args.config)
    sentinel = int(args.background_sentinel, 0) if isinstance(args.background_sentinel, str) \
        else args.background_sentinel
    volume = import_cremi(args.h5, args.raw_path, args.cleft_path, sentinel)
    out = _ensure_out(args.out)
    raw_path = os.path.join(out, "raw.vol1")
    labels_path = os.path.join(out, "labels.vol1")
    volume.save(raw_path, labels_path)
    write_manifest(out, "import", cfg, cfg["train"]["seed"], [raw_path, labels_path])
    print(f"imported {volume.shape} volume, {int(volume.labels.sum())} cleft voxels, "
          f"spacing {volume.spacing} -> {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cleftnet",
                                description="Volumetric cleft detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("synth", help="generate synthetic train/val volumes")
    common(sp, "synthetic")
    sp.add_argument("--extents", help="volume extents d,h,w")
    sp.add_argument("--n-clefts", type=int, dest="n_clefts")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp, "run")
    sp.add_argument("--data", help="directory with {train,val}_{raw,labels}.vol1")
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--verbose", action="store_true", help="log every iteration")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="sliding-window prediction over a volume")
    common(sp, "predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--raw", required=True, help="input raw .vol1 volume")
    sp.add_argument("--overlap", help="window overlap in voxels d,h,w (default 0,0,0)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score a prediction against ground truth")
    common(sp, "evaluation")
    sp.add_argument("--pred", required=True, help="predicted .vol1 (field or mask)")
    sp.add_argument("--gt", required=True, help="ground-truth mask .vol1")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--sweep", help="comma-separated thresholds, one report each")
    sp.add_argument("--spacing", help="voxel spacing dz,dy,dx (default: from the gt file)")
    sp.add_argument("--slices", action="store_true", help="export slice panels")
    sp.add_argument("--raw", help="raw .vol1 for the slice panels")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp, "gradcheck")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    sp.add_argument("--max-samples", type=int, default=100, dest="max_samples",
                    help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("import", help="convert a CREMI HDF5 container to VOL1")
    common(sp, "imported")
    sp.add_argument("--h5", required=True, help="CREMI HDF5 file")
    sp.add_argument("--raw-path", default="volumes/raw", dest="raw_path")
    sp.add_argument("--cleft-path", default="volumes/labels/clefts", dest="cleft_path")
    sp.add_argument("--background-sentinel", default=str(0xFFFFFFFFFFFFFFFF),
                    dest="background_sentinel")
    sp.set_defaults(func=cmd_import)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError, EmptyTargetError, MetricUndefinedError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
