"""Adam optimizer, the training loop, and the history record.

History files are line-delimited, one row per iteration:

    <iter>\t<loss>\t<L_s>\t<L_b>\t<L_c>

and one row per validation pass:

    eval\t<iter>\t<cremi>\t<f1>\t<auc>

Training is deterministic given the seed: the patch sequence, augmentation
decisions, and (single-threaded) loss trajectory all replay exactly, and a
checkpoint carries the optimizer state and generator states so a resumed run
is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import labels as L
from .autodiff import Tape
from .data import PatchSample, Volume, augment, sample_patch
from .errors import ConfigError, NumericalError
from .metrics import evaluate
from .model import CleftNet, predict_volume, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2
    iterations: int = 500
    eval_interval: int = 100
    seed: int = 0
    alpha1: float = 0.5
    alpha2: float = 0.2
    min_cleft_voxels: int = 200
    reject_probability: float = 0.95
    rotate_prob: float = 0.5
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2
    augment: bool = True
    eval_threshold: float = 0.5

    def validate(self) -> None:
        if self.learning_rate < 0 or self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("learning_rate must be nonnegative; batch_size and "
                              "iterations must be positive")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        for name in ("reject_probability", "rotate_prob", "flip_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")


class Adam:
    """Standard Adam with bias correction; state is mutated in place."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.m:
            np.copyto(self.m[name], state["m"][name])
            np.copyto(self.v[name], state["v"][name])


def adam_step(params, state: Adam) -> None:
    """One optimizer step over ``params`` using their accumulated gradients."""
    if list(params) != state.params:
        raise ConfigError("adam_step called with parameters the state was not built for")
    state.step()


@dataclass
class HistoryRow:
    iteration: int
    total: float
    seg: float
    boundary: float
    coherence: float

    def line(self) -> str:
        return (f"{self.iteration}\t{self.total:.8e}\t{self.seg:.8e}"
                f"\t{self.boundary:.8e}\t{self.coherence:.8e}")


@dataclass
class EvalRow:
    iteration: int
    cremi: float
    f1: float
    auc: float

    def line(self) -> str:
        return f"eval\t{self.iteration}\t{self.cremi:.8e}\t{self.f1:.8e}\t{self.auc:.8e}"


@dataclass
class History:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def write(self, path) -> None:
        merged = [(r.iteration, 0, r.line()) for r in self.rows]
        merged += [(e.iteration, 1, e.line()) for e in self.evals]
        merged.sort(key=lambda t: (t[0], t[1]))
        with open(path, "w") as fh:
            for _, _, line in merged:
                fh.write(line + "\n")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


class Trainer:
    """Drives optimization of one model over sampled patches.

    Validation runs every ``eval_interval`` iterations; the checkpoint with
    the best (lowest) distance score is kept when an output directory is
    given, along with the latest state for resuming.
    """

    def __init__(self, model: CleftNet, train_volumes, val_volumes, cfg: TrainConfig):
        cfg.validate()
        self.model = model
        self.train_volumes = list(train_volumes)
        self.val_volumes = list(val_volumes)
        self.cfg = cfg
        self.optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
        seq = np.random.SeedSequence(cfg.seed)
        s_sample, s_augment = seq.spawn(2)
        self.sample_rng = np.random.default_rng(s_sample)
        self.augment_rng = np.random.default_rng(s_augment)
        self.iteration = 0
        self.best_cremi = math.inf
        self.history = History()

    # -- persistence -------------------------------------------------------

    def extras(self) -> dict:
        return {
            "iteration": self.iteration,
            "best_cremi": self.best_cremi,
            "sample_rng": _rng_state(self.sample_rng),
            "augment_rng": _rng_state(self.augment_rng),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer.state_dict(), self.extras())

    def restore(self, optimizer_state: dict, extras: dict) -> None:
        """Adopt the optimizer/rng state of a checkpoint (model already loaded)."""
        self.optimizer.load_state_dict(optimizer_state)
        self.iteration = int(extras["iteration"])
        self.best_cremi = float(extras["best_cremi"])
        self.sample_rng = _restore_rng(extras["sample_rng"])
        self.augment_rng = _restore_rng(extras["augment_rng"])

    # -- the loop ----------------------------------------------------------

    def _next_patch(self) -> PatchSample:
        vol_idx = int(self.sample_rng.integers(0, len(self.train_volumes)))
        vol = self.train_volumes[vol_idx]
        patch = sample_patch(vol, self.model.config.patch_size, self.sample_rng,
                             self.cfg.min_cleft_voxels, self.cfg.reject_probability)
        if self.cfg.augment:
            patch = augment(patch, self.augment_rng, self.cfg.rotate_prob,
                            self.cfg.flip_prob, self.cfg.grayscale_prob)
        return patch

    def _next_batch(self):
        patches = [self._next_patch() for _ in range(self.cfg.batch_size)]
        raw = np.stack([p.raw for p in patches])[..., None]
        y_s = np.stack([p.y_s for p in patches])
        y_b = np.stack([p.y_b for p in patches])
        return raw, y_s, y_b, [p.origin for p in patches]

    def _train_step(self) -> HistoryRow:
        raw, y_s, y_b, origins = self._next_batch()
        cfg = self.cfg
        augmented = self.model.config.label_mode == "augmented"
        with Tape() as tape:
            seg, bnd = self.model.forward(raw, training=True)
            ls = L.segmentation_loss(seg, y_s)
            if augmented:
                lb = L.boundary_loss(bnd, y_b.astype(seg.dtype))
                lc = L.coherence_loss(seg, bnd)
                loss = ls + lb * cfg.alpha1 + lc * cfg.alpha2
            else:
                lb = lc = None
                loss = ls
        total = float(loss.data)
        if not math.isfinite(total):
            raise NumericalError(
                f"non-finite loss {total} at iteration {self.iteration + 1}; "
                f"batch origins {origins}")
        self.optimizer.zero_grad()
        tape.backward(loss)
        self.optimizer.step()
        self.iteration += 1
        return HistoryRow(self.iteration, total, float(ls.data),
                          float(lb.data) if lb is not None else 0.0,
                          float(lc.data) if lc is not None else 0.0)

    def evaluate(self) -> EvalRow:
        """Mean validation metrics over the held-out volumes."""
        cremis, f1s, aucs = [], [], []
        for vol in self.val_volumes:
            seg, _ = predict_volume(self.model, vol.raw)
            report = evaluate(seg, vol.labels, vol.spacing, self.cfg.eval_threshold)
            cremis.append(report.cremi)
            f1s.append(report.f1)
            aucs.append(report.auc)
        return EvalRow(self.iteration, float(np.mean(cremis)), float(np.mean(f1s)),
                       float(np.mean(aucs)))

    def run(self, iterations: int | None = None, out_dir=None,
            log=None) -> History:
        """Train for ``iterations`` more steps (default: the configured count)."""
        iterations = iterations if iterations is not None else self.cfg.iterations
        best_path = latest_path = None
        if out_dir is not None:
            import os
            os.makedirs(out_dir, exist_ok=True)
            best_path = os.path.join(out_dir, "best.ckpt")
            latest_path = os.path.join(out_dir, "latest.ckpt")
        for _ in range(iterations):
            row = self._train_step()
            self.history.rows.append(row)
            if log:
                log(row.line())
            if self.val_volumes and self.iteration % self.cfg.eval_interval == 0:
                ev = self.evaluate()
                self.history.evals.append(ev)
                if log:
                    log(ev.line())
                if ev.cremi < self.best_cremi:
                    self.best_cremi = ev.cremi
                    if best_path:
                        self.save(best_path)
        if latest_path:
            self.save(latest_path)
        return self.history
