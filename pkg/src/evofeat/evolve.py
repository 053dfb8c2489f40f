"""The self-evolving training loop.

Each iteration runs four steps over the training images:

(a) detect keypoints -- random at iteration 0, affine-adapted detection + NMS
    afterwards;
(b) descriptor phase on those keypoints;
(c) reliability keypoints from the updated descriptors;
(d) detector phase on the reliability keypoints.

All randomness is derived from ``(seed, iteration, step kind, ...)`` keys, so
a run resumed from any phase checkpoint replays the rest of the schedule
exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry
from .describe_train import DescTrainConfig, descriptor_update_step
from .detect import NMSConfig, affine_adapted_probability, nms, random_keypoints
from .detect_train import DetTrainConfig, detector_update_step
from .io import MIN_SIDE, DataError
from .model import ArchConfig, Network, init_params, load_checkpoint, save_checkpoint, snapshot
from .reliability import ReliabilityConfig, compute_reliable_keypoints

log = logging.getLogger(__name__)

PHASES = ("descriptor", "detector")
_KEY_DETECT, _KEY_DESC, _KEY_RELIABILITY, _KEY_DET = 0, 1, 2, 3


@dataclass(frozen=True)
class EvolveConfig:
    iterations: int = 5
    epochs_per_phase: int = 20
    initial_lr: float = 1e-3
    lr_decay: float = 0.1
    patience_epochs: int = 2
    lr_floor: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    data_dir: str | None = None
    max_side: int = 320
    detect_warps: int = 10
    affine_adaptation: bool = True
    initial_keypoints: int = 1000
    deterministic: bool = True
    arch: ArchConfig = ArchConfig()
    augment: geometry.AugmentConfig = geometry.AugmentConfig()
    desc: DescTrainConfig = DescTrainConfig()
    det: DetTrainConfig = DetTrainConfig()
    reliability: ReliabilityConfig = ReliabilityConfig()
    nms: NMSConfig = NMSConfig(4, 1000, 0.0)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")

    # flat key/value view: nested configs use dotted keys ("desc.margin")
    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = _plain(getattr(v, g.name))
            else:
                out[f.name] = _plain(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "EvolveConfig | None" = None) -> "EvolveConfig":
        """Override ``base`` (default config) with dotted keys; unknown keys
        raise ``KeyError``."""
        base = base or cls()
        top, nested = {}, {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if head not in known:
                raise KeyError(f"unknown config key {key!r}")
            sub = getattr(base, head)
            if tail:
                if not dataclasses.is_dataclass(sub) or tail not in {g.name for g in dataclasses.fields(sub)}:
                    raise KeyError(f"unknown config key {key!r}")
                nested.setdefault(head, {})[tail] = _coerce(getattr(sub, tail), value)
            else:
                if dataclasses.is_dataclass(sub):
                    raise KeyError(f"config key {key!r} needs a sub-field")
                top[head] = _coerce(sub, value)
        for head, kv in nested.items():
            top[head] = dataclasses.replace(getattr(base, head), **kv)
        return dataclasses.replace(base, **top)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _coerce(current, value):
    if isinstance(current, tuple):
        return tuple(_coerce(c, v) for c, v in zip(current, value)) if len(value) == len(current) \
            else tuple(value)
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


class PlateauSchedule:
    """Multiply the learning rate by ``decay`` once the epoch-average loss
    has failed to strictly improve for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, decay: float = 0.1, patience: int = 2, floor: float = 1e-6):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.floor = floor
        self.best = float("inf")
        self.bad_epochs = 0

    def update(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.decay, self.floor)
                self.bad_epochs = 0
        return self.lr


def lr_schedule(losses, lr: float = 1e-3, decay: float = 0.1, patience: int = 2,
                floor: float = 1e-6) -> list[float]:
    """Learning rate after each epoch for a sequence of epoch losses."""
    sched = PlateauSchedule(lr, decay, patience, floor)
    return [sched.update(v) for v in losses]


@dataclass
class TrainState:
    net: Network
    iteration: int = 0
    phase: str = "descriptor"
    epoch: int = 0
    lr: float = 1e-3
    best_loss: float = float("inf")
    q_cache: dict = field(default_factory=dict)
    y_cache: dict = field(default_factory=dict)
    snap: Network | None = None
    snapshots_taken: int = 0


@dataclass
class EvolveReport:
    config_hash: str
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def phase_curve(self, iteration: int, phase: str, key: str | None = None) -> list[float]:
        key = key or ("L1" if phase == "descriptor" else "L2")
        return [e[key] for e in self.epochs if e["iteration"] == iteration and e["phase"] == phase]

    def running_mean(self, phase: str, key: str, window: int | None = None) -> list[float]:
        """Mean of ``key`` over the steps so far of every ``phase`` run, or
        over the trailing ``window`` steps when given."""
        vals = np.array([r[key] for r in self.rows if r["phase"] == phase and not r.get("skipped")])
        csum = np.concatenate([[0.0], np.cumsum(vals)])
        n = np.arange(1, len(vals) + 1)
        if window is None:
            return list(csum[1:] / n)
        lo = np.maximum(n - window, 0)
        return list((csum[n] - csum[lo]) / (n - lo))


def check_images(images: dict) -> dict:
    if not images:
        raise DataError("training set is empty")
    for key, img in images.items():
        if min(img.shape[:2]) < MIN_SIDE:
            raise DataError(f"{key}: image smaller than {MIN_SIDE}x{MIN_SIDE}")
    return dict(sorted(images.items()))


def detect_training_keypoints(state: TrainState, images: dict, cfg: EvolveConfig) -> dict:
    """Step (a): keypoint cache for every image."""
    out = {}
    for idx, (key, img) in enumerate(images.items()):
        rng = rng_for(cfg.seed, state.iteration, _KEY_DETECT, idx)
        if state.iteration == 0:
            out[key] = random_keypoints(img.shape[:2], cfg.initial_keypoints, rng, cfg.nms.radius).points
        else:
            m = cfg.detect_warps if cfg.affine_adaptation else 1
            prob = affine_adapted_probability(state.net, img, m, rng, cfg.augment)
            out[key] = nms(prob, cfg.nms.radius, cfg.nms.max_n, cfg.nms.min_score).points
    return out


def reliability_keypoints(state: TrainState, images: dict, cfg: EvolveConfig) -> dict:
    """Step (c): reliability keypoints for every image."""
    out = {}
    for idx, (key, img) in enumerate(images.items()):
        rng = rng_for(cfg.seed, state.iteration, _KEY_RELIABILITY, idx)
        out[key] = compute_reliable_keypoints(state.net, img, cfg.reliability, rng, cfg.nms,
                                              cfg.augment).points
    return out


def run_phase(state: TrainState, phase: str, images: dict, cfg: EvolveConfig,
              report: EvolveReport) -> TrainState:
    """``epochs_per_phase`` shuffled passes over the images, one image pair
    per Adam step, with the plateau LR schedule on the epoch-average loss."""
    net = state.net
    state.phase = phase
    state.snap = snapshot(net)
    state.snapshots_taken += 1
    optim = torch.optim.Adam(net.parameters(), lr=cfg.initial_lr, betas=cfg.adam_betas)
    sched = PlateauSchedule(cfg.initial_lr, cfg.lr_decay, cfg.patience_epochs, cfg.lr_floor)
    state.lr = cfg.initial_lr
    keys = list(images)
    kind = _KEY_DESC if phase == "descriptor" else _KEY_DET
    sched_key = "L1" if phase == "descriptor" else "L2_sched"
    for epoch in range(cfg.epochs_per_phase):
        state.epoch = epoch
        order = rng_for(cfg.seed, state.iteration, kind, epoch).permutation(len(keys))
        step_losses, recs = [], []
        for pos, idx in enumerate(order):
            key = keys[idx]
            rng = rng_for(cfg.seed, state.iteration, kind, epoch, int(idx))
            if phase == "descriptor":
                rec = descriptor_update_step(net, state.snap, optim, images[key], state.q_cache[key],
                                             rng, cfg.desc, cfg.augment)
            else:
                rec = detector_update_step(net, state.snap, optim, images[key], state.y_cache[key],
                                           rng, cfg.det, cfg.augment)
            rec.update(iteration=state.iteration, phase=phase, epoch=epoch, step=pos,
                       image=key, lr=state.lr)
            report.rows.append(rec)
            if not rec.get("skipped") and not np.isfinite(rec[sched_key]):
                raise FloatingPointError(
                    f"non-finite {sched_key} at iteration {state.iteration}, {phase} epoch {epoch}, "
                    f"image {key}")
            if not rec.get("skipped"):
                step_losses.append(rec[sched_key])
                recs.append(rec)
        avg = float(np.mean(step_losses)) if step_losses else float("nan")
        summary = {"iteration": state.iteration, "phase": phase, "epoch": epoch, "lr": state.lr}
        for k in recs[0] if recs else ():
            if isinstance(recs[0][k], float) and k != "lr":
                summary[k] = float(np.mean([r[k] for r in recs]))
        report.epochs.append(summary)
        log.info("iter %d %s epoch %d: loss %.4f lr %.2e", state.iteration, phase, epoch, avg, state.lr)
        if np.isfinite(avg):
            state.lr = sched.update(avg)
            state.best_loss = sched.best
            for g in optim.param_groups:
                g["lr"] = state.lr
    return state


def _checkpoint(state: TrainState, out_dir, phase: str, cfg: EvolveConfig, report: EvolveReport):
    if out_dir is None:
        return
    path = os.path.join(out_dir, str(state.iteration), f"{phase}.ckpt")
    save_checkpoint(state.net, path, iteration=state.iteration, phase=phase,
                    epoch=cfg.epochs_per_phase, config_hash=cfg.config_hash())
    report.checkpoints.append(path)


def _cache_record(iteration, kind, cache):
    return {"iteration": iteration, "kind": kind,
            "points": {k: np.asarray(v).copy() for k, v in cache.items()}}


def _set_determinism(cfg: EvolveConfig):
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def run_self_evolve(cfg: EvolveConfig, images: dict, out_dir=None, resume_from=None,
                    net: Network | None = None):
    """Train from scratch (or resume from a phase checkpoint).

    Returns ``(network, report)``.  With ``out_dir`` set, phase checkpoints
    go to ``<out_dir>/<iteration>/<phase>.ckpt``, the final model to
    ``<out_dir>/final.ckpt`` and per-step rows to ``metrics.jsonl``.
    """
    _set_determinism(cfg)
    images = check_images(images)
    report = EvolveReport(cfg.config_hash())
    start_iter, skip = 0, set()
    if resume_from is not None:
        net = load_checkpoint(resume_from)
        done_iter, done_phase = int(net.meta["iteration"]), net.meta["phase"]
        if done_phase == "detector":
            start_iter = done_iter + 1
        else:
            start_iter = done_iter
            skip = {"a", "b"}
    elif net is None:
        net = init_params(cfg.seed, cfg.arch)
    state = TrainState(net=net, lr=cfg.initial_lr)
    t0 = time.perf_counter()
    for it in range(start_iter, cfg.iterations):
        state.iteration = it
        net.meta.update(iteration=it)
        if "a" not in skip:
            t = time.perf_counter()
            state.q_cache = detect_training_keypoints(state, images, cfg)
            report.timings[f"{it}/detect"] = time.perf_counter() - t
            report.caches.append(_cache_record(it, "Q", state.q_cache))
            t = time.perf_counter()
            run_phase(state, "descriptor", images, cfg, report)
            report.timings[f"{it}/descriptor"] = time.perf_counter() - t
            net.meta.update(phase="descriptor")
            _checkpoint(state, out_dir, "descriptor", cfg, report)
        skip = set()
        t = time.perf_counter()
        state.y_cache = reliability_keypoints(state, images, cfg)
        report.timings[f"{it}/reliability"] = time.perf_counter() - t
        report.caches.append(_cache_record(it, "Y", state.y_cache))
        t = time.perf_counter()
        run_phase(state, "detector", images, cfg, report)
        report.timings[f"{it}/detector"] = time.perf_counter() - t
        net.meta.update(phase="detector")
        _checkpoint(state, out_dir, "detector", cfg, report)
    report.timings["total"] = time.perf_counter() - t0
    if out_dir is not None:
        final = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(net, final, config_hash=cfg.config_hash())
        report.checkpoints.append(final)
        write_metrics(report, os.path.join(out_dir, "metrics.jsonl"))
    return net, report


def write_metrics(report: EvolveReport, path) -> None:
    with open(path, "w") as fp:
        fp.write(json.dumps({"kind": "config", "config_hash": report.config_hash}) + "\n")
        for r in report.rows:
            fp.write(json.dumps({"kind": "step", **r}) + "\n")
        for e in report.epochs:
            fp.write(json.dumps({"kind": "epoch", **e}) + "\n")
