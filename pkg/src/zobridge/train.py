"""Optimizers, clipping, the two-stage training procedures, and metrics.

Stage 1 pretrains components independently with exact gradients (autoencoder
on reconstruction, predictor on ground-truth features). Stage 2 trains the
assembled pipeline end to end, bridging the opaque middle with zeroth-order
estimates; the same loop runs with exact middle gradients for the oracle
baseline. `(config, seed)` fully determines the metric records; wall times
are kept out of the serialized metrics so files are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from .errors import BackendError, DivergenceError
from .pipeline import GradientBundle, LossSpec, PipelineState, backward, backward_exact
from .rng import Rng
from .zo import ZoConfig

CHECKPOINT_VERSION = 1

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr_encoder_decoder: float = 7e-4
    lr_predictor: float = 5e-4
    batch_size_stage1: int = 16
    batch_size_stage2: int = 8
    clip_norm: float = 5.0
    lambda_: float = 1.0
    epochs_stage1: int = 200
    epochs_stage2: int = 40
    seed: int = 0
    freeze: tuple[str, ...] = ("v",)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not (self.lr_encoder_decoder >= 0.0 and self.lr_predictor >= 0.0):
            raise ValueError("learning rates must be >= 0")
        if self.batch_size_stage1 < 1 or self.batch_size_stage2 < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.clip_norm > 0.0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        self.freeze = tuple(self.freeze)

    def lr_for(self, block_name: str) -> float:
        return (self.lr_encoder_decoder if block_name in ("u", "v")
                else self.lr_predictor)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_rmse: float | None
    test_rmse: float | None
    recon_accuracy: float | None
    zo_queries: int
    wall_time: float = 0.0

    def to_json(self) -> str:
        # wall_time is intentionally omitted: metric files must be
        # byte-identical for equal (config, seed).
        return json.dumps({
            "phase": self.phase,
            "epoch": self.epoch,
            "train_rmse": self.train_rmse,
            "test_rmse": self.test_rmse,
            "recon_accuracy": self.recon_accuracy,
            "zo_queries": self.zo_queries,
        })


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def total_zo_queries(self) -> int:
        return sum(r.zo_queries for r in self.records)

    @property
    def total_wall_time(self) -> float:
        return sum(r.wall_time for r in self.records)

    def last(self, phase: str | None = None) -> EpochRecord | None:
        recs = [r for r in self.records if phase is None or r.phase == phase]
        return recs[-1] if recs else None

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    def extend(self, other: "RunMetrics") -> None:
        self.records.extend(other.records)


# ---------------------------------------------------------------------------
# Metrics


def rmse(y, y_hat) -> float:
    """sqrt of the mean squared residual norm over paired lists of vectors."""
    y = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in y]
    y_hat = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in y_hat]
    if len(y) != len(y_hat):
        raise ValueError(f"length mismatch: {len(y)} vs {len(y_hat)}")
    if not y:
        raise ValueError("rmse needs at least one pair")
    total = 0.0
    for a, b in zip(y, y_hat):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        r = a - b
        total += float(r @ r)
    return float(np.sqrt(total / len(y)))


def reconstruction_accuracy(objects, ps: PipelineState, threshold: float = 0.5) -> float:
    """Fraction of objects whose encode -> decode -> discretize round trip is exact."""
    if ps.recon_decoder is None:
        raise ValueError("pipeline has no reconstruction path")
    objects = [np.ascontiguousarray(o, dtype=np.float64) for o in objects]
    if not objects:
        raise ValueError("need at least one object")
    hits = 0
    for x in objects:
        logits = ps.recon_decoder.forward(ps.encoder.forward(x))
        if np.array_equal(K.threshold_bits(logits, threshold), x):
            hits += 1
    return hits / len(objects)


def pipeline_predictions(ps: PipelineState, xs) -> np.ndarray:
    return np.stack([ps.tail.forward(ps.middle.forward(ps.encoder.forward(x)))
                     for x in xs])


def pipeline_rmse(ps: PipelineState, xs, ys) -> float:
    return rmse(list(np.asarray(ys, dtype=np.float64)),
                list(pipeline_predictions(ps, xs)))


# ---------------------------------------------------------------------------
# Clipping and optimizers


def clip(bundle: GradientBundle, clip_norm: float) -> GradientBundle:
    """Per-block L2 clipping: g <- g * clip_norm / ||g|| when ||g|| > clip_norm."""
    if not clip_norm > 0.0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    clipped: dict[str, np.ndarray] = {}
    for name, g in bundle.grads.items():
        norm = float(np.sqrt(K.dot(g, g)))
        clipped[name] = g * (clip_norm / norm) if norm > clip_norm else g
    return GradientBundle(grads=clipped, loss=bundle.loss,
                          loss_pred=bundle.loss_pred, loss_recon=bundle.loss_recon,
                          zo_queries=bundle.zo_queries, warnings=bundle.warnings)


class Sgd:
    def __init__(self, blocks, lr_by_block):
        self.blocks = dict(blocks)
        self.lr = dict(lr_by_block)

    def step(self, grads) -> None:
        for name, block in self.blocks.items():
            if block.frozen:
                continue
            block.values -= self.lr[name] * grads[name]


class Adam:
    """Adaptive moments with the standard decay constants (0.9, 0.999, 1e-8)."""

    def __init__(self, blocks, lr_by_block):
        self.blocks = dict(blocks)
        self.lr = dict(lr_by_block)
        self.m = {n: np.zeros(b.size) for n, b in self.blocks.items()}
        self.v = {n: np.zeros(b.size) for n, b in self.blocks.items()}
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1c = 1.0 - _ADAM_BETA1 ** self.t
        b2c = 1.0 - _ADAM_BETA2 ** self.t
        for name, block in self.blocks.items():
            if block.frozen:
                continue
            g = grads[name]
            self.m[name] = _ADAM_BETA1 * self.m[name] + (1.0 - _ADAM_BETA1) * g
            self.v[name] = _ADAM_BETA2 * self.v[name] + (1.0 - _ADAM_BETA2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + _ADAM_EPS)
            block.values -= self.lr[name] * update


def make_optimizer(kind: str, blocks, lr_by_block):
    if kind == "adam":
        return Adam(blocks, lr_by_block)
    if kind == "sgd":
        return Sgd(blocks, lr_by_block)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# Stage 1: independent pretraining with exact gradients


@dataclass
class SupervisedTask:
    """One exact-gradient fitting problem over a differentiable stage chain."""

    name: str
    stages: list
    train_x: np.ndarray
    train_y: np.ndarray
    epochs: int
    batch_size: int
    test_x: np.ndarray | None = None
    test_y: np.ndarray | None = None
    track_recon_accuracy: bool = False


def _chain_forward(stages, x):
    a = x
    for s in stages:
        a = s.forward(a)
    return a


def _chain_vjp(stages, x, g):
    xs = [x]
    for s in stages:
        xs.append(s.forward(xs[-1]))
    grads: dict[str, np.ndarray] = {}
    cot = g
    for s, xin in zip(reversed(stages), reversed(xs[:-1])):
        cot, gblocks = s.vjp(xin, cot)
        grads.update(gblocks)
    return grads


def _round_trip_accuracy(stages, objects, threshold=0.5) -> float:
    hits = 0
    for x in objects:
        out = _chain_forward(stages, x)
        if np.array_equal(K.threshold_bits(out, threshold), x):
            hits += 1
    return hits / len(objects)


def train_supervised(task: SupervisedTask, cfg: TrainConfig,
                     stream_tag: int) -> RunMetrics:
    """Minimize mean squared error over the chain with exact gradients."""
    blocks = {}
    for s in task.stages:
        for b in s.param_blocks:
            blocks[b.name] = b
    lr_by_block = {name: cfg.lr_for(name) for name in blocks}
    opt = make_optimizer(cfg.optimizer, blocks, lr_by_block)
    root = Rng(cfg.seed, (stream_tag,))
    n = task.train_x.shape[0]
    metrics = RunMetrics()

    for epoch in range(task.epochs):
        t0 = time.perf_counter()
        perm = root.split(0, epoch).permutation(n)
        for lo in range(0, n, task.batch_size):
            idx = perm[lo:lo + task.batch_size]
            acc = {name: np.zeros(b.size) for name, b in blocks.items()}
            loss = 0.0
            for j in idx:
                y_hat = _chain_forward(task.stages, task.train_x[j])
                r = y_hat - task.train_y[j]
                loss += float(r @ r)
                for name, gb in _chain_vjp(task.stages, task.train_x[j],
                                           2.0 * r).items():
                    acc[name] += gb
            loss /= idx.shape[0]
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"stage1 task {task.name!r}: non-finite loss at epoch {epoch}",
                    checkpoint={n_: b.values.copy() for n_, b in blocks.items()},
                    epoch=epoch)
            for name in acc:
                acc[name] /= idx.shape[0]
            bundle = clip(GradientBundle(grads=acc, loss=loss, loss_pred=loss,
                                         loss_recon=0.0), cfg.clip_norm)
            opt.step(bundle.grads)

        train_rmse = test_rmse = accuracy = None
        if task.track_recon_accuracy:
            accuracy = _round_trip_accuracy(task.stages, task.train_x)
        else:
            train_rmse = rmse(list(task.train_y),
                              [_chain_forward(task.stages, x) for x in task.train_x])
            if task.test_x is not None:
                test_rmse = rmse(list(task.test_y),
                                 [_chain_forward(task.stages, x) for x in task.test_x])
        metrics.records.append(EpochRecord(
            phase=task.name, epoch=epoch, train_rmse=train_rmse,
            test_rmse=test_rmse, recon_accuracy=accuracy, zo_queries=0,
            wall_time=time.perf_counter() - t0))
    return metrics


def stage1_train(ae_task: SupervisedTask | None, pred_task: SupervisedTask | None,
                 cfg: TrainConfig) -> RunMetrics:
    """Independent pretraining: autoencoder and predictor, no ZO queries."""
    metrics = RunMetrics()
    if ae_task is not None:
        metrics.extend(train_supervised(ae_task, cfg, stream_tag=101))
    if pred_task is not None:
        metrics.extend(train_supervised(pred_task, cfg, stream_tag=102))
    return metrics


# ---------------------------------------------------------------------------
# Stage 2: joint end-to-end training through the opaque middle


def _epoch_eval(ps, train_x, train_y, test_x, test_y):
    train_rmse = pipeline_rmse(ps, train_x, train_y)
    test_rmse = pipeline_rmse(ps, test_x, test_y) if test_x is not None else None
    accuracy = (reconstruction_accuracy(test_x if test_x is not None else train_x, ps)
                if ps.recon_decoder is not None else None)
    return train_rmse, test_rmse, accuracy


def stage2_train(ps: PipelineState, train_x, train_y, test_x, test_y,
                 cfg: TrainConfig, zo_cfg: ZoConfig, *, grad_fn=None,
                 phase: str = "stage2") -> RunMetrics:
    """Joint training loop: backward -> clip -> optimizer step on unfrozen blocks.

    `grad_fn(ps, batch, spec, rng) -> GradientBundle` defaults to the hybrid
    zeroth-order backward; the first-order oracle passes the exact one.
    Deterministic given (config, seed). Divergence aborts with the last good
    parameter snapshot attached.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    for name in cfg.freeze:
        if name not in ps.blocks:
            raise ValueError(f"freeze names unknown block {name!r}; "
                             f"have {sorted(ps.blocks)}")
        ps.blocks[name].frozen = True

    spec = LossSpec(lambda_=cfg.lambda_)
    if spec.lambda_ != 0.0 and ps.recon_decoder is None:
        raise ValueError("lambda > 0 requires a reconstruction decoder")
    if grad_fn is None:
        def grad_fn(ps_, batch, spec_, rng_):
            return backward(ps_, batch, spec_, zo_cfg, rng_)

    lr_by_block = {name: cfg.lr_for(name) for name in ps.blocks}
    opt = make_optimizer(cfg.optimizer, ps.blocks, lr_by_block)
    root = Rng(cfg.seed, (201,))
    n = train_x.shape[0]
    metrics = RunMetrics()
    last_good = ps.snapshot()

    for epoch in range(cfg.epochs_stage2):
        t0 = time.perf_counter()
        perm = root.split(0, epoch).permutation(n)
        zoq = 0
        for lo in range(0, n, cfg.batch_size_stage2):
            idx = perm[lo:lo + cfg.batch_size_stage2]
            batch = [(train_x[j], train_y[j]) for j in idx]
            step_rng = root.split(1, epoch, lo)
            try:
                bundle = grad_fn(ps, batch, spec, step_rng)
            except BackendError as exc:
                ps.restore(last_good)
                raise DivergenceError(
                    f"{phase}: stage evaluation failed at epoch {epoch}: {exc}",
                    checkpoint=last_good, epoch=epoch) from exc
            bad = (not np.isfinite(bundle.loss)
                   or any(not np.isfinite(g).all() for g in bundle.grads.values()))
            if bad:
                ps.restore(last_good)
                raise DivergenceError(
                    f"{phase}: non-finite loss or gradient at epoch {epoch}",
                    checkpoint=last_good, epoch=epoch)
            zoq += bundle.zo_queries
            opt.step(clip(bundle, cfg.clip_norm).grads)
        if any(not np.isfinite(b.values).all() for b in ps.blocks.values()):
            ps.restore(last_good)
            raise DivergenceError(f"{phase}: parameters diverged at epoch {epoch}",
                                  checkpoint=last_good, epoch=epoch)
        last_good = ps.snapshot()
        train_rmse, test_rmse, accuracy = _epoch_eval(ps, train_x, train_y,
                                                      test_x, test_y)
        metrics.records.append(EpochRecord(
            phase=phase, epoch=epoch, train_rmse=train_rmse, test_rmse=test_rmse,
            recon_accuracy=accuracy, zo_queries=zoq,
            wall_time=time.perf_counter() - t0))
    return metrics


def exact_grad_fn(ps, batch, spec, rng) -> GradientBundle:
    """Gradient callback for the first-order oracle loop (rng unused)."""
    return backward_exact(ps, batch, spec)


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path, ps: PipelineState, *, task: str, preset: dict,
                    cfg_hash: str, stage: str) -> None:
    data = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "task": task,
        "preset": preset,
        "config_hash": cfg_hash,
        "blocks": {name: {"values": [float(v) for v in b.values],
                          "frozen": b.frozen}
                   for name, b in ps.blocks.items()},
    }
    with open(path, "w") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    version = data.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version!r} not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    for key in ("stage", "task", "preset", "config_hash", "blocks"):
        if key not in data:
            raise ValueError(f"checkpoint is missing field {key!r}")
    return data


def load_blocks_into(ps: PipelineState, ckpt: dict) -> None:
    saved = ckpt["blocks"]
    for name, block in ps.blocks.items():
        if name not in saved:
            raise ValueError(f"checkpoint has no block {name!r}")
        values = np.asarray(saved[name]["values"], dtype=np.float64)
        if values.shape != block.values.shape:
            raise ValueError(
                f"checkpoint block {name!r} has {values.shape[0]} values, "
                f"pipeline expects {block.values.shape[0]}")
        block.values[:] = values
