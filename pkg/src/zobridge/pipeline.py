"""Three-component pipeline assembly: joint loss and the hybrid gradient.

The pipeline is encoder -> opaque middle -> tail, with an optional
reconstruction decoder sharing the encoder (and the middle's decoder block).
The joint objective is

    L = L_pred + lambda * L_recon,
    L_pred  = (1/N) sum_i ||yhat_i - y_i||^2,
    L_recon = (1/N) sum_i ||decode(encode(x_i)) - x_i||^2,

where the reconstruction path runs on pre-discretization decoder outputs so
its gradient is exact. `backward` produces the hybrid gradient: exact VJPs
through encoder and tail, zeroth-order VJPs through the middle, plus the
exact reconstruction gradient added onto the shared blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .rng import Rng
from .stages import (CONTINUOUS, DifferentiableStage, ParamBlock, Stage)
from .zo import ZoConfig, zo_vjp_input, zo_vjp_params


@dataclass(frozen=True)
class LossSpec:
    """Objective weights. lambda_ scales the reconstruction regularizer."""

    lambda_: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lambda_) or self.lambda_ < 0.0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lambda_}")


@dataclass
class GradientBundle:
    """Per-block gradients plus loss values and query accounting for one batch."""

    grads: dict[str, np.ndarray]
    loss: float
    loss_pred: float
    loss_recon: float
    zo_queries: int = 0
    warnings: list[str] = field(default_factory=list)

    def block_names(self) -> tuple[str, ...]:
        return tuple(self.grads.keys())


class PipelineState:
    """Encoder (block u) -> opaque middle (blocks v, w1) -> tail (block w2).

    `recon_decoder`, when present, must be the same differentiable decoder
    object that sits inside the middle, so the reconstruction path and the
    prediction path share the block `v`.
    """

    def __init__(self, encoder: DifferentiableStage, middle: Stage,
                 tail: DifferentiableStage,
                 recon_decoder: DifferentiableStage | None = None):
        if encoder.out_width != middle.in_width:
            raise ValueError(f"encoder out {encoder.out_width} != middle in "
                             f"{middle.in_width}")
        if middle.out_width != tail.in_width:
            raise ValueError(f"middle out {middle.out_width} != tail in "
                             f"{tail.in_width}")
        if recon_decoder is not None:
            if recon_decoder.in_width != encoder.out_width:
                raise ValueError("reconstruction decoder must consume the latent code")
            if recon_decoder.out_width != encoder.in_width:
                raise ValueError("reconstruction path must produce encoder-input "
                                 "width logits")
        self.encoder = encoder
        self.middle = middle
        self.tail = tail
        self.recon_decoder = recon_decoder

        blocks: dict[str, ParamBlock] = {}
        for stage in (encoder, middle, tail):
            for b in stage.param_blocks:
                if b.name in blocks and blocks[b.name] is not b:
                    raise ValueError(f"two distinct blocks named {b.name!r}")
                blocks[b.name] = b
        if recon_decoder is not None:
            for b in recon_decoder.param_blocks:
                if b.name in blocks and blocks[b.name] is not b:
                    raise ValueError(
                        f"reconstruction decoder block {b.name!r} must be shared "
                        "with the middle, not a copy")
                blocks.setdefault(b.name, b)
        self.blocks = blocks

    @property
    def in_width(self) -> int:
        return self.encoder.in_width

    @property
    def out_width(self) -> int:
        return self.tail.out_width

    def chain(self) -> tuple[Stage, ...]:
        return (self.encoder, self.middle, self.tail)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: b.values.copy() for name, b in self.blocks.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, values in snap.items():
            self.blocks[name].values[:] = values


def validate_boundaries(obj) -> list[str]:
    """Check a stage chain (or a PipelineState) for ill-posed boundaries.

    Returns diagnostics; an empty list means the pipeline is accepted. Any
    opaque (non-differentiable) stage sitting in the chain with a discrete
    input or output space is rejected: finite differences of the form
    G(x + mu d) - G(x) have no meaning on discrete objects. The remedy is to
    move the discretizing step inside an opaque composite so both of its
    boundaries are continuous vectors.
    """
    if isinstance(obj, PipelineState):
        stages = list(obj.chain())
    else:
        stages = list(obj)
    diags: list[str] = []
    if not stages:
        return ["empty pipeline: nothing to validate"]
    for a, b in zip(stages, stages[1:]):
        if a.out_width != b.in_width:
            diags.append(f"width mismatch at boundary {a.name!r} -> {b.name!r}: "
                         f"{a.out_width} != {b.in_width}")
    for s in stages:
        if s.is_differentiable:
            continue
        for side, space in (("input", s.in_space), ("output", s.out_space)):
            if space != CONTINUOUS:
                diags.append(
                    f"opaque stage {s.name!r} has a discrete {side}: perturbations "
                    "G(x + mu d) - G(x) are undefined there; move the discretizing "
                    "step inside an opaque composite so both boundaries are "
                    "continuous vectors")
    return diags


def forward_predict(ps: PipelineState, x) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Full prediction pass; the cache holds the stage-boundary activations."""
    z = ps.encoder.forward(x)
    h = ps.middle.forward(z)
    y_hat = ps.tail.forward(h)
    return y_hat, {"z": z, "h": h, "y_hat": y_hat}


def _as_batch(batch) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = [(np.ascontiguousarray(x, dtype=np.float64),
              np.ascontiguousarray(y, dtype=np.float64)) for x, y in batch]
    if not pairs:
        raise ValueError("batch must be nonempty")
    return pairs


def batch_loss(ps: PipelineState, batch, spec: LossSpec) -> tuple[float, float, float]:
    """Returns (L, L_pred, L_recon) averaged over the batch."""
    pairs = _as_batch(batch)
    n = len(pairs)
    pred = 0.0
    recon = 0.0
    if spec.lambda_ != 0.0 and ps.recon_decoder is None:
        raise ValueError("lambda > 0 requires a reconstruction decoder")
    for x, y in pairs:
        y_hat, cache = forward_predict(ps, x)
        r = y_hat - y
        pred += float(r @ r)
        if ps.recon_decoder is not None:
            p = ps.recon_decoder.forward(cache["z"])
            e = p - x
            recon += float(e @ e)
    pred /= n
    recon /= n
    return pred + spec.lambda_ * recon, pred, recon


def reconstruction_gradients(ps: PipelineState, batch) -> tuple[dict[str, np.ndarray], float]:
    """Exact gradients of the batch-mean reconstruction loss on blocks u, v.

    Runs on pre-discretization decoder outputs; returns (grads, L_recon).
    """
    if ps.recon_decoder is None:
        raise ValueError("pipeline has no reconstruction decoder")
    pairs = _as_batch(batch)
    n = len(pairs)
    acc = {name: np.zeros(b.size) for name, b in ps.blocks.items()}
    total = 0.0
    for x, _ in pairs:
        z = ps.encoder.forward(x)
        p = ps.recon_decoder.forward(z)
        e = p - x
        total += float(e @ e)
        gz, gdec = ps.recon_decoder.vjp(z, 2.0 * e)
        for bname, gb in gdec.items():
            acc[bname] += gb
        _, genc = ps.encoder.vjp(x, gz)
        for bname, gb in genc.items():
            acc[bname] += gb
    for name in acc:
        acc[name] /= n
    return acc, total / n


def backward(ps: PipelineState, batch, spec: LossSpec, zo_cfg: ZoConfig,
             rng: Rng) -> GradientBundle:
    """Hybrid end-to-end gradient of the joint loss over one batch.

    Per sample: one exact tail VJP produces the middle-output cotangent and
    the w2 gradient; zeroth-order estimation propagates that cotangent to the
    latent code and to the middle's unfrozen blocks, reusing the prediction
    forward as the shared base evaluation; an exact encoder VJP maps the
    latent cotangent onto u. The exact reconstruction gradient (scaled by
    lambda) is computed independently and added blockwise. A zero cotangent
    short-circuits all zeroth-order queries for that sample.
    """
    pairs = _as_batch(batch)
    n = len(pairs)
    acc = {name: np.zeros(b.size) for name, b in ps.blocks.items()}
    warnings: list[str] = []
    queries = 0
    pred_total = 0.0

    middle_blocks = ps.middle.param_blocks
    for i, (x, y) in enumerate(pairs):
        z = ps.encoder.forward(x)
        h = ps.middle.forward(z)
        y_hat = ps.tail.forward(h)
        r = y_hat - y
        pred_total += float(r @ r)

        g_y = 2.0 * r
        g_h, g_tail = ps.tail.vjp(h, g_y)
        for bname, gb in g_tail.items():
            acc[bname] += gb

        if not np.any(g_h != 0.0):
            continue  # zero cotangent: no zeroth-order queries for this sample

        sample_rng = rng.split(i)
        queries += 1  # the shared base evaluation (the prediction forward)
        g_z, log_in = zo_vjp_input(ps.middle, z, g_h, zo_cfg, sample_rng, base=h)
        queries += log_in.n_queries
        if log_in.degenerate:
            warnings.append(f"sample {i}: degenerate input step (all forward "
                            "differences are exactly zero with a nonzero cotangent)")
        for block in middle_blocks:
            if block.frozen:
                continue
            g_b, log_p = zo_vjp_params(ps.middle, z, block, g_h, zo_cfg,
                                       sample_rng, base=h)
            queries += log_p.n_queries
            if log_p.degenerate:
                warnings.append(f"sample {i}: degenerate step for block "
                                f"{block.name!r}")
            acc[block.name] += g_b
        _, g_enc = ps.encoder.vjp(x, g_z)
        for bname, gb in g_enc.items():
            acc[bname] += gb

    for name in acc:
        acc[name] /= n
    pred_total /= n

    recon_total = 0.0
    if spec.lambda_ != 0.0:
        recon_grads, recon_total = reconstruction_gradients(ps, pairs)
        for name, gb in recon_grads.items():
            acc[name] += spec.lambda_ * gb
    elif ps.recon_decoder is not None:
        _, _, recon_total = _recon_loss_only(ps, pairs)

    for name, block in ps.blocks.items():
        if block.frozen:
            acc[name] = np.zeros(block.size)

    return GradientBundle(grads=acc,
                          loss=pred_total + spec.lambda_ * recon_total,
                          loss_pred=pred_total, loss_recon=recon_total,
                          zo_queries=queries, warnings=warnings)


def _recon_loss_only(ps: PipelineState, pairs):
    total = 0.0
    for x, _ in pairs:
        p = ps.recon_decoder.forward(ps.encoder.forward(x))
        e = p - x
        total += float(e @ e)
    return None, None, total / len(pairs)


def backward_exact(ps: PipelineState, batch, spec: LossSpec) -> GradientBundle:
    """Exact end-to-end gradient; requires a differentiable middle.

    This is the oracle path: identical structure to `backward` with the
    zeroth-order estimates replaced by the middle's exact VJPs.
    """
    if not ps.middle.is_differentiable:
        raise ContractViolation(
            f"middle {ps.middle.name!r} is opaque; exact backward needs the "
            "differentiable oracle twin")
    pairs = _as_batch(batch)
    n = len(pairs)
    acc = {name: np.zeros(b.size) for name, b in ps.blocks.items()}
    pred_total = 0.0
    for x, y in pairs:
        z = ps.encoder.forward(x)
        h = ps.middle.forward(z)
        y_hat = ps.tail.forward(h)
        r = y_hat - y
        pred_total += float(r @ r)
        g_h, g_tail = ps.tail.vjp(h, 2.0 * r)
        for bname, gb in g_tail.items():
            acc[bname] += gb
        g_z, g_mid = ps.middle.vjp(z, g_h)
        for bname, gb in g_mid.items():
            acc[bname] += gb
        _, g_enc = ps.encoder.vjp(x, g_z)
        for bname, gb in g_enc.items():
            acc[bname] += gb
    for name in acc:
        acc[name] /= n
    pred_total /= n

    recon_total = 0.0
    if spec.lambda_ != 0.0:
        recon_grads, recon_total = reconstruction_gradients(ps, pairs)
        for name, gb in recon_grads.items():
            acc[name] += spec.lambda_ * gb

    for name, block in ps.blocks.items():
        if block.frozen:
            acc[name] = np.zeros(block.size)
    return GradientBundle(grads=acc, loss=pred_total + spec.lambda_ * recon_total,
                          loss_pred=pred_total, loss_recon=recon_total,
                          zo_queries=0)
