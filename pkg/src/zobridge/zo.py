"""Zeroth-order VJP and Jacobian estimators for opaque stages.

Two estimator kinds bridge gradients through a forward-only stage G:

* ``coordinate`` — deterministic forward differences along unit coordinates:
  v_i = <(G(x + mu e_i) - G(x)) / mu, g>. Exact on affine maps, O(mu) bias
  on smooth ones, n + 1 queries.
* ``gaussian`` — K random directions d_k ~ Normal(0, sigma^2 I), averaged as
  (1 / (K sigma^2)) sum_k <(G(x + mu d_k) - G(x)) / mu, g> d_k, which is
  unbiased for J^T g on affine maps. K + 1 queries.

Both reuse a single base evaluation G(x); callers that already have it (the
pipeline shares one middle forward per sample) pass it in and the query log
records the sharing. Directions are pre-drawn from a (seed, stream) keyed
stream and accumulated in index order, so fanning queries out over
``ZOBRIDGE_THREADS`` workers cannot change the result.
"""

from __future__ import annotations

import csv
import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from .errors import BackendError, ContractViolation
from .rng import Rng
from .stages import ParamBlock, SmoothMapStage, Stage

_KINDS = ("coordinate", "gaussian")
_MAX_REDRAWS = 3
ROUNDING_FLOOR = 1e-7


@dataclass(frozen=True)
class ZoConfig:
    """Estimator settings. The coordinate kind ignores sigma and k_samples."""

    kind: str = "coordinate"
    mu: float = 1e-3
    sigma: float = 1.0
    k_samples: int = 8
    stream_id: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if not self.mu > 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.k_samples < 1:
            raise ValueError(f"k_samples must be >= 1, got {self.k_samples}")
        if self.stream_id < 0:
            raise ValueError(f"stream_id must be nonnegative, got {self.stream_id}")


@dataclass
class ZoQueryLog:
    """Accounting for one estimator call.

    `n_queries` counts stage evaluations performed by this call: n + 1
    (coordinate) or K + 1 (gaussian) standalone, minus the base evaluation
    when the caller supplied it (`base_shared`).
    """

    n_queries: int = 0
    wall_time: float = 0.0
    input_hashes: list[str] = field(default_factory=list)
    base_shared: bool = False
    degenerate: bool = False
    redraws: int = 0


def thread_count() -> int:
    """Estimator fan-out width, from ZOBRIDGE_THREADS (default 1)."""
    raw = os.environ.get("ZOBRIDGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"ZOBRIDGE_THREADS={raw!r} is not an integer") from exc
    return max(1, n)


def _hash_input(arr: np.ndarray) -> str:
    return hashlib.blake2b(arr.tobytes(), digest_size=8).hexdigest()


def _eval_all(eval_fn, queries: list[np.ndarray], log: ZoQueryLog) -> list[np.ndarray]:
    """Evaluate queries (possibly concurrently), preserving index order."""
    for q in queries:
        log.input_hashes.append(_hash_input(q))
    log.n_queries += len(queries)
    workers = thread_count()
    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(eval_fn, queries))
    return [eval_fn(q) for q in queries]


def _zo_vjp(eval_fn, center: np.ndarray, g: np.ndarray, cfg: ZoConfig,
            rng: Rng, base: np.ndarray | None) -> tuple[np.ndarray, ZoQueryLog]:
    """Core estimator over a generic evaluation point (input or block values)."""
    t0 = time.perf_counter()
    log = ZoQueryLog()
    if base is None:
        log.input_hashes.append(_hash_input(center))
        log.n_queries += 1
        base = eval_fn(center)
    else:
        log.base_shared = True
    base = np.ascontiguousarray(base, dtype=np.float64)
    if base.shape != g.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match stage "
                         f"output shape {base.shape}")

    n = center.shape[0]
    mu = cfg.mu
    g_nonzero = bool(np.any(g != 0.0))

    if cfg.kind == "coordinate":
        queries = []
        for i in range(n):
            q = center.copy()
            q[i] += mu
            queries.append(q)
        outs = _eval_all(eval_fn, queries, log)
        est = np.empty(n)
        any_diff = False
        for i, out in enumerate(outs):
            diff = (out - base) / mu
            if np.any(diff != 0.0):
                any_diff = True
            est[i] = K.dot(np.ascontiguousarray(diff), g)
    else:
        k = cfg.k_samples
        dirs = rng.split(cfg.stream_id).normal_mat(k, n, cfg.sigma)
        queries = [np.ascontiguousarray(center + mu * dirs[j]) for j in range(k)]

        outs: list[np.ndarray | None] = [None] * k
        failed: list[int] = []
        raw = _eval_all_tolerant(eval_fn, queries, log)
        for j, r in enumerate(raw):
            if isinstance(r, BackendError):
                failed.append(j)
            else:
                outs[j] = r
        # Redraw failed samples serially, in index order, from the same stream.
        redraw_rng = rng.split(cfg.stream_id, 1)
        for j in failed:
            last_exc: BackendError | None = None
            for _ in range(_MAX_REDRAWS):
                d = redraw_rng.normal(n, cfg.sigma)
                q = np.ascontiguousarray(center + mu * d)
                log.input_hashes.append(_hash_input(q))
                log.n_queries += 1
                log.redraws += 1
                try:
                    outs[j] = eval_fn(q)
                    dirs[j] = d
                    last_exc = None
                    break
                except BackendError as exc:
                    last_exc = exc
            if last_exc is not None:
                raise BackendError(
                    f"gaussian sample {j} failed after {_MAX_REDRAWS} redraws"
                ) from last_exc

        coeffs = np.empty(k)
        any_diff = False
        for j in range(k):
            diff = (outs[j] - base) / mu
            if np.any(diff != 0.0):
                any_diff = True
            coeffs[j] = K.dot(np.ascontiguousarray(diff), g)
        est = K.mat_t_vec(dirs, coeffs) / (k * cfg.sigma * cfg.sigma)

    if g_nonzero and not any_diff:
        log.degenerate = True
    log.wall_time = time.perf_counter() - t0
    return est, log


def _eval_all_tolerant(eval_fn, queries, log):
    """Like _eval_all but captures BackendError per query (gaussian redraw path)."""
    for q in queries:
        log.input_hashes.append(_hash_input(q))
    log.n_queries += len(queries)

    def guarded(q):
        try:
            return eval_fn(q)
        except BackendError as exc:
            return exc

    workers = thread_count()
    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(guarded, queries))
    return [guarded(q) for q in queries]


def zo_vjp_input(stage: Stage, x, g, cfg: ZoConfig, rng: Rng,
                 base: np.ndarray | None = None) -> tuple[np.ndarray, ZoQueryLog]:
    """Estimate J^T g of `stage` at input x using forward queries only."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if x.shape != (stage.in_width,):
        raise ValueError(f"input shape {x.shape} != stage input width {stage.in_width}")
    if g.shape != (stage.out_width,):
        raise ValueError(f"cotangent shape {g.shape} != stage output width "
                         f"{stage.out_width}")
    return _zo_vjp(stage.forward, x, g, cfg, rng, base)


def zo_vjp_params(stage: Stage, x, block: ParamBlock, g, cfg: ZoConfig, rng: Rng,
                  base: np.ndarray | None = None) -> tuple[np.ndarray, ZoQueryLog]:
    """Estimate the gradient of <stage(x), g> with respect to one parameter block."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    owned = {b.name: b for b in stage.param_blocks}
    if owned.get(block.name) is not block:
        raise ValueError(f"block {block.name!r} does not belong to stage {stage.name!r}")
    if block.frozen:
        raise ContractViolation(f"block {block.name!r} is frozen; its gradient "
                                "is zero by contract and must not be estimated")

    def eval_at(values: np.ndarray) -> np.ndarray:
        return stage.forward_with(x, {block.name: values})

    return _zo_vjp(eval_at, block.values.copy(), g, cfg, rng, base)


def zo_jacobian(stage: Stage, x, cfg: ZoConfig, rng: Rng) -> np.ndarray:
    """Full forward-difference Jacobian estimate (coordinate kind only)."""
    if cfg.kind != "coordinate":
        raise NotImplementedError(
            "zo_jacobian supports the coordinate kind only; a rank-K gaussian "
            "sketch is not implemented")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (stage.in_width,):
        raise ValueError(f"input shape {x.shape} != stage input width {stage.in_width}")
    base = stage.forward(x)
    jac = np.empty((stage.out_width, stage.in_width))
    for i in range(stage.in_width):
        q = x.copy()
        q[i] += cfg.mu
        jac[:, i] = (stage.forward(q) - base) / cfg.mu
    return jac


# ---------------------------------------------------------------------------
# Check harness


@dataclass
class ZoCheckRow:
    kind: str
    mu: float
    sigma: float
    k: int
    point_id: int
    rel_err: float


@dataclass
class ZoCheckReport:
    rows: list[ZoCheckRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def max_err(self, kind: str, mu: float, k: int) -> float:
        errs = [r.rel_err for r in self.rows
                if r.kind == kind and r.mu == mu and r.k == k]
        return max(errs) if errs else float("nan")

    def write_csv(self, fileobj) -> None:
        writer = csv.writer(fileobj)
        writer.writerow(["kind", "mu", "sigma", "k", "point_id", "rel_err"])
        for r in self.rows:
            writer.writerow([r.kind, repr(r.mu), repr(r.sigma), r.k,
                             r.point_id, repr(r.rel_err)])


def _rel_err(est: np.ndarray, exact: np.ndarray) -> float:
    denom = float(np.linalg.norm(exact))
    return float(np.linalg.norm(est - exact)) / max(denom, 1e-300)


def zo_check(stage: Stage, jacobian_fn, points, *, mus, kinds=("coordinate",),
             k_values=(512, 1024), sigma: float = 1.0, seed: int = 0,
             n_mc_seeds: int = 20, linear: bool = False,
             slope_band: tuple[float, float] = (0.6, 1.4)) -> ZoCheckReport:
    """Sweep estimator settings against an analytic-Jacobian oracle.

    Asserts (as report failures, not exceptions):
    * linear maps: coordinate error <= 1e-9 at every mu;
    * smooth maps: the coordinate error is first order in mu —
      for consecutive sweep values the max-error ratio must fall within
      `slope_band` scaled by the mu ratio, until errors hit the rounding
      floor (1e-7);
    * gaussian kind: doubling K shrinks the error by a factor in
      [0.55, 0.9] (median over `n_mc_seeds` seeds), checked for each
      consecutive K pair with K >= 2.
    """
    report = ZoCheckReport()
    mus = sorted(float(m) for m in mus)[::-1]
    points = [np.ascontiguousarray(p, dtype=np.float64) for p in points]
    root = Rng(seed)
    cotangents = [root.split(7, i).normal(stage.out_width) for i in range(len(points))]
    exacts = [K.mat_t_vec(np.ascontiguousarray(jacobian_fn(p), dtype=np.float64), g)
              for p, g in zip(points, cotangents)]

    if "coordinate" in kinds:
        for mu in mus:
            cfg = ZoConfig(kind="coordinate", mu=mu)
            for pid, (p, g, exact) in enumerate(zip(points, cotangents, exacts)):
                est, _ = zo_vjp_input(stage, p, g, cfg, root.split(11, pid))
                report.rows.append(ZoCheckRow("coordinate", mu, 0.0, 0, pid,
                                              _rel_err(est, exact)))
        if linear:
            for mu in mus:
                worst = report.max_err("coordinate", mu, 0)
                if worst > 1e-9:
                    report.failures.append(
                        f"coordinate mu={mu:g}: rel_err {worst:.3e} on a linear map "
                        "(expected <= 1e-9)")
        else:
            for mu_a, mu_b in zip(mus, mus[1:]):
                err_a = report.max_err("coordinate", mu_a, 0)
                err_b = report.max_err("coordinate", mu_b, 0)
                if err_b < ROUNDING_FLOOR:
                    report.notes.append(
                        f"slope check skipped at mu={mu_b:g}: error "
                        f"{err_b:.3e} is below the rounding floor")
                    continue
                scale = mu_b / mu_a
                lo, hi = slope_band[0] * scale, slope_band[1] * scale
                ratio = err_b / err_a
                if not (lo <= ratio <= hi):
                    report.failures.append(
                        f"coordinate slope: err({mu_b:g})/err({mu_a:g}) = {ratio:.3f} "
                        f"outside [{lo:.3f}, {hi:.3f}]")

    if "gaussian" in kinds:
        ks = sorted(int(k) for k in k_values)
        mu = mus[-1]
        point, g, exact = points[0], cotangents[0], exacts[0]
        errs_by_k: dict[int, list[float]] = {k: [] for k in ks}
        for k in ks:
            for s in range(n_mc_seeds):
                cfg = ZoConfig(kind="gaussian", mu=mu, sigma=sigma, k_samples=k,
                               stream_id=s)
                est, _ = zo_vjp_input(stage, point, g, cfg, Rng(seed).split(13, s))
                err = _rel_err(est, exact)
                errs_by_k[k].append(err)
                report.rows.append(ZoCheckRow("gaussian", mu, sigma, k, s, err))
        for k_a, k_b in zip(ks, ks[1:]):
            if k_a < 2:
                report.notes.append(
                    f"gaussian trend skipped for K={k_a}->{k_b}: K too small")
                continue
            ratios = sorted(e_b / max(e_a, 1e-300)
                            for e_a, e_b in zip(errs_by_k[k_a], errs_by_k[k_b]))
            median = ratios[len(ratios) // 2]
            if not (0.55 <= median <= 0.9):
                report.failures.append(
                    f"gaussian K={k_a}->{k_b}: median error ratio {median:.3f} "
                    "outside [0.55, 0.9]")
    return report


def builtin_check_suite(seed: int = 0) -> list[dict]:
    """Built-in oracles for the check harness and the CLI.

    Returns dicts with keys: name, stage, jacobian_fn, linear, points.
    """
    root = Rng(seed)
    a = np.array([[1.0, 2.0], [3.0, 4.0], [-0.5, 1.5]])
    b = np.array([0.3, -0.2, 0.1])

    affine_stage = SmoothMapStage(lambda x: K.matvec(a, x) + b,
                                  lambda x: a, 2, 3, name="affine_oracle")

    def quad(x):
        return np.array([x[0] * x[0], x[0] * x[1], np.sin(x[1])])

    def quad_jac(x):
        return np.array([[2.0 * x[0], 0.0],
                         [x[1], x[0]],
                         [0.0, np.cos(x[1])]])

    quad_stage = SmoothMapStage(quad, quad_jac, 2, 3, name="quadratic_oracle")

    return [
        {"name": "affine", "stage": affine_stage, "jacobian_fn": lambda x: a,
         "linear": True,
         "points": [root.split(1, i).normal(2) for i in range(8)]},
        {"name": "quadratic", "stage": quad_stage, "jacobian_fn": quad_jac,
         "linear": False,
         "points": [root.split(2, i).normal(2) for i in range(8)]},
    ]
