"""Pipeline stage abstractions.

A `Stage` is a forward-evaluable node with declared input/output widths and
spaces (continuous or discrete). `DifferentiableStage` adds exact reverse-mode
VJPs with respect to the input and to each parameter block. Anything else is
opaque by capability: forward only, bridged by the estimators in `zo`.

Parameter blocks are flat float64 vectors so that zeroth-order perturbation
of a block is a plain vector operation.
"""

from __future__ import annotations

import numpy as np

from . import backend as K
from .errors import BackendError, ContractViolation
from .rng import Rng

CONTINUOUS = "continuous"
DISCRETE = "discrete"

_ACT_CODES = {"identity": 0, "tanh": 1}


class ParamBlock:
    """Named flat parameter vector. Frozen blocks receive zero updates."""

    def __init__(self, name: str, values, frozen: bool = False):
        self.name = str(name)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"block {name!r}: values must be a flat vector")
        if not np.isfinite(self.values).all():
            raise ValueError(f"block {name!r}: non-finite values")
        self.frozen = bool(frozen)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamBlock({self.name!r}, size={self.size}, frozen={self.frozen})"


class Stage:
    """Forward-evaluable pipeline node.

    Subclasses implement `_forward(x, values)` where `values` carries the
    current (or overridden) parameter block vectors in `param_blocks` order.
    """

    in_width: int
    out_width: int
    in_space: str = CONTINUOUS
    out_space: str = CONTINUOUS
    name: str = ""

    @property
    def param_blocks(self) -> tuple[ParamBlock, ...]:
        return ()

    @property
    def is_differentiable(self) -> bool:
        return False

    def _forward(self, x: np.ndarray, values: tuple[np.ndarray, ...]) -> np.ndarray:
        raise NotImplementedError

    def _check_input(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.in_width:
            raise ValueError(
                f"stage {self.name!r}: expected input of width {self.in_width}, "
                f"got shape {x.shape}")
        return x

    def _check_output(self, out) -> np.ndarray:
        out = np.ascontiguousarray(out, dtype=np.float64)
        if out.ndim != 1 or out.shape[0] != self.out_width:
            raise BackendError(
                f"stage {self.name!r}: backing returned shape {out.shape}, "
                f"expected width {self.out_width}")
        if not np.isfinite(out).all():
            raise BackendError(f"stage {self.name!r}: non-finite output")
        return out

    def _values(self, overrides: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, ...]:
        blocks = self.param_blocks
        if not blocks:
            return ()
        if not overrides:
            return tuple(b.values for b in blocks)
        return tuple(overrides.get(b.name, b.values) for b in blocks)

    def forward(self, x) -> np.ndarray:
        return self._check_output(self._forward(self._check_input(x), self._values()))

    def forward_with(self, x, overrides: dict[str, np.ndarray]) -> np.ndarray:
        """Forward pass with some blocks substituted, without mutating state.

        Override names not owned by this stage are ignored (composites route
        one dict through all inner stages)."""
        return self._check_output(
            self._forward(self._check_input(x), self._values(overrides)))

    # Exact VJPs exist only on differentiable stages.
    def vjp_input(self, x, g) -> np.ndarray:
        raise ContractViolation(
            f"stage {self.name!r} is opaque (forward-only); gradients through it "
            "must come from the zo estimators")

    def vjp_params(self, x, g) -> dict[str, np.ndarray]:
        raise ContractViolation(
            f"stage {self.name!r} is opaque (forward-only); gradients through it "
            "must come from the zo estimators")

    def __repr__(self) -> str:
        return (f"{type(self).__name__}({self.name!r}, {self.in_width}->"
                f"{self.out_width})")


class DifferentiableStage(Stage):
    """Stage with exact reverse-mode VJPs; spaces are always continuous."""

    @property
    def is_differentiable(self) -> bool:
        return True

    def vjp(self, x, g) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """One reverse pass returning (input cotangent, per-block gradients)."""
        raise NotImplementedError

    def vjp_input(self, x, g) -> np.ndarray:
        return self.vjp(x, g)[0]

    def vjp_params(self, x, g) -> dict[str, np.ndarray]:
        return self.vjp(x, g)[1]

    def _check_cotangent(self, g) -> np.ndarray:
        g = np.ascontiguousarray(g, dtype=np.float64)
        if g.ndim != 1 or g.shape[0] != self.out_width:
            raise ValueError(
                f"stage {self.name!r}: cotangent must match output width "
                f"{self.out_width}, got shape {g.shape}")
        return g


class MlpStage(DifferentiableStage):
    """Fully-connected stack. Activations are limited to tanh and identity.

    Layout of the flat parameter vector, per layer: row-major weight matrix
    (out x in), then bias. Initialization: W ~ Normal(0, 1/fan_in), b = 0.
    """

    def __init__(self, widths, activations=None, *, block_name: str = "theta",
                 rng: Rng | None = None, values=None, frozen: bool = False,
                 name: str | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be >= 2 positive entries, got {widths}")
        n_layers = len(widths) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ValueError(f"need {n_layers} activations, got {len(activations)}")
        for a in activations:
            if a not in _ACT_CODES:
                raise ValueError(f"unsupported activation {a!r}; use tanh or identity")

        self._widths = np.asarray(widths, dtype=np.int64)
        self._acts = np.asarray([_ACT_CODES[a] for a in activations], dtype=np.int64)
        self.activations = tuple(activations)
        self.in_width = widths[0]
        self.out_width = widths[-1]
        self.name = name if name is not None else block_name

        n_params = sum(widths[i + 1] * widths[i] + widths[i + 1]
                       for i in range(n_layers))
        if values is None:
            if rng is None:
                raise ValueError("pass either initial values or an rng")
            values = np.zeros(n_params)
            off = 0
            for i in range(n_layers):
                ni, no = widths[i], widths[i + 1]
                values[off:off + no * ni] = rng.normal(no * ni, 1.0 / np.sqrt(ni))
                off += no * ni + no  # biases stay zero
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (n_params,):
            raise ValueError(f"expected {n_params} parameters, got {values.shape}")
        self._block = ParamBlock(block_name, values, frozen=frozen)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._widths)

    @property
    def block(self) -> ParamBlock:
        return self._block

    @property
    def param_blocks(self) -> tuple[ParamBlock, ...]:
        return (self._block,)

    def _forward(self, x, values):
        return K.mlp_forward(self._widths, self._acts, values[0], x)

    def vjp(self, x, g):
        x = self._check_input(x)
        g = self._check_cotangent(g)
        gx, gtheta = K.mlp_vjp(self._widths, self._acts, self._block.values, x, g)
        return gx, {self._block.name: gtheta}


class TanhStage(DifferentiableStage):
    """Elementwise tanh; no parameters."""

    def __init__(self, width: int, name: str = "tanh"):
        self.in_width = self.out_width = int(width)
        self.name = name

    def _forward(self, x, values):
        return np.tanh(x)

    def vjp(self, x, g):
        x = self._check_input(x)
        g = self._check_cotangent(g)
        t = np.tanh(x)
        return g * (1.0 - t * t), {}


class IdentityStage(DifferentiableStage):
    """Pass-through; no parameters."""

    def __init__(self, width: int, name: str = "identity"):
        self.in_width = self.out_width = int(width)
        self.name = name

    def _forward(self, x, values):
        return x

    def vjp(self, x, g):
        self._check_input(x)
        return self._check_cotangent(g).copy(), {}


class SmoothMapStage(DifferentiableStage):
    """Fixed smooth map with a supplied analytic Jacobian; no parameters.

    Used for oracle twins of opaque maps: the same forward function can be
    registered both here and in an OpaqueStage, so the two evaluate
    bit-identically while only this one exposes exact VJPs.
    """

    def __init__(self, fn, jacobian_fn, in_width: int, out_width: int,
                 name: str = "smooth_map"):
        self._fn = fn
        self._jacobian_fn = jacobian_fn
        self.in_width = int(in_width)
        self.out_width = int(out_width)
        self.name = name

    def _forward(self, x, values):
        return self._fn(x)

    def jacobian(self, x) -> np.ndarray:
        j = np.ascontiguousarray(self._jacobian_fn(self._check_input(x)),
                                 dtype=np.float64)
        if j.shape != (self.out_width, self.in_width):
            raise ValueError(f"jacobian shape {j.shape} != "
                             f"({self.out_width}, {self.in_width})")
        return j

    def vjp(self, x, g):
        g = self._check_cotangent(g)
        return K.mat_t_vec(self.jacobian(x), g), {}


class ThresholdStage(Stage):
    """Hard 0/1 discretizer at a cut value. Output space is discrete."""

    out_space = DISCRETE

    def __init__(self, width: int, threshold: float = 0.5, name: str = "threshold"):
        self.in_width = self.out_width = int(width)
        self.threshold = float(threshold)
        self.name = name

    def _forward(self, x, values):
        return K.threshold_bits(x, self.threshold)


class OpaqueStage(Stage):
    """Black-box stage backed by an in-process callable.

    The callable receives (x, *block_values) and must be pure: equal inputs
    and equal parameter values produce equal outputs. Failures and non-finite
    outputs surface as BackendError.
    """

    def __init__(self, fn, in_width: int, out_width: int, *, blocks=(),
                 in_space: str = CONTINUOUS, out_space: str = CONTINUOUS,
                 name: str = "opaque"):
        self._fn = fn
        self.in_width = int(in_width)
        self.out_width = int(out_width)
        self.in_space = in_space
        self.out_space = out_space
        self.name = name
        self._blocks = tuple(blocks)
        names = [b.name for b in self._blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {name!r}: {names}")

    @property
    def param_blocks(self) -> tuple[ParamBlock, ...]:
        return self._blocks

    def _forward(self, x, values):
        try:
            return self._fn(x, *values)
        except Exception as exc:
            if isinstance(exc, BackendError):
                raise
            raise BackendError(f"stage {self.name!r}: backing raised {exc!r}") from exc


class CompositeStage(Stage):
    """Ordered chain of inner stages.

    When flagged opaque the composite exposes forward evaluation only,
    regardless of inner differentiability; this is how a discretizing step
    is hidden between continuous boundaries. A non-opaque composite of
    differentiable stages chains their VJPs.
    """

    def __init__(self, stages, *, opaque: bool = False, name: str = "composite"):
        stages = tuple(stages)
        if not stages:
            raise ValueError("composite needs at least one inner stage")
        for a, b in zip(stages, stages[1:]):
            if a.out_width != b.in_width:
                raise ValueError(
                    f"composite {name!r}: boundary width mismatch "
                    f"{a.name!r} out={a.out_width} -> {b.name!r} in={b.in_width}")
        self.stages = stages
        self.opaque = bool(opaque)
        self.name = name
        self.in_width = stages[0].in_width
        self.out_width = stages[-1].out_width
        self.in_space = stages[0].in_space
        self.out_space = stages[-1].out_space
        names: list[str] = []
        for s in stages:
            names.extend(b.name for b in s.param_blocks)
        if len(set(names)) != len(names):
            raise ValueError(f"composite {name!r}: duplicate block names {names}")
        # Flattened leaf chain for the hot forward path (estimator sweeps).
        leaves: list[Stage] = []
        for s in stages:
            leaves.extend(s._leaves if isinstance(s, CompositeStage) else (s,))
        self._leaves = tuple(leaves)

    @property
    def param_blocks(self) -> tuple[ParamBlock, ...]:
        out: list[ParamBlock] = []
        for s in self.stages:
            out.extend(s.param_blocks)
        return tuple(out)

    @property
    def is_differentiable(self) -> bool:
        return (not self.opaque) and all(s.is_differentiable for s in self.stages)

    def forward(self, x) -> np.ndarray:
        return self.forward_with(x, {})

    def forward_with(self, x, overrides) -> np.ndarray:
        # Hot path: estimator sweeps evaluate this thousands of times per
        # step. Boundary widths are fixed at construction, so per-hop
        # validation reduces to a width guard plus array coercion; the full
        # finiteness check runs once on the composite output.
        a = self._check_input(x)
        for s in self._leaves:
            a = s._forward(a, s._values(overrides))
            if (type(a) is not np.ndarray or a.dtype != np.float64
                    or not a.flags.c_contiguous):
                a = np.ascontiguousarray(a, dtype=np.float64)
            if a.ndim != 1 or a.shape[0] != s.out_width:
                raise BackendError(
                    f"stage {s.name!r} returned shape {a.shape}, expected "
                    f"width {s.out_width}")
        return self._check_output(a)

    def vjp(self, x, g):
        if not self.is_differentiable:
            raise ContractViolation(
                f"composite {self.name!r} is opaque (forward-only); gradients "
                "through it must come from the zo estimators")
        xs = [self._check_input(x)]
        for s in self.stages:
            xs.append(s.forward(xs[-1]))
        grads: dict[str, np.ndarray] = {}
        cot = np.ascontiguousarray(g, dtype=np.float64)
        for s, xin in zip(reversed(self.stages), reversed(xs[:-1])):
            cot, gblocks = s.vjp(xin, cot)
            grads.update(gblocks)
        return cot, grads

    def vjp_input(self, x, g):
        return self.vjp(x, g)[0]

    def vjp_params(self, x, g):
        return self.vjp(x, g)[1]


def make_reparameterized_middle(decoder: Stage, featurizer: Stage,
                                predictor_front: Stage,
                                name: str = "middle") -> CompositeStage:
    """Fuse decoder, featurizer and predictor front into one opaque block.

    The fused block takes the latent code and returns the predictor readout,
    so both of its boundaries are continuous vectors even when the featurizer
    consumes discrete objects internally. Parameter blocks of the decoder and
    the predictor front ride along and stay individually freezable.
    """
    if decoder.in_space != CONTINUOUS:
        raise ValueError("reparameterized middle must consume a continuous latent code")
    if featurizer.out_space != CONTINUOUS:
        raise ValueError("featurizer must emit a continuous feature vector")
    if predictor_front.out_space != CONTINUOUS:
        raise ValueError("predictor front must emit a continuous readout vector")
    return CompositeStage([decoder, featurizer, predictor_front],
                          opaque=True, name=name)
