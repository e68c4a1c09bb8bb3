"""Problem specification, validation, and the coefficient-function contract.

The controlled state is one-dimensional with three observables fed to every
coefficient: the current value X(t), the lagged value Y(t) = X(t - delta),
and the exponentially weighted moving average
A(t) = int_{t-delta}^{t} e^{-rho (t-r)} X(r) dr.

Coefficient callbacks b, sigma, f have signature (t, x, y, a, u) and the
jump amplitude theta has signature (t, x, y, a, u, z).  All callbacks must
accept numpy arrays for the state/control arguments and broadcast
elementwise; they must be pure (no hidden mutable state) so problem
specifications can be shared across concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    BadInterval,
    ConfigError,
    GridMismatch,
    NonFiniteSegment,
)

STATE_VARS = ("x", "y", "a", "u")

# Central finite differences for missing partials; step scales with the
# argument magnitude but never drops below 1e-6.
_FD_BASE = 1e-6


def _fd_step(v):
    return _FD_BASE * np.maximum(1.0, np.abs(v))


def finite_difference_partial(fn: Callable, var: str) -> Callable:
    """Central-difference partial of ``fn(t, x, y, a, u, *rest)`` in one of
    the state/control slots.  Second-order accurate, step h = max(1e-6,
    1e-6 |v|)."""
    idx = 1 + STATE_VARS.index(var)

    def deriv(t, x, y, a, u, *rest):
        args = [t, np.asarray(x, float), np.asarray(y, float),
                np.asarray(a, float), np.asarray(u, float)]
        h = _fd_step(args[idx])
        hi = list(args)
        lo = list(args)
        hi[idx] = args[idx] + h
        lo[idx] = args[idx] - h
        return (fn(*hi, *rest) - fn(*lo, *rest)) / (2.0 * h)

    deriv.__name__ = f"fd_d{var}"
    return deriv


# ---------------------------------------------------------------------------
# Jump model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteMarks:
    """Finitely supported mark distribution; zero mass at z = 0."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, float))
        probs = np.atleast_1d(np.asarray(self.probs, float))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)
        if values.shape != probs.shape:
            raise ConfigError("mark values and probs must have equal length")
        if np.any(values == 0.0):
            raise ConfigError("mark distribution must not charge z = 0")
        if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, rel_tol=1e-10):
            raise ConfigError("mark probabilities must be nonnegative and sum to 1")

    def expectation(self, g: Callable):
        """E[g(Z)]; g(z) may return per-path arrays, summed with weights."""
        total = None
        for z, p in zip(self.values, self.probs):
            term = p * np.asarray(g(z), float)
            total = term if total is None else total + term
        return total

    def moments(self):
        m1 = float(np.sum(self.probs * self.values))
        m2 = float(np.sum(self.probs * self.values**2))
        return m1, m2


@dataclass(frozen=True)
class ContinuousMarks:
    """Mark density on [low, high] integrated with 64-point Gauss-Legendre."""

    density: Callable[[float], float]
    low: float
    high: float
    sampler: Optional[Callable] = None  # sampler(rng, size) -> marks

    def _nodes(self):
        x, w = np.polynomial.legendre.leggauss(64)
        mid = 0.5 * (self.high + self.low)
        half = 0.5 * (self.high - self.low)
        return mid + half * x, half * w

    def expectation(self, g: Callable):
        z, w = self._nodes()
        total = None
        for zi, wi in zip(z, w):
            term = wi * self.density(zi) * np.asarray(g(zi), float)
            total = term if total is None else total + term
        return total

    def moments(self):
        m1 = float(self.expectation(lambda z: z))
        m2 = float(self.expectation(lambda z: z * z))
        return m1, m2


@dataclass(frozen=True)
class JumpModel:
    """Compound-Poisson jump component: intensity times a mark law nu(dz).

    Every integral against nu reduces to ``intensity * E[...]`` over the
    mark distribution, exact for discrete marks and 64-point quadrature
    otherwise.
    """

    intensity: float
    marks: DiscreteMarks | ContinuousMarks
    mark_moments: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.intensity < 0:
            raise ConfigError("jump intensity must be nonnegative")
        moments = self.mark_moments or self.marks.moments()
        if not all(math.isfinite(m) for m in moments):
            raise ConfigError("mark moments must be finite")
        object.__setattr__(self, "mark_moments", tuple(moments))

    def mark_expectation(self, g: Callable):
        return self.marks.expectation(g)

    def nu_integral(self, g: Callable):
        """int g(z) nu(dz) = intensity * E[g(Z)]."""
        return self.intensity * self.marks.expectation(g)

    @property
    def n_marks(self) -> int:
        if isinstance(self.marks, DiscreteMarks):
            return len(self.marks.values)
        return 0


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------

_GRID_RTOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with the delay aligned exactly: delta = m * dt."""

    dt: float
    horizon: float
    m: int
    n: int

    @property
    def delta(self) -> float:
        return self.m * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def history_times(self) -> np.ndarray:
        """Grid points of the initial segment [-delta, 0]."""
        return np.arange(-self.m, 1) * self.dt


def _snap_count(total: float, dt: float, what: str) -> int:
    k = int(round(total / dt))
    if k < 1 or abs(total - k * dt) > _GRID_RTOL * abs(total):
        raise GridMismatch(
            f"{what}={total!r} is not an integer multiple of dt={dt!r} "
            f"(relative error exceeds {_GRID_RTOL})"
        )
    return k


def make_grid(delta: float, dt: float, horizon: float) -> TimeGrid:
    """Validate delta = m*dt and horizon = n*dt (relative tolerance 1e-12),
    snap, and return the grid.  Requires horizon >= delta."""
    if dt <= 0:
        raise GridMismatch("dt must be positive")
    m = _snap_count(delta, dt, "delta")
    n = _snap_count(horizon, dt, "horizon")
    if n < m:
        raise GridMismatch(f"horizon {horizon} shorter than delay {delta}")
    return TimeGrid(dt=dt, horizon=n * dt, m=m, n=n)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """Drift b, diffusion sigma, jump amplitude theta, running reward f,
    with first partials in (x, y, a, u).

    ``partials`` maps coefficient name -> var -> callable with the same
    signature as the coefficient itself.  Missing entries fall back to
    central finite differences.
    """

    b: Callable
    sigma: Callable
    theta: Optional[Callable]
    f: Callable
    partials: dict = field(default_factory=dict)

    def fn(self, name: str) -> Callable:
        return getattr(self, name)

    def partial(self, name: str, var: str) -> Callable:
        if var not in STATE_VARS:
            raise ValueError(f"unknown variable {var!r}")
        supplied = self.partials.get(name, {}).get(var)
        if supplied is not None:
            return supplied
        base = self.fn(name)
        if base is None:
            raise ValueError(f"coefficient {name!r} not defined")
        return finite_difference_partial(base, var)

    def has_analytic(self, name: str, var: str) -> bool:
        return self.partials.get(name, {}).get(var) is not None


# ---------------------------------------------------------------------------
# Problem specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Validated, immutable description of one control problem."""

    delta: float
    rho: float
    discount: float
    coeffs: CoefficientSet
    control_lo: float
    control_hi: float
    initial_segment: Callable[[np.ndarray], np.ndarray]
    lambda_avg: float = None  # defaults to rho
    jump: Optional[JumpModel] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.discount <= 0:
            raise ConfigError("discount must be positive")
        if self.control_lo > self.control_hi:
            raise BadInterval(
                f"u_lo={self.control_lo} exceeds u_hi={self.control_hi}"
            )
        if self.lambda_avg is None:
            object.__setattr__(self, "lambda_avg", self.rho)
        if self.lambda_avg <= 0:
            raise ConfigError("lambda_avg must be positive")

    def clip_control(self, u):
        return np.clip(u, self.control_lo, self.control_hi)

    def validate_segment(self, grid: TimeGrid) -> np.ndarray:
        """Evaluate the initial segment on the history grid; reject NaN/inf."""
        s = grid.history_times()
        vals = np.asarray(self.initial_segment(s), float)
        vals = np.broadcast_to(vals, s.shape).copy()
        if not np.all(np.isfinite(vals)):
            raise NonFiniteSegment(
                "initial segment is not finite on all grid points of [-delta, 0]"
            )
        return vals


# ---------------------------------------------------------------------------
# Config-driven construction
# ---------------------------------------------------------------------------

def _segment_from_config(cfg) -> Callable:
    if callable(cfg):
        return cfg
    kind = cfg.get("kind", "constant")
    if kind == "constant":
        c = float(cfg["value"])
        return lambda s: np.full_like(np.asarray(s, float), c)
    if kind == "linear":
        # X0(s) = value + slope * s on [-delta, 0]
        c = float(cfg["value"])
        slope = float(cfg.get("slope", 0.0))
        return lambda s: c + slope * np.asarray(s, float)
    raise ConfigError(f"unknown initial segment kind {kind!r}")


def _jump_from_config(cfg) -> Optional[JumpModel]:
    if cfg is None:
        return None
    if isinstance(cfg, JumpModel):
        return cfg
    marks_cfg = cfg["marks"]
    kind = marks_cfg.get("kind", "discrete")
    if kind != "discrete":
        raise ConfigError("config files support discrete mark distributions")
    marks = DiscreteMarks(
        values=np.asarray(marks_cfg["values"], float),
        probs=np.asarray(marks_cfg["probs"], float),
    )
    return JumpModel(intensity=float(cfg["intensity"]), marks=marks)


def build_problem(raw_config: dict) -> ProblemSpec:
    """Build and validate a ProblemSpec from a parsed configuration record.

    The record follows the documented schema with sections ``problem`` and
    (optionally) ``jump``.  Selector-specific parameters live under
    ``problem.params``; built-in selectors are ``example_3_4``,
    ``example_3_5``, ``linear_quadratic`` and ``custom_polynomial``.
    Deterministic: identical config content yields identical specs.
    """
    from . import examples  # deferred: examples imports model types

    try:
        prob = raw_config["problem"]
    except KeyError as exc:
        raise ConfigError("config missing 'problem' section") from exc

    selector = prob.get("selector")
    params = dict(prob.get("params", {}))
    delta = float(prob.get("delta", 1.0))
    rho = float(prob.get("rho", params.get("rho", 0.1)))
    lambda_avg = prob.get("lambda_avg")
    lambda_avg = float(lambda_avg) if lambda_avg is not None else None
    discount = float(prob.get("discount", rho))
    bounds = prob.get("control_bounds", [0.0, 1.0])
    if len(bounds) != 2:
        raise ConfigError("control_bounds must be [u_lo, u_hi]")
    u_lo, u_hi = float(bounds[0]), float(bounds[1])
    if u_lo > u_hi:
        raise BadInterval(f"u_lo={u_lo} exceeds u_hi={u_hi}")

    flags = {}
    builders = {
        "example_3_4": examples.coefficients_ex34,
        "example_3_5": examples.coefficients_ex35,
        "linear_quadratic": examples.coefficients_linear_quadratic,
        "custom_polynomial": examples.coefficients_polynomial,
        "zero": examples.coefficients_zero,
    }
    if selector not in builders:
        raise ConfigError(f"unknown coefficient selector {selector!r}")
    coeffs, builder_flags = builders[selector](
        params, rho=rho, delta=delta, lambda_avg=lambda_avg or rho,
        discount=discount,
    )
    flags.update(builder_flags)

    segment_cfg = prob.get("initial_segment", {"kind": "constant", "value": 1.0})
    spec = ProblemSpec(
        delta=delta,
        rho=rho,
        lambda_avg=lambda_avg,
        discount=discount,
        coeffs=coeffs,
        control_lo=u_lo,
        control_hi=u_hi,
        initial_segment=_segment_from_config(segment_cfg),
        jump=_jump_from_config(raw_config.get("jump")),
        flags=flags,
    )

    grid_cfg = raw_config.get("grid")
    if grid_cfg is not None:
        # Fail early on delay/grid misalignment.
        grid = make_grid(delta, float(grid_cfg["dt"]), float(grid_cfg["horizon"]))
        spec.validate_segment(grid)
    return spec
