"""Hamiltonians of the two maximum-principle formulations, their
gradients, and a Monte Carlo residual check of the delay Ito formula.

First formulation (scalar adjoint):
    H1 = f + b p + sigma q + int theta(z) r(z) nu(dz).

Second formulation (three-component adjoint):
    H2 = f + b p1 + (x - lambda y - e^{-lambda delta} a) p2
           + sigma q1 + int theta(z) r(z) nu(dz),
with lambda the averaging decay (lambda_avg of the problem spec).

The nu-integral is intensity times the mark expectation, exact for
discrete marks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import NonFinite
from .forward import ControlSpec, StepAccumulator, simulate_ensemble
from .model import ProblemSpec, TimeGrid

RFun = Union[Callable, np.ndarray, float, None]


@dataclass(frozen=True)
class HamArgs1:
    """Arguments of the scalar-adjoint Hamiltonian."""

    t: float
    x: float
    y: float
    a: float
    u: float
    p: float
    q: float
    r: RFun = None


@dataclass(frozen=True)
class HamArgs2:
    """Arguments of the three-adjoint Hamiltonian: p = (p1, p2, p3),
    q = (q1, q2)."""

    t: float
    x: float
    y: float
    a: float
    u: float
    p: tuple
    q: tuple
    r: RFun = None


def _r_at(r: RFun, jump, j: int, z: float):
    if r is None:
        return 0.0
    if callable(r):
        return r(z)
    arr = np.asarray(r, float)
    if arr.ndim == 0:
        return float(arr)
    return arr[j]


def nu_theta_r(spec: ProblemSpec, t, x, y, a, u, r: RFun):
    """int theta(t,x,y,a,u,z) r(z) nu(dz) = intensity * E[theta(Z) r(Z)]."""
    jump = spec.jump
    theta = spec.coeffs.theta
    if jump is None or theta is None or r is None or jump.intensity == 0:
        return 0.0
    return _nu_weighted(spec, r, lambda z: theta(t, x, y, a, u, z))


def _nu_weighted(spec: ProblemSpec, r: RFun, gz: Callable):
    jump = spec.jump
    if hasattr(jump.marks, "values"):
        total = 0.0
        for j, (z, pz) in enumerate(zip(jump.marks.values, jump.marks.probs)):
            total = total + pz * np.asarray(gz(z), float) * _r_at(r, jump, j, z)
        return jump.intensity * total
    return jump.intensity * jump.marks.expectation(
        lambda z: gz(z) * _r_at(r, jump, None, z))


def _check_finite(value, label):
    if not np.all(np.isfinite(value)):
        raise NonFinite(f"{label} evaluated to a non-finite value")
    return value


def eval_H1(spec: ProblemSpec, args: HamArgs1, check: bool = True):
    c = spec.coeffs
    t, x, y, a, u = args.t, args.x, args.y, args.a, args.u
    val = (c.f(t, x, y, a, u)
           + c.b(t, x, y, a, u) * args.p
           + c.sigma(t, x, y, a, u) * args.q
           + nu_theta_r(spec, t, x, y, a, u, args.r))
    return _check_finite(val, "H1") if check else val


def eval_H2(spec: ProblemSpec, args: HamArgs2, check: bool = True):
    c = spec.coeffs
    t, x, y, a, u = args.t, args.x, args.y, args.a, args.u
    p1, p2, _p3 = args.p
    q1, _q2 = args.q
    lam = spec.lambda_avg
    avg_term = (x - lam * y - np.exp(-lam * spec.delta) * a) * p2
    val = (c.f(t, x, y, a, u)
           + c.b(t, x, y, a, u) * p1
           + avg_term
           + c.sigma(t, x, y, a, u) * q1
           + nu_theta_r(spec, t, x, y, a, u, args.r))
    return _check_finite(val, "H2") if check else val


def grad_H(spec: ProblemSpec, args, which: str, formulation: int = 1,
           check: bool = True):
    """Partial derivative of the Hamiltonian in x, y, a, or u by the chain
    rule over the coefficient partials (finite differences fill gaps).

    ``check=False`` returns NaN/inf entries instead of raising, for
    callers that filter out-of-domain ensemble points themselves."""
    if which not in ("x", "y", "a", "u"):
        raise ValueError(f"unknown variable {which!r}")
    c = spec.coeffs
    t, x, y, a, u = args.t, args.x, args.y, args.a, args.u
    if formulation == 1:
        p, q = args.p, args.q
    else:
        p, q = args.p[0], args.q[0]

    val = (c.partial("f", which)(t, x, y, a, u)
           + c.partial("b", which)(t, x, y, a, u) * p
           + c.partial("sigma", which)(t, x, y, a, u) * q)
    if spec.jump is not None and c.theta is not None and args.r is not None:
        dtheta = c.partial("theta", which)
        val = val + _nu_weighted(spec, args.r,
                                 lambda z: dtheta(t, x, y, a, u, z))
    if formulation == 2:
        p2 = args.p[1]
        lam = spec.lambda_avg
        coef = {"x": 1.0, "y": -lam, "a": -np.exp(-lam * spec.delta),
                "u": 0.0}[which]
        val = val + coef * p2
    return _check_finite(val, f"dH/d{which}") if check else val


# ---------------------------------------------------------------------------
# Control maximization
# ---------------------------------------------------------------------------

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def maximize_scalar(fn: Callable[[float], float], lo: float, hi: float,
                    iters: int = 60, newton_steps: int = 3):
    """Maximize fn on [lo, hi]: golden-section bracketing refined by a few
    Newton steps when the local curvature is negative.  Robust for
    non-concave fn; returns (argmax, value)."""
    a, b = float(lo), float(hi)
    if a == b:
        return a, fn(a)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
        if b - a < 1e-12 * max(1.0, abs(a) + abs(b)):
            break
    u = 0.5 * (a + b)
    h = max(1e-6, 1e-6 * abs(u))
    for _ in range(newton_steps):
        f0, fp, fm = fn(u), fn(u + h), fn(u - h)
        g = (fp - fm) / (2 * h)
        curv = (fp - 2 * f0 + fm) / h**2
        if not np.isfinite(curv) or curv >= 0:
            break
        step = g / curv
        u_new = min(float(hi), max(float(lo), u - step))
        if fn(u_new) >= f0:
            u = u_new
        else:
            break
    return u, fn(u)


def maximize_H(spec: ProblemSpec, args, formulation: int = 1):
    """argmax over the control interval of u -> H(..., u, ...)."""
    evaluator = eval_H1 if formulation == 1 else eval_H2
    from dataclasses import replace

    def val(u):
        return float(evaluator(spec, replace(args, u=u)))

    return maximize_scalar(val, spec.control_lo, spec.control_hi)


# ---------------------------------------------------------------------------
# Delay Ito formula residual
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ItoTestFunction:
    """Test function F(t, x, a) with the partials the generator needs."""

    F: Callable
    F_t: Callable
    F_x: Callable
    F_xx: Callable
    F_a: Callable


class _ItoResidualAccumulator(StepAccumulator):
    """Per-path residual
    F(T, X_T, A_T) - F(0, X_0, A_0) - int_0^T [generator] dt,
    with the generator evaluated at left points:
      LF = F_t + b F_x + 0.5 sigma^2 F_xx
      jump part = intensity * E[F(t, x + theta(Z), a) - F(t, x, a)
                                - theta(Z) F_x(t, x, a)]
      average part = (x - lambda_avg * A - e^{-lambda_avg delta} y) F_a,
    the last factor being the exact drift of A when lambda_avg equals the
    averaging decay used along the path.
    """

    def __init__(self, F: ItoTestFunction, control: ControlSpec):
        self.Ffun = F
        self.control = control

    def begin(self, n_lanes, spec, grid):
        return {"spec": spec, "grid": grid, "I": np.zeros(n_lanes),
                "F0": None}

    def step(self, st, k, ctx):
        spec, F = st["spec"], self.Ffun
        t, x, y, a, u = ctx["t"], ctx["x"], ctx["y"], ctx["a"], ctx["u"]
        if st["F0"] is None:
            st["F0"] = np.asarray(F.F(t, x, a), float) + np.zeros_like(x)
        c = spec.coeffs
        lam = spec.lambda_avg
        gen = (F.F_t(t, x, a)
               + c.b(t, x, y, a, u) * F.F_x(t, x, a)
               + 0.5 * c.sigma(t, x, y, a, u) ** 2 * F.F_xx(t, x, a)
               + (x - lam * a - np.exp(-lam * spec.delta) * y) * F.F_a(t, x, a))
        if spec.jump is not None and c.theta is not None and spec.jump.intensity > 0:
            def comp(z):
                th = c.theta(t, x, y, a, u, z)
                return (F.F(t, x + th, a) - F.F(t, x, a)
                        - th * F.F_x(t, x, a))
            gen = gen + spec.jump.nu_integral(comp)
        st["I"] += st["grid"].dt * np.asarray(gen, float)

    def finish(self, st, ctx):
        FT = np.asarray(self.Ffun.F(ctx["t"], ctx["x"], ctx["a"]), float)
        res = FT - st["F0"] - st["I"]
        if not np.all(np.isfinite(res)):
            raise NonFinite("Ito-formula residual is not finite")
        return res


def ito_delay_residual(spec: ProblemSpec, grid: TimeGrid, F: ItoTestFunction,
                       control: ControlSpec, n_paths: int, seed: int,
                       threads: int = 1):
    """Monte Carlo mean and standard error of the compensated delay-Ito
    residual; a correct formula drives the mean to 0 up to O(dt) bias."""
    acc = _ItoResidualAccumulator(F, control)
    res = simulate_ensemble(spec, grid, control, n_paths, seed,
                            accumulators=(acc,), threads=threads)
    vals = res.extras[0]
    mean = float(np.mean(vals))
    stderr = (float(np.std(vals, ddof=1) / np.sqrt(n_paths))
              if n_paths > 1 else 0.0)
    return mean, stderr
