"""Closed-form benchmark problems with power-utility consumption.

Two worked instances serve as ground truth for the solvers and the
optimality checks:

* a no-delay instance: maximize E int e^{-rho t} (u X)^gamma / gamma dt
  for dX = (mu X - u X) dt + sigma dB, whose optimal control consumes a
  deterministic amount c(t) and whose shadow price is p1(0) e^{-mu t};

* a delayed instance: the reward depends on the composite wealth
  W = X + Y e^{rho delta} beta, with dynamics
  dX = (mu X + alpha Y + beta A - u W) dt + sigma dB.  When alpha
  satisfies alpha = e^{rho delta} beta (mu + lambda + e^{rho delta} beta)
  the three-component adjoint collapses to the proportional pair
  p1 = (e^{-rho delta} / beta) p2 with p3 = 0, and the optimal control
  has the same consumption structure with decay mu + e^{rho delta} beta.

This module also provides the coefficient-set builders behind the
configuration selectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import DivergentIntegral, DomainError, NoSignChange
from .forward import ControlSpec, feedback_control, simulate_noiseless
from .model import CoefficientSet, ProblemSpec, make_grid


@dataclass(frozen=True)
class Example34Params:
    gamma: float = 0.5
    mu: float = 0.05
    rho: float = 0.1
    sigma0: float = 0.0  # diffusion rule sigma = sigma0 * x
    X0: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass(frozen=True)
class Example35Params:
    gamma: float = 0.5
    mu: float = 0.05
    alpha: float = None  # None: match the proportionality constraint
    beta: float = 0.05
    rho: float = 0.1
    delta: float = 1.0
    lambda_avg: float = 0.1
    sigma0: float = 0.0
    X0: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if self.rho <= 0 or self.delta <= 0:
            raise ValueError("rho and delta must be positive")
        if self.alpha is None:
            object.__setattr__(self, "alpha", ex35_matched_alpha(self))

    @property
    def edb(self) -> float:
        """e^{rho delta} beta, the lag weight in the composite wealth."""
        return float(np.exp(self.rho * self.delta) * self.beta)


# ---------------------------------------------------------------------------
# No-delay closed forms
# ---------------------------------------------------------------------------

def ex34_adjoint(params: Example34Params, t, p0: float):
    """Shadow price p1(t) = p1(0) e^{-mu t}."""
    return p0 * np.exp(-params.mu * np.asarray(t, float))


def ex34_control(params: Example34Params, t: float, x: float, p0: float) -> float:
    """Optimal feedback u(t, x) = p0^{1/(gamma-1)} / x * e^{(rho-mu)t/(gamma-1)}."""
    if x <= 0:
        raise DomainError(f"wealth must be positive, got x={x}")
    if p0 <= 0:
        raise DomainError(f"multiplier must be positive, got p0={p0}")
    g1 = params.gamma - 1.0
    return (p0 ** (1.0 / g1) / x) * np.exp((params.rho - params.mu) * t / g1)


def ex34_feedback(params: Example34Params, p0: float) -> ControlSpec:
    """Vectorized feedback-rule wrapper around ex34_control."""
    g1 = params.gamma - 1.0
    c0 = p0 ** (1.0 / g1)
    rate = (params.rho - params.mu) / g1

    def rule(t, x, y, a):
        with np.errstate(all="ignore"):
            return c0 * np.exp(rate * t) / np.asarray(x, float)

    return feedback_control(rule)


def ex34_p0_star(params: Example34Params, quadrature_T: float = None) -> float:
    """The multiplier keeping wealth nonnegative along the deterministic
    flow: p1(0) = [X0 / I]^{gamma-1} with
    I = int_0^inf e^{-(mu + (rho-mu)/(1-gamma)) s} ds."""
    decay = params.mu + (params.rho - params.mu) / (1.0 - params.gamma)
    if decay <= 0:
        raise DivergentIntegral(
            f"normalizing integral diverges: mu + (rho-mu)/(1-gamma) = {decay:g} <= 0")
    integral = 1.0 / decay
    if quadrature_T is not None:
        num, _ = quad(lambda s: np.exp(-decay * s), 0.0, quadrature_T)
        if abs(num - integral) > 1e-6 * integral + np.exp(-decay * quadrature_T) / decay:
            raise DivergentIntegral(
                "quadrature cross-check disagrees with the analytic integral")
    return (params.X0 / integral) ** (params.gamma - 1.0)


def ex34_consumption(params: Example34Params, t, p0: float):
    """c(t) = u(t) X(t), deterministic along the closed-form solution."""
    g1 = params.gamma - 1.0
    return p0 ** (1.0 / g1) * np.exp((params.rho - params.mu) * np.asarray(t, float) / g1)


def ex34_objective(params: Example34Params, p0: float) -> float:
    """Closed-form J under the feedback rule with multiplier p0 (exact for
    sigma-rules that leave u X deterministic, e.g. sigma = sigma0 x)."""
    g = params.gamma
    g1 = g - 1.0
    kappa = -params.rho + g * (params.rho - params.mu) / g1
    if kappa >= 0:
        raise DivergentIntegral("discounted utility integral diverges")
    return p0 ** (g / g1) / (g * (-kappa))


def ex34_state(params: Example34Params, t, p0: float):
    """Deterministic wealth under the feedback rule (sigma-independent in
    mean only when sigma = 0): variation-of-constants solution."""
    t = np.asarray(t, float)
    g1 = params.gamma - 1.0
    rate = (params.rho - params.mu) / g1
    decay = params.mu + (params.rho - params.mu) / (1.0 - params.gamma)
    c0 = p0 ** (1.0 / g1)
    # X(t) = e^{mu t} [X0 - c0 int_0^t e^{(rate - mu)s} ds]
    expo = rate - params.mu
    integral = t if abs(expo) < 1e-15 else np.expm1(expo * t) / expo
    return np.exp(params.mu * t) * (params.X0 - c0 * integral)


# ---------------------------------------------------------------------------
# Delayed closed forms
# ---------------------------------------------------------------------------

def ex35_matched_alpha(params: Example35Params) -> float:
    """The alpha making the adjoint pair proportional:
    alpha = e^{rho delta} beta (mu + lambda + e^{rho delta} beta)."""
    edb = params.edb
    return edb * (params.mu + params.lambda_avg + edb)


def ex35_alpha_residual(params: Example35Params) -> float:
    return params.alpha - ex35_matched_alpha(params)


def ex35_adjoint(params: Example35Params, t, p0: float):
    """p1(t) = p1(0) e^{-(mu + e^{rho delta} beta) t}."""
    return p0 * np.exp(-(params.mu + params.edb) * np.asarray(t, float))


def ex35_control(params: Example35Params, t: float, x: float, y: float,
                 p0: float) -> float:
    """Optimal feedback
    u = p0^{1/(gamma-1)} / W * e^{(rho - mu - e^{rho delta} beta) t / (gamma-1)}
    with W = x + y e^{rho delta} beta."""
    W = x + y * params.edb
    if W <= 0:
        raise DomainError(f"composite wealth must be positive, got {W}")
    if p0 <= 0:
        raise DomainError(f"multiplier must be positive, got p0={p0}")
    g1 = params.gamma - 1.0
    rate = (params.rho - (params.mu + params.edb)) / g1
    return (p0 ** (1.0 / g1) / W) * np.exp(rate * t)


def ex35_feedback(params: Example35Params, p0: float) -> ControlSpec:
    g1 = params.gamma - 1.0
    c0 = p0 ** (1.0 / g1)
    rate = (params.rho - (params.mu + params.edb)) / g1
    edb = params.edb

    def rule(t, x, y, a):
        with np.errstate(all="ignore"):
            W = np.asarray(x, float) + np.asarray(y, float) * edb
            return c0 * np.exp(rate * t) / W

    return feedback_control(rule)


def ex35_K(params: Example35Params, search_cfg: dict = None) -> float:
    """Smallest multiplier keeping the composite wealth positive along the
    noiseless flow, located by bisection on p1(0)."""
    cfg = dict(search_cfg or {})
    T_search = cfg.get("T_search", 80.0)
    dt = cfg.get("dt", 1e-2)
    tol = cfg.get("tol", 1e-6)
    p_hi = cfg.get("bracket_hi", 4.0)
    p_lo = cfg.get("bracket_lo", 1e-3)

    spec = make_ex35_problem(params, u_hi=1e12)
    grid = make_grid(params.delta, dt, T_search)
    edb = params.edb

    def wealth_stays_positive(p0: float) -> bool:
        try:
            rec = simulate_noiseless(spec, grid, ex35_feedback(params, p0))
        except Exception:
            return False
        W = rec.X + rec.Y * edb
        return bool(np.all(np.isfinite(W)) and np.all(W > 0))

    # larger multiplier means smaller consumption, hence safer wealth
    expansions = 0
    while not wealth_stays_positive(p_hi):
        p_hi *= 2.0
        expansions += 1
        if expansions > 60:
            raise NoSignChange("no multiplier keeps the wealth positive")
    expansions = 0
    while wealth_stays_positive(p_lo):
        p_lo *= 0.5
        expansions += 1
        if expansions > 60:
            raise NoSignChange("wealth stays positive for every multiplier probed")

    while p_hi - p_lo > tol:
        mid = 0.5 * (p_lo + p_hi)
        if wealth_stays_positive(mid):
            p_hi = mid
        else:
            p_lo = mid
    return 0.5 * (p_lo + p_hi)


# ---------------------------------------------------------------------------
# Coefficient builders (configuration selectors)
# ---------------------------------------------------------------------------

def _power(base, expo):
    with np.errstate(all="ignore"):
        return np.asarray(base, float) ** expo


def coefficients_ex34(params: dict, *, rho, delta, lambda_avg, discount):
    p = dict(params)
    gamma = float(p.get("gamma", 0.5))
    mu = float(p.get("mu", 0.05))
    sigma0 = float(p.get("sigma0", 0.0))
    rr = float(p.get("rho", rho))

    def b(t, x, y, a, u):
        return mu * x - u * x

    def sigma(t, x, y, a, u):
        return sigma0 * x

    def f(t, x, y, a, u):
        return np.exp(-rr * t) * _power(u * x, gamma) / gamma

    zero = lambda t, x, y, a, u: np.zeros_like(np.asarray(x, float))
    partials = {
        "b": {"x": lambda t, x, y, a, u: mu - u,
              "y": zero, "a": zero,
              "u": lambda t, x, y, a, u: -np.asarray(x, float)},
        "sigma": {"x": lambda t, x, y, a, u: np.full_like(np.asarray(x, float), sigma0),
                  "y": zero, "a": zero, "u": zero},
        "f": {"x": lambda t, x, y, a, u: np.exp(-rr * t) * _power(u, gamma) * _power(x, gamma - 1.0),
              "y": zero, "a": zero,
              "u": lambda t, x, y, a, u: np.exp(-rr * t) * _power(u, gamma - 1.0) * _power(x, gamma)},
    }
    coeffs = CoefficientSet(b=b, sigma=sigma, theta=None, f=f, partials=partials)
    return coeffs, {"selector": "example_3_4"}


def coefficients_ex35(params: dict, *, rho, delta, lambda_avg, discount):
    p = dict(params)
    gamma = float(p.get("gamma", 0.5))
    mu = float(p.get("mu", 0.05))
    beta = float(p.get("beta", 0.05))
    rr = float(p.get("rho", rho))
    edb = float(np.exp(rr * delta) * beta)
    alpha = float(p.get("alpha", edb * (mu + lambda_avg + edb)))
    sigma0 = float(p.get("sigma0", 0.0))

    def W(x, y):
        return np.asarray(x, float) + np.asarray(y, float) * edb

    def b(t, x, y, a, u):
        return mu * x + alpha * y + beta * a - u * W(x, y)

    def sigma(t, x, y, a, u):
        return sigma0 * W(x, y)

    def f(t, x, y, a, u):
        return np.exp(-rr * t) * _power(u * W(x, y), gamma) / gamma

    zero = lambda t, x, y, a, u: np.zeros_like(np.asarray(x, float))

    def f_marginal(t, x, y, a, u):
        # d/dW of the utility term, shared by the x and y partials
        return np.exp(-rr * t) * _power(u, gamma) * _power(W(x, y), gamma - 1.0)

    partials = {
        "b": {"x": lambda t, x, y, a, u: mu - u,
              "y": lambda t, x, y, a, u: alpha - u * edb,
              "a": lambda t, x, y, a, u: np.full_like(np.asarray(x, float), beta),
              "u": lambda t, x, y, a, u: -W(x, y)},
        "sigma": {"x": lambda t, x, y, a, u: np.full_like(np.asarray(x, float), sigma0),
                  "y": lambda t, x, y, a, u: np.full_like(np.asarray(x, float), sigma0 * edb),
                  "a": zero, "u": zero},
        "f": {"x": f_marginal,
              "y": lambda t, x, y, a, u: edb * f_marginal(t, x, y, a, u),
              "a": zero,
              "u": lambda t, x, y, a, u: np.exp(-rr * t) * _power(u, gamma - 1.0) * _power(W(x, y), gamma)},
    }
    coeffs = CoefficientSet(b=b, sigma=sigma, theta=None, f=f, partials=partials)
    residual = alpha - edb * (mu + lambda_avg + edb)
    flags = {
        "selector": "example_3_5",
        "alpha_constraint_violated": bool(abs(residual) > 1e-10 * max(1.0, abs(alpha))),
        "alpha_residual": residual,
    }
    return coeffs, flags


def coefficients_linear_quadratic(params: dict, *, rho, delta, lambda_avg,
                                  discount):
    p = dict(params)
    kx = float(p.get("kx", -0.2))
    ky = float(p.get("ky", 0.1))
    ka = float(p.get("ka", 0.05))
    ku = float(p.get("ku", 1.0))
    s0 = float(p.get("s0", 0.1))
    sx = float(p.get("sx", 0.0))
    cx = float(p.get("cx", -0.5))
    cu = float(p.get("cu", -0.5))
    cl = float(p.get("cl", 0.0))
    disc = float(p.get("discount", discount))

    def b(t, x, y, a, u):
        return kx * x + ky * y + ka * a + ku * u

    def sigma(t, x, y, a, u):
        return s0 + sx * x

    def f(t, x, y, a, u):
        return np.exp(-disc * t) * (cx * x ** 2 + cu * u ** 2 + cl * u)

    zero = lambda t, x, y, a, u: np.zeros_like(np.asarray(x, float))
    const = lambda v: (lambda t, x, y, a, u: np.full_like(np.asarray(x, float), v))
    partials = {
        "b": {"x": const(kx), "y": const(ky), "a": const(ka), "u": const(ku)},
        "sigma": {"x": const(sx), "y": zero, "a": zero, "u": zero},
        "f": {"x": lambda t, x, y, a, u: np.exp(-disc * t) * 2 * cx * x,
              "y": zero, "a": zero,
              "u": lambda t, x, y, a, u: np.exp(-disc * t) * (2 * cu * u + cl)},
    }
    coeffs = CoefficientSet(b=b, sigma=sigma, theta=None, f=f, partials=partials)
    return coeffs, {"selector": "linear_quadratic"}


def coefficients_polynomial(params: dict, *, rho, delta, lambda_avg, discount):
    """Coefficients as sums of monomials c * x^i y^j a^k u^l; each of
    b / sigma / f is a list of [c, i, j, k, l] terms, optionally with a
    discount factor e^{-rate t} applied to f.  Partials fall back to
    central finite differences."""
    p = dict(params)

    def poly(terms):
        terms = [tuple(term) for term in terms]

        def fun(t, x, y, a, u):
            x = np.asarray(x, float)
            total = np.zeros_like(x)
            with np.errstate(all="ignore"):
                for c, i, j, k, l in terms:
                    total = total + c * x ** i * np.asarray(y, float) ** j \
                        * np.asarray(a, float) ** k * np.asarray(u, float) ** l
            return total

        return fun

    b = poly(p.get("b", []))
    sigma = poly(p.get("sigma", []))
    f_rate = float(p.get("f_discount", 0.0))
    f_poly = poly(p.get("f", []))

    def f(t, x, y, a, u):
        return np.exp(-f_rate * t) * f_poly(t, x, y, a, u)

    coeffs = CoefficientSet(b=b, sigma=sigma, theta=None, f=f, partials={})
    return coeffs, {"selector": "custom_polynomial"}


def coefficients_zero(params: dict, *, rho, delta, lambda_avg, discount):
    zero = lambda t, x, y, a, u: np.zeros_like(np.asarray(x, float))
    zfun = lambda t, x, y, a, u: np.zeros_like(np.asarray(x, float))
    partials = {name: {v: zero for v in ("x", "y", "a", "u")}
                for name in ("b", "sigma", "f")}
    coeffs = CoefficientSet(b=zfun, sigma=zfun, theta=None, f=zfun,
                            partials=partials)
    return coeffs, {"selector": "zero"}


# ---------------------------------------------------------------------------
# Problem-spec conveniences
# ---------------------------------------------------------------------------

def make_ex34_problem(params: Example34Params, delta: float = 1.0,
                      u_hi: float = 1.0) -> ProblemSpec:
    """Full ProblemSpec for the no-delay benchmark (delta only affects the
    bookkeeping; the coefficients ignore y and a)."""
    coeffs, flags = coefficients_ex34(
        {"gamma": params.gamma, "mu": params.mu, "rho": params.rho,
         "sigma0": params.sigma0},
        rho=params.rho, delta=delta, lambda_avg=params.rho,
        discount=params.rho)
    x0 = params.X0
    return ProblemSpec(
        delta=delta, rho=params.rho, lambda_avg=params.rho,
        discount=params.rho, coeffs=coeffs, control_lo=0.0, control_hi=u_hi,
        initial_segment=lambda s: np.full_like(np.asarray(s, float), x0),
        jump=None, flags=flags)


def make_ex35_problem(params: Example35Params, u_hi: float = 1.0) -> ProblemSpec:
    coeffs, flags = coefficients_ex35(
        {"gamma": params.gamma, "mu": params.mu, "beta": params.beta,
         "alpha": params.alpha, "rho": params.rho, "sigma0": params.sigma0},
        rho=params.rho, delta=params.delta, lambda_avg=params.lambda_avg,
        discount=params.rho)
    x0 = params.X0
    return ProblemSpec(
        delta=params.delta, rho=params.rho, lambda_avg=params.lambda_avg,
        discount=params.rho, coeffs=coeffs, control_lo=0.0, control_hi=u_hi,
        initial_segment=lambda s: np.full_like(np.asarray(s, float), x0),
        jump=None, flags=flags)
