"""Grid construction, configuration parsing, and coefficient plumbing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayctrl import build_problem, make_grid
from delayctrl.errors import BadInterval, ConfigError, GridMismatch
from delayctrl.model import (
    ContinuousMarks,
    DiscreteMarks,
    JumpModel,
    finite_difference_partial,
)

BASE_CONFIG = {
    "problem": {
        "selector": "linear_quadratic",
        "params": {},
        "delta": 1.0,
        "rho": 0.1,
        "lambda_avg": 0.1,
        "discount": 0.1,
        "control_bounds": [0.0, 1.0],
        "initial_segment": {"kind": "constant", "value": 1.0},
    },
    "grid": {"dt": 0.1, "horizon": 2.0},
}


def _cfg(**overrides):
    import copy

    cfg = copy.deepcopy(BASE_CONFIG)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return cfg


class TestMakeGrid:
    def test_counts(self):
        grid = make_grid(1.0, 0.1, 2.0)
        assert grid.m == 10
        assert grid.n == 20
        assert grid.delta == pytest.approx(1.0)

    def test_times(self):
        grid = make_grid(0.5, 0.25, 1.0)
        np.testing.assert_allclose(grid.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        hist = grid.history_times()
        assert hist[-1] == pytest.approx(0.0)
        assert hist[0] == pytest.approx(-0.5)

    def test_delay_not_multiple(self):
        with pytest.raises(GridMismatch):
            make_grid(1.0, 0.3, 3.0)

    def test_horizon_not_multiple(self):
        with pytest.raises(GridMismatch):
            make_grid(1.0, 0.5, 3.3)

    @given(m=st.integers(1, 200), extra=st.integers(0, 400),
           dt=st.sampled_from([0.001, 0.01, 0.025, 0.05, 0.1, 0.5]))
    @settings(max_examples=60, deadline=None)
    def test_integer_multiples_always_accepted(self, m, extra, dt):
        n = m + extra
        grid = make_grid(m * dt, dt, n * dt)
        assert grid.m == m
        assert grid.n == n
        assert len(grid.times) == n + 1


class TestBuildProblem:
    def test_roundtrip(self):
        spec = build_problem(_cfg())
        assert spec.delta == 1.0
        assert spec.control_lo == 0.0
        assert spec.control_hi == 1.0
        assert spec.flags["selector"] == "linear_quadratic"

    def test_missing_problem_section(self):
        with pytest.raises(ConfigError):
            build_problem({"grid": {"dt": 0.1, "horizon": 1.0}})

    def test_unknown_selector(self):
        with pytest.raises(ConfigError):
            build_problem(_cfg(**{"problem.selector": "nope"}))

    def test_inverted_bounds(self):
        with pytest.raises(BadInterval):
            build_problem(_cfg(**{"problem.control_bounds": [1.0, 0.0]}))

    def test_grid_mismatch_caught_early(self):
        with pytest.raises(GridMismatch):
            build_problem(_cfg(**{"grid.dt": 0.3}))

    def test_linear_segment(self):
        spec = build_problem(_cfg(**{
            "problem.initial_segment": {"kind": "linear", "value": 2.0,
                                        "slope": 0.5}}))
        assert spec.initial_segment(0.0) == pytest.approx(2.0)
        assert spec.initial_segment(-1.0) == pytest.approx(1.5)

    def test_unknown_segment_kind(self):
        with pytest.raises(ConfigError):
            build_problem(_cfg(**{
                "problem.initial_segment": {"kind": "spline", "value": 1.0}}))

    def test_jump_section(self):
        cfg = _cfg()
        cfg["jump"] = {"intensity": 0.5,
                       "marks": {"kind": "discrete", "values": [1.0, -1.0],
                                 "probs": [0.5, 0.5]}}
        spec = build_problem(cfg)
        assert spec.jump.intensity == 0.5
        assert spec.jump.mark_expectation(lambda z: z) == pytest.approx(0.0)

    def test_determinism(self):
        a = build_problem(_cfg())
        b = build_problem(_cfg())
        assert a.coeffs.b(0.0, 1.0, 2.0, 3.0, 0.5) == \
            b.coeffs.b(0.0, 1.0, 2.0, 3.0, 0.5)


class TestMarks:
    def test_discrete_moments(self):
        marks = DiscreteMarks(values=np.array([-0.5, 1.0]),
                              probs=np.array([0.4, 0.6]))
        m1, m2 = marks.moments()
        assert m1 == pytest.approx(0.4)
        assert m2 == pytest.approx(0.4 * 0.25 + 0.6 * 1.0)

    def test_discrete_probs_must_sum_to_one(self):
        with pytest.raises(Exception):
            DiscreteMarks(values=np.array([1.0]), probs=np.array([0.5]))

    def test_continuous_expectation_matches_quadrature(self):
        # uniform density on [1, 3]: E[Z] = 2
        marks = ContinuousMarks(density=lambda z: 0.5, low=1.0, high=3.0)
        assert marks.expectation(lambda z: z) == pytest.approx(2.0, abs=1e-10)

    def test_nu_integral_scales_with_intensity(self):
        marks = DiscreteMarks(values=np.array([2.0]), probs=np.array([1.0]))
        jm = JumpModel(intensity=1.5, marks=marks)
        assert jm.nu_integral(lambda z: z ** 2) == pytest.approx(6.0)


class TestPartials:
    def test_analytic_partial_preferred(self, ex34_spec):
        fb_u = ex34_spec.coeffs.partial("b", "u")
        assert fb_u(0.0, 2.0, 0.0, 0.0, 0.1) == pytest.approx(-2.0)

    def test_fd_fallback_matches_analytic(self):
        fn = lambda t, x, y, a, u: x ** 3 + 2.0 * u * x
        d = finite_difference_partial(fn, "x")
        assert d(0.0, 1.5, 0.0, 0.0, 0.2) == pytest.approx(
            3 * 1.5 ** 2 + 0.4, rel=1e-6)

    @given(x=st.floats(-3, 3), u=st.floats(0.01, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_fd_partial_property(self, x, u):
        fn = lambda t, x, y, a, u: np.sin(x) * u
        d = finite_difference_partial(fn, "x")
        assert d(0.0, x, 0.0, 0.0, u) == pytest.approx(np.cos(x) * u,
                                                       rel=1e-5, abs=1e-7)

    def test_clip_control(self, ex34_spec):
        assert ex34_spec.clip_control(-1.0) == 0.0
        assert ex34_spec.clip_control(999.0) == 50.0
