import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbit_tracer import plant as pl
from orbit_tracer.continuation import (
    BranchPoint,
    ChartSettings,
    ContinuationError,
    Experiment,
    ExperimentProtocol,
    _null_tangent,
    continue_branch,
    count_folds,
    fd_jacobian,
    floquet_diagnostics,
    generator_from_reference,
    generator_from_xi,
    initial_point,
    newton_correct,
    open_loop_sweep,
    steady_control_residual,
    xi_from_generator,
)
from orbit_tracer.control import Mrac, Proportional
from orbit_tracer.plant import ModelFreeViolation
from orbit_tracer.signal import FourierSeries, VectorFourierSeries, synthesize_reference

from conftest import Q1_COS, Q1_SIN, Q2_COS, Q2_SIN

A_EFF = np.array([[0.0, 1.0], [-1.0, -0.1]])  # linear plant with its hidden theta folded in


def resolvent_amplitude(w):
    return abs(np.linalg.solve(1j * w * np.eye(2) - A_EFF, [0.0, 1.0])[0])


def exact_linear_xi(w, K=5):
    c = np.linalg.solve(1j * w * np.eye(2) - A_EFF, [0.0, 1.0])
    # Im(c e^{iwt}) for sin forcing
    r = VectorFourierSeries(tuple(FourierSeries.from_terms(w, K, 0.0, {1: c[i].imag}, {1: c[i].real})
                                  for i in range(2)))
    p = pl.linear_oscillator(omega=w)
    return xi_from_generator(generator_from_reference(r, p.A, p.b)), r


def on_orbit_state(r, theta_hat):
    return np.concatenate([r.eval(0.0), np.zeros(2), theta_hat])


def test_protocol_validation():
    with pytest.raises(ValueError):
        ExperimentProtocol(n_samples=20, K=5)
    with pytest.raises(ValueError):
        ExperimentProtocol(n_transient_periods=0)
    with pytest.raises(ValueError):
        ChartSettings(h0=1.0, h_max=0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=11, max_size=11), st.floats(0.3, 3))
def test_xi_reference_round_trip(coeffs, w):
    p = pl.duffing()
    xi = np.array(coeffs + [w])
    r = synthesize_reference(generator_from_xi(xi, 5), p.A, p.b)
    back = xi_from_generator(generator_from_reference(r, p.A, p.b))
    assert np.max(np.abs(back - xi)) <= 1e-10 * max(1.0, np.max(np.abs(xi)))


def test_linear_exact_generator_residual():
    xi, r = exact_linear_xi(0.8)
    ex = Experiment(pl.linear_oscillator(omega=0.8), Mrac())
    F, _ = steady_control_residual(ex, xi, on_orbit_state(r, np.array([0.3, 0.1])))
    assert np.linalg.norm(F) <= 1e-6


def test_duffing_printed_orbit_residual():
    p = pl.duffing()
    r = VectorFourierSeries((FourierSeries.from_terms(1.0, 5, 0.0, Q1_COS, Q1_SIN),
                             FourierSeries.from_terms(1.0, 5, 0.0, Q2_COS, Q2_SIN)))
    xi = xi_from_generator(generator_from_reference(r, p.A, p.b))
    ex = Experiment(p, Mrac())
    # warm start on the steady closed loop; the floor is the 4-decimal rounding of the coefficients
    F, _ = steady_control_residual(ex, xi, on_orbit_state(ex.reference(xi), p.theta))
    assert np.linalg.norm(F) < 2e-4


def test_duffing_invasive_reference_residual():
    p = pl.duffing()
    xi = xi_from_generator(FourierSeries.from_terms(1.0, 5, 0.0, {1: 1.0}, {}))
    ex = Experiment(p, Mrac())
    F, _ = steady_control_residual(ex, xi, on_orbit_state(ex.reference(xi), p.theta))
    assert np.linalg.norm(F) > 1e-2


def _prop_experiment(w=0.8):
    return Experiment(pl.linear_oscillator(omega=w), Proportional((1.0, 1.0)))


def test_linear_jacobian_is_constant():
    ex = _prop_experiment()
    xi, r = exact_linear_xi(0.8)
    warm = r.eval(0.0)
    J1, _, _ = fd_jacobian(ex, xi, 1e-4, warm)
    xi2 = xi.copy()
    xi2[:-1] += 0.05
    J2, _, _ = fd_jacobian(ex, xi2, 1e-4, warm)
    assert np.max(np.abs(J1[:, :-1] - J2[:, :-1])) < 1e-4
    J3, _, _ = fd_jacobian(ex, xi, 2e-4, warm)
    assert np.max(np.abs(J3 - J1)) < 1e-2


def test_linear_newton_affine():
    ex = _prop_experiment()
    xi, r = exact_linear_xi(0.8)
    t = np.zeros(xi.size)
    t[-1] = 1.0
    xi_p = xi + 0.02 * np.r_[np.ones(xi.size - 1), 0.0]
    point, _, info = newton_correct(ex, xi_p, t, ChartSettings(), r.eval(0.0))
    assert point is not None and info["iters"] <= 2
    assert point.amplitude == pytest.approx(resolvent_amplitude(0.8), abs=1e-5)


def test_null_tangent():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(11, 12))
    prev = np.zeros(12)
    prev[-1] = 1.0
    tau = _null_tangent(J, prev)
    assert np.linalg.norm(J @ tau) < 1e-12
    assert np.linalg.norm(tau) == pytest.approx(1.0)
    assert tau @ prev > 0
    assert _null_tangent(J, -prev) @ tau == pytest.approx(-1.0)


def test_count_folds():
    def pt(s):
        t = np.array([0.0, s])
        return BranchPoint(np.zeros(2), t / np.linalg.norm(t), 0.0, 0.0)

    assert count_folds([pt(1), pt(0.5), pt(-1), pt(-0.2), pt(0.3)]) == [1, 3]
    assert count_folds([pt(1), pt(1)]) == []


@pytest.fixture(scope="module")
def linear_branch():
    w0 = 0.6
    p = pl.linear_oscillator(omega=w0)
    ex = Experiment(p, Mrac())
    xi, r = exact_linear_xi(w0)
    start = newton_correct(ex, xi, np.r_[np.zeros(xi.size - 1), 1.0], ChartSettings(),
                           on_orbit_state(r, np.zeros(2)))
    point, state = start[0], start[1]
    res = continue_branch(ex, omega_range=(0.5, 0.75), direction=1,
                          settings=ChartSettings(h0=0.05, h_max=0.1), start=(point, state))
    return ex, res


def test_linear_branch_matches_resolvent(linear_branch):
    _, res = linear_branch
    assert res.status == "range" and len(res) >= 3
    for p in res.points:
        assert p.residual_norm <= 1e-6
        assert p.amplitude == pytest.approx(resolvent_amplitude(p.omega), abs=1e-4)


def test_branch_continuity(linear_branch):
    _, res = linear_branch
    pts = res.points
    for a, b in zip(pts, pts[1:]):
        assert np.linalg.norm(b.xi - a.xi) <= 2 * 0.1
        assert a.tangent @ b.tangent > 0
        assert np.linalg.norm(b.tangent) == pytest.approx(1.0)


def test_branch_points_reverify(linear_branch):
    ex, res = linear_branch
    p = res.points[-1]
    F, _ = steady_control_residual(ex, p.xi, p.terminal_state)
    assert np.linalg.norm(F) <= 1e-6


def test_branch_determinism():
    def trace():
        ex = _prop_experiment(0.8)
        xi, r = exact_linear_xi(0.8)
        res = continue_branch(ex, xi0=xi, omega_range=(0.7, 0.9), direction=1,
                              settings=ChartSettings(max_points=3))
        return np.array([p.xi for p in res.points]), np.array([p.tangent for p in res.points])

    a, b = trace(), trace()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_model_free_audit():
    p = pl.linear_oscillator(omega=0.8).trapped()
    with pytest.raises(ModelFreeViolation):
        _ = p.theta
    xi, r = exact_linear_xi(0.8)
    ex = Experiment(p, Mrac())
    F, _ = steady_control_residual(ex, xi, on_orbit_state(r, np.zeros(2)))
    assert np.all(np.isfinite(F))
    fd_jacobian(ex, xi, 1e-4, on_orbit_state(r, np.zeros(2)))


def test_experiment_errors():
    ex = _prop_experiment()
    xi, _ = exact_linear_xi(0.8)
    bad = xi.copy()
    bad[-1] = -1.0
    with pytest.raises(ContinuationError):
        steady_control_residual(ex, bad)


def test_sweep_zero_forcing_and_linear():
    p0 = pl.linear_oscillator(forcing=0.0)
    assert all(a < 1e-12 for _, a, _ in open_loop_sweep(p0, [0.5, 1.0], settle_periods=5))
    grid = [0.5, 0.8, 1.2]
    res = open_loop_sweep(pl.linear_oscillator(), grid, settle_periods=150)
    for w, a, conv in res:
        assert conv
        assert a == pytest.approx(resolvent_amplitude(w), abs=1e-3)
    with pytest.raises(ValueError):
        open_loop_sweep(p0, [0.5, 1.0, 0.7])


def test_floquet_linear():
    w = 0.8
    xi, _ = exact_linear_xi(w)
    p = pl.linear_oscillator(omega=w)
    pt = BranchPoint(xi, np.zeros_like(xi), 0.0, 0.0)
    mu = floquet_diagnostics(p, pt, K=5)
    lam = np.linalg.eigvals(A_EFF)
    expected = np.exp(lam * 2 * np.pi / w)
    assert np.allclose(sorted(mu, key=lambda z: z.imag), sorted(expected, key=lambda z: z.imag), atol=1e-7)
    with pytest.raises(ModelFreeViolation):
        floquet_diagnostics(p.trapped(), pt, K=5)


@pytest.fixture(scope="module")
def duffing_start():
    ex = Experiment(pl.duffing(), Mrac())
    point, state = initial_point(ex, 1.0, ChartSettings())
    return ex, point, state


def test_duffing_initial_point(duffing_start):
    ex, point, _ = duffing_start
    assert point.residual_norm <= 1e-6
    assert point.amplitude == pytest.approx(3.1909, abs=1e-3)
    sv = np.linalg.svd(point.jacobian, compute_uv=False)
    assert sv[-1] > 1e-3
    mu = floquet_diagnostics(ex.plant, point, ex)
    assert np.all(np.abs(mu) < 1)


def test_duffing_recorrect_at_converged_point(duffing_start):
    ex, point, state = duffing_start
    again, _, info = newton_correct(ex, point.xi, point.tangent, ChartSettings(), state)
    assert again is not None and info["iters"] <= 1
