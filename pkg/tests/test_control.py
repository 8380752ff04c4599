import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbit_tracer import plant as pl
from orbit_tracer.control import (
    ClosedLoop,
    ClosedLoopRun,
    Mrac,
    NoControl,
    Proportional,
    ScalarAdaptive,
    lyapunov_diagnostics,
    mrac_rates,
    mrac_u,
    proj,
    proportional_u,
    scalar_rates,
    simulate,
)
from orbit_tracer.ode import integrate
from orbit_tracer.signal import FourierSeries, VectorFourierSeries, synthesize_reference

from conftest import Q1_COS, Q1_SIN, Q2_COS, Q2_SIN

vec3 = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)
vec2 = st.lists(st.floats(-3, 3), min_size=2, max_size=2).map(np.array)


def qstar():
    return VectorFourierSeries((FourierSeries.from_terms(1.0, 5, 0.0, Q1_COS, Q1_SIN),
                                FourierSeries.from_terms(1.0, 5, 0.0, Q2_COS, Q2_SIN)))


def test_control_laws_vanish(duffing):
    q = np.array([0.4, -1.0])
    r = np.array([0.1, 0.3])
    assert proportional_u([1.0, 2.0, 3.0], 0.0, q, q, duffing.Q, 1.0) == 0.0
    assert proportional_u([0.0, 0.0, 0.0], 0.0, q, r, duffing.Q, 1.0) == 0.0
    assert mrac_u(np.zeros(3), 0.0, q, r, duffing.Q, 1.0) == 0.0
    assert mrac_u(np.ones(3), 0.0, q, q, duffing.Q, 1.0) == 0.0
    th = np.array([0.2, -0.1, 0.05])
    expected = -th @ (duffing.Q(0.0, q, 1.0) - duffing.Q(0.0, r, 1.0))
    assert mrac_u(th, 0.0, q, r, duffing.Q, 1.0) == pytest.approx(expected, abs=1e-15)


def _rates(p, th, xm, t, q, r, dr, Pb, **kw):
    return mrac_rates(th, xm, t, q, r, dr, p.Q, p.sigma, p.A, p.b, Pb, 1.0, 1.0, **kw)


def test_mrac_rates_zero_error(duffing):
    q = np.array([0.4, -1.0])
    r = np.array([0.1, 0.3])
    dth, _ = _rates(duffing, np.ones(3), q - r, 0.3, q, r, np.zeros(2), np.array([1 / 3, 5 / 3]))
    assert np.all(dth == 0.0)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, vec2, vec2, st.floats(0, 10))
def test_theta_cancellation_identity(theta, theta_hat, xm, r, t):
    # A x_m + b (theta_tilde^T Q(t,r)) + g(t) equals the implementable form
    p = pl.duffing(theta=tuple(theta))
    dr = np.array([0.7, -0.2])
    sig = p.sigma(t, 1.0)
    g = -dr + p.A @ r + p.b * (theta @ p.Q(t, r, 1.0) + sig)
    lhs = p.A @ xm + p.b * ((theta_hat - theta) @ p.Q(t, r, 1.0)) + g
    rhs = p.A @ xm + p.b * (theta_hat @ p.Q(t, r, 1.0) + sig) - dr + p.A @ r
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))
    _, dxm = _rates(p, theta_hat, xm, t, xm + r, r, dr, np.array([1 / 3, 5 / 3]))
    assert np.max(np.abs(dxm - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_closed_loop_field_matches_rates(duffing):
    r = qstar()
    loop = ClosedLoop(duffing, Mrac(Gamma=2.0), r)
    z = np.array([0.3, -0.2, 0.1, 0.05, 0.2, 0.1, -0.3])
    t = 0.7
    rr, dr = loop.ref(t)
    f = loop.field(t, z)
    dth, dxm = mrac_rates(z[4:], z[2:4], t, z[:2], rr, dr, duffing.Q, duffing.sigma, duffing.A,
                          duffing.b, loop.Pb, 2.0, 1.0)
    assert np.allclose(f[2:4], dxm, atol=1e-14) and np.allclose(f[4:], dth, atol=1e-14)
    u = mrac_u(z[4:], t, z[:2], rr, duffing.Q, 1.0)
    assert np.allclose(f[:2], duffing.rhs(t, z[:2], u), atol=1e-14)


def test_proj_examples():
    R, eps = 2.0, 0.1
    th_in = np.array([0.5, 0.5, 0.0])
    y = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(proj(th_in, y, R, eps), y)
    th_out = np.array([R * np.sqrt(1 + eps), 0.0, 0.0])
    out = proj(th_out, np.array([1.0, 0.5, 0.0]), R, eps)
    assert abs(th_out @ out) < 1e-14 and out[1] == 0.5
    assert np.array_equal(proj(th_out, np.array([-1.0, 0.2, 0.0]), R, eps), [-1.0, 0.2, 0.0])


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, st.floats(0.5, 5), st.floats(0.01, 1))
def test_proj_continuity(th, y, R, eps):
    d = 1e-7
    a = proj(th, y, R, eps)
    b = proj(th + d, y, R, eps)
    assert np.linalg.norm(a - b) < 1e-3 * (1 + np.linalg.norm(y)) * (1 + np.linalg.norm(th) / R) ** 2


@settings(max_examples=15, deadline=None)
@given(vec3.filter(lambda v: np.linalg.norm(v) > 0.1), st.floats(0.5, 3), st.floats(0.05, 0.5))
def test_proj_flow_stays_in_ball(direction, R, eps):
    y = 5 * direction / np.linalg.norm(direction)
    th0 = np.zeros(3)
    tr = integrate(lambda t, th: proj(th, y + np.array([np.sin(3 * t), 0, 0]), R, eps), th0, 0.0, 5.0)
    norms = np.linalg.norm(tr.states, axis=1)
    assert np.max(norms) <= R * np.sqrt(1 + eps) + 1e-8


def test_scalar_rates():
    assert scalar_rates(100.0, 0.0, 1.0) == 0.0
    assert np.all(scalar_rates(1.0, np.linspace(-2, 2, 9), 1.0) >= 0)


def test_mrac_settings_and_lyapunov(A_duff):
    with pytest.raises(ValueError, match="Gamma must be > 0"):
        Mrac(Gamma=-1.0)
    with pytest.raises(ValueError):
        Mrac(R=1.0)
    P, S = Mrac().lyapunov_matrices(A_duff)
    assert np.allclose(P, [[8 / 3, 1 / 3], [1 / 3, 5 / 3]])
    assert np.max(np.abs(P @ A_duff + A_duff.T @ P + S)) <= 1e-9
    with pytest.raises(ValueError):
        ScalarAdaptive(Gamma=0.0)


def test_zero_controller_is_open_loop(duffing):
    loop = ClosedLoop(duffing, NoControl(), qstar())
    z = np.array([0.3, -0.4])
    assert np.array_equal(loop.field(1.1, z), duffing.open_loop_field()(1.1, z))
    assert loop.control(1.1, z) == 0.0


def test_initial_state_sets_zero_prediction_error(duffing):
    loop = ClosedLoop(duffing, Mrac(), qstar())
    z0 = loop.initial_state(np.array([0.2, 0.1]))
    assert np.allclose(loop.prediction_error(0.0, z0), 0.0)
    assert np.array_equal(z0[4:], np.zeros(3))
    assert set(loop.split(z0)) == {"q", "x_m", "theta_hat"}


def test_dimension_mismatch(duffing):
    r1 = VectorFourierSeries((FourierSeries(1.0),))
    with pytest.raises(ValueError):
        ClosedLoop(duffing, Mrac(), r1)
    with pytest.raises(ValueError):
        ClosedLoop(duffing, ScalarAdaptive(), qstar())
    with pytest.raises(ValueError):
        ClosedLoop(pl.scalar_sine(), Mrac(), r1)


def test_proportional_with_true_gain_tracks(duffing):
    loop = ClosedLoop(duffing, Proportional(tuple(duffing.theta)), qstar())
    run = simulate(loop, loop.initial_state(np.array([-0.9, 3.0])), 0.0, 60.0, 0.05)
    last = run.t > 60.0 - 2 * np.pi
    # residual mismatch is the 5-harmonic truncation of the printed orbit
    assert np.max(np.linalg.norm(run.x[last], axis=1)) < 5e-3
    assert np.max(np.abs(run.u[last])) < 5e-3


def test_noninvasive_on_exact_orbit():
    # linear plant: the resolvent gives the exact periodic orbit
    p = pl.linear_oscillator(omega=2.0)
    Aeff = p.A + np.outer(p.b, p.theta)
    r = synthesize_reference(FourierSeries.from_terms(2.0, sin={1: 1.0}), Aeff, p.b)
    r = synthesize_reference(FourierSeries(2.0, *_generator_of(r, p)), p.A, p.b)
    loop = ClosedLoop(p, Mrac(), r)
    z0 = loop.initial_state(r.eval(0.0), theta_hat0=np.array([0.3, -0.2]))
    T = np.pi
    run = simulate(loop, z0, 0.0, 100 * T, 0.1)
    assert np.max(np.abs(run.u[run.t > 99 * T])) < 1e-4


def _generator_of(r, p):
    from orbit_tracer.continuation import generator_from_reference

    v = generator_from_reference(r, p.A, p.b)
    return v.a0, v.a, v.b


def test_run_fields_and_csv(duffing):
    loop = ClosedLoop(duffing, Mrac(), qstar())
    run = simulate(loop, loop.initial_state(np.zeros(2)), 0.0, 2.0, 0.5)
    assert np.all(np.diff(run.t) > 0)
    r = qstar().eval(run.t).T
    e = run.z[:, 2:4] - (run.q - r)
    assert np.max(np.abs(e - run.e)) < 1e-12
    diag = lyapunov_diagnostics(run, duffing.theta, loop.P, 1.0)
    header = run.to_csv().splitlines()[0]
    assert header == "t,q0,q1,xm0,xm1,theta_hat0,theta_hat1,theta_hat2,u,e_norm,V"
    assert diag["R"] == pytest.approx(np.linalg.norm(duffing.theta))


def test_diagnostics_zero_when_exact(duffing):
    n = 5
    theta = duffing.theta
    run = ClosedLoopRun(np.arange(n, dtype=float), np.zeros((n, 7)), np.zeros(n), np.zeros((n, 2)),
                        np.zeros((n, 2)), e=np.zeros((n, 2)), theta_hat=np.tile(theta, (n, 1)))
    diag = lyapunov_diagnostics(run, theta, np.eye(2), 1.0)
    assert np.all(diag["V"] == 0.0)
    assert diag["e_within"] and diag["theta_within"]
