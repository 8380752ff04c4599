import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbit_tracer.ode import (
    IntegrationError,
    IntegratorConfig,
    integrate,
    integrate_fixed,
    monodromy,
    sample_period,
)


def test_config_defaults_and_invariants():
    c = IntegratorConfig()
    assert (c.rtol, c.atol) == (1e-8, 1e-10)
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(h_min=1.0, h_init=0.1)


def test_exponential_decay():
    tr = integrate(lambda t, y: -y, np.array([1.0]), 0.0, 1.0)
    assert tr.t1 == 1.0
    assert abs(tr.y_final[0] - np.exp(-1.0)) < 1e-7


def test_rotation_period():
    R = np.array([[0.0, 1.0], [-1.0, 0.0]])
    tr = integrate(lambda t, y: R @ y, np.array([1.0, 0.0]), 0.0, 2 * np.pi)
    assert np.allclose(tr.y_final, [1.0, 0.0], atol=1e-6)


def test_times_increasing_and_endpoints_exact():
    tr = integrate(lambda t, y: np.cos(t) * y, np.array([1.0, 2.0]), 0.0, 7.3)
    assert np.all(np.diff(tr.times) > 0)
    assert np.array_equal(tr(tr.times), tr.states)
    assert np.all(np.isfinite(tr.states))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_raises():
    with pytest.raises(IntegrationError, match="stiffness/blowup"):
        integrate(lambda t, y: y * y, np.array([1.0]), 0.0, 2.0)


def test_max_steps_raises():
    with pytest.raises(IntegrationError, match="max_steps"):
        integrate(lambda t, y: -y, np.array([1.0]), 0.0, 100.0, IntegratorConfig(max_steps=5, h_max=0.1))


def test_order_five_scaling():
    errs = []
    for h in (0.1, 0.05, 0.025):
        y = integrate_fixed(lambda t, y: -y, np.array([1.0]), 0.0, 1.0, h)
        errs.append(abs(y[0] - np.exp(-1.0)))
    for e0, e1 in zip(errs, errs[1:]):
        assert abs(e0 / e1 / 32 - 1) < 0.2


def test_dense_output_consistency():
    f = lambda t, y: np.array([y[1], -y[0] - 0.1 * y[1] + np.sin(1.3 * t)])
    cfg = IntegratorConfig()
    tr = integrate(f, np.array([1.0, 0.0]), 0.0, 10.0, cfg)
    for i in range(0, tr.n_steps, 7):
        t0, t1 = tr.times[i], tr.times[i + 1]
        tm = 0.5 * (t0 + t1)
        ref = integrate(f, tr.states[i], t0, tm, IntegratorConfig(rtol=1e-12, atol=1e-14)).y_final
        tol = 10 * (cfg.atol + cfg.rtol * np.linalg.norm(ref))
        assert np.linalg.norm(tr(tm) - ref) <= tol


def test_batched_columns_match_single_runs():
    f = lambda t, y: -np.array([1.0, 2.0])[:, None] * y if y.ndim == 2 else -np.array([1.0, 2.0]) * y
    Y = integrate(f, np.ones((2, 3)) * np.array([1.0, 2.0, 3.0]), 0.0, 1.0).y_final
    assert np.allclose(Y[:, 2], [3 * np.exp(-1), 3 * np.exp(-2)], atol=1e-8)


def test_sample_period_constant_and_decay():
    s, y_end = sample_period(lambda t, y: np.zeros_like(y), np.array([2.5]), 0.0, 1.0, 16)
    assert np.all(s == 2.5) and y_end[0] == 2.5
    T, N = 2.0, 32
    s, _ = sample_period(lambda t, y: -y, np.array([1.0]), 0.0, T, N)
    ratios = s[1:, 0] / s[:-1, 0]
    assert np.allclose(ratios, np.exp(-T / N), rtol=1e-7)


def test_monodromy_linear_cases():
    Phi = monodromy(lambda t: -np.eye(2), 1.0, 2)
    assert np.allclose(Phi, np.exp(-1) * np.eye(2), atol=1e-9)
    Phi = monodromy(lambda t: np.array([[0.0, 1.0], [-1.0, 0.0]]), 2 * np.pi, 2)
    assert np.allclose(Phi, np.eye(2), atol=1e-7)


def _expm(M):
    # scaling and squaring with a Taylor core, independent of the integrator
    s = max(0, int(np.ceil(np.log2(max(np.linalg.norm(M, 1), 1e-16)))) + 1)
    X = M / 2**s
    E = np.eye(len(M))
    term = np.eye(len(M))
    for k in range(1, 20):
        term = term @ X / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=4, max_size=4), st.floats(0.5, 3.0))
def test_monodromy_equals_matrix_exponential(vals, T):
    A = np.array(vals).reshape(2, 2)
    Phi = monodromy(lambda t: A, T, 2)
    E = _expm(A * T)
    assert np.allclose(Phi, E, atol=1e-8 * max(1.0, np.max(np.abs(E))))


def test_csv_export(tmp_path):
    tr = integrate(lambda t, y: -y, np.array([1.0, 2.0]), 0.0, 0.5)
    text = tr.to_csv(tmp_path / "t.csv")
    lines = text.splitlines()
    assert lines[0] == "t,y0,y1"
    assert float(lines[-1].split(",")[0]) == 0.5
    assert repr(float(lines[1].split(",")[1])) == repr(1.0)


def test_rejects_backward_interval():
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, np.array([1.0]), 1.0, 0.0)
