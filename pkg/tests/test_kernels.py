"""The compiled closed-loop route against the numpy reference route."""

import numpy as np
import pytest

from orbit_tracer import _kernels
from orbit_tracer import plant as pl
from orbit_tracer.continuation import Experiment, generator_from_reference, xi_from_generator
from orbit_tracer.control import ClosedLoop, Mrac, ScalarAdaptive, simulate
from orbit_tracer.signal import FourierSeries, VectorFourierSeries

from conftest import Q1_COS, Q1_SIN, Q2_COS, Q2_SIN

pytestmark = pytest.mark.skipif(not _kernels.available(), reason="numba not installed")


def qstar():
    return VectorFourierSeries((FourierSeries.from_terms(1.0, 5, 0.0, Q1_COS, Q1_SIN),
                                FourierSeries.from_terms(1.0, 5, 0.0, Q2_COS, Q2_SIN)))


def test_support_detection():
    assert _kernels.mrac_supported(pl.duffing(), Mrac())
    assert _kernels.mrac_supported(pl.linear_oscillator(), Mrac(R=2.0, eps=0.1))
    assert not _kernels.mrac_supported(pl.scalar_sine(), ScalarAdaptive())
    beam = pl.beam_2dof(1.0, 1.0, 2.0, 1.0, 2.0, 0.1, 0.1, 0.1, kpe_lin=0.3)
    assert not _kernels.mrac_supported(beam, Mrac())
    custom = pl.with_disturbance(pl.duffing(), pl.Disturbance(lambda t, q: np.zeros(2), 0.0))
    assert not _kernels.mrac_supported(custom, Mrac())


@pytest.mark.parametrize("plant, ctrl", [
    (pl.duffing(), Mrac()),
    (pl.duffing(), Mrac(Gamma=3.0, R=0.6, eps=0.2)),
    (pl.with_disturbance(pl.duffing(), pl.periodic_disturbance(0.1, 1.0)), Mrac(R=10.0, eps=0.1)),
    (pl.with_disturbance(pl.duffing(), pl.nonperiodic_disturbance(0.1)), Mrac()),
])
def test_simulate_routes_agree(plant, ctrl):
    loop = ClosedLoop(plant, ctrl, qstar())
    z0 = loop.initial_state(np.array([0.3, -0.2]), theta_hat0=np.array([0.1, 0.2, 0.0]))
    a = simulate(loop, z0, 0.0, 20.0, 0.25)
    b = simulate(loop, z0, 0.0, 20.0, 0.25, accelerate=False)
    assert a.meta["compiled"] and not b.meta["compiled"]
    # the compiled route steps in phase time, the numpy one in physical time,
    # so agreement is at the integration tolerance rather than rounding level
    scale = np.max(np.abs(b.z), axis=0) + 1e-3
    assert np.max(np.abs(a.z - b.z) / scale) < 1e-5
    assert np.max(np.abs(a.meta["traj"]([7.3, 1.1]) - b.meta["traj"]([7.3, 1.1])) / scale) < 1e-5


def test_experiment_routes_agree():
    p = pl.duffing()
    xi = xi_from_generator(generator_from_reference(qstar(), p.A, p.b))
    xis = np.repeat(xi[:, None], 3, axis=1)
    xis[1, 1] += 1e-3
    xis[-1, 2] += 0.01
    warm = np.concatenate([qstar().eval(0.0), np.zeros(2), [0.4, 0.3, 0.0]])
    fast = Experiment(p, Mrac())
    slow = Experiment(p, Mrac(), accelerate=False)
    assert fast.compiled and not slow.compiled
    Fa, Za = fast.run(xis, warm)
    Fb, Zb = slow.run(xis, warm)
    assert np.max(np.abs(Fa - Fb)) < 1e-9
    assert np.max(np.abs(Za - Zb)) < 1e-8


def test_kernel_reports_blowup():
    p = pl.duffing(theta=(40.0, 5.0, 2.0))
    loop = ClosedLoop(p, Mrac(), qstar())
    z0 = loop.initial_state(np.array([5.0, 0.0]))
    from orbit_tracer.ode import IntegrationError, IntegratorConfig

    with pytest.raises(IntegrationError):
        simulate(loop, z0, 0.0, 50.0, 1.0, IntegratorConfig(h_min=1e-6))
