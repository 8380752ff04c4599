"""Plant models: structured matched-uncertainty systems and scalar systems.

A plant carries two kinds of information. The *known* part (``A``, ``b``,
the regressor ``Q``, the forcing ``sigma``) is what a controller may use. The
unknown coefficients live in a sealed :class:`Truth` record that only
diagnostics should open; the physical right-hand side captures them in a
closure at construction so that simulating the plant never goes through the
sealed record.

All callables take a trailing ``omega`` argument and broadcast over a batch
axis: ``q`` may be ``(n,)`` or ``(n, B)``, and ``t``/``omega`` scalars or
``(B,)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .numkit import hurwitz_check
from .signal import VectorFourierSeries

__all__ = [
    "ModelFreeViolation",
    "Truth",
    "TrappedTruth",
    "Disturbance",
    "StructuredPlant",
    "ScalarPlant",
    "duffing",
    "scalar_sine",
    "beam_2dof",
    "linear_oscillator",
    "true_forcing_g",
    "with_disturbance",
    "periodic_disturbance",
    "nonperiodic_disturbance",
]


class ModelFreeViolation(RuntimeError):
    """Something read the hidden plant parameters where it must not."""


class Truth:
    """Sealed holder of hidden plant parameters."""

    __slots__ = ("_values",)

    def __init__(self, **values):
        object.__setattr__(self, "_values", dict(values))

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __setattr__(self, name, value):
        raise AttributeError("Truth is read-only")


class TrappedTruth(Truth):
    """A truth record that raises on any access."""

    __slots__ = ()

    def __getattr__(self, name):
        raise ModelFreeViolation(f"hidden plant parameter '{name}' was accessed")


@dataclass(frozen=True)
class Disturbance:
    """Additive disturbance ``h(t, q)`` with declared uniform bound ``h_b``."""

    h: Callable
    h_b: float
    periodic: bool = False
    label: str = ""
    # (channel, amplitude, c_abs, c_rel, phase) when h is the single wave
    # amplitude * sin(c_abs t + c_rel omega t + phase) on one channel
    wave: Optional[tuple] = None

    def check_bound(self, n, samples=256, q_scale=5.0, seed=0):
        rng = np.random.default_rng(seed)
        ts = rng.uniform(0, 100, samples)
        worst = 0.0
        for t in ts:
            q = rng.uniform(-q_scale, q_scale, n)
            worst = max(worst, float(np.linalg.norm(self.h(t, q))))
        return worst <= self.h_b * (1 + 1e-12)


def _spot_check_periodic(func, omega, n, seed=0, label="function"):
    """Compare ``func`` at t and t + T for 16 random (t, q)."""
    rng = np.random.default_rng(seed)
    T = 2 * np.pi / omega
    for _ in range(16):
        t = rng.uniform(0, 10 * T)
        q = rng.normal(size=n)
        v0 = np.asarray(func(t, q))
        v1 = np.asarray(func(t + T, q))
        if np.max(np.abs(v0 - v1)) > 1e-12 * max(1.0, np.max(np.abs(v0))) * 10 * (1 + t):
            raise ValueError(f"{label} is not periodic with period 2*pi/omega")


class StructuredPlant:
    """``q' = A q + b (u + theta^T Q(t, q) + sigma(t)) [+ h(t, q)]``.

    Parameters
    ----------
    A, b : array_like
        Known Hurwitz state matrix and input vector.
    Q : callable
        ``Q(t, q, omega)`` known regressor, shape ``(m, ...)``.
    Q_jac : callable
        ``Q_jac(t, q, omega)`` returning the ``(m, n)`` Jacobian of ``Q``
        (single state only); used for Floquet analysis.
    sigma : callable
        ``sigma(t, omega)`` known periodic forcing.
    theta : array_like
        Hidden coefficient vector.
    omega : float
        Forcing frequency.
    monomials : array_like, optional
        ``(m, n)`` integer exponents when ``Q_j = prod_i q_i**monomials[j, i]``
        (time independent). Together with ``sine_forcing`` this lets the
        compiled experiment kernel run the plant.
    sine_forcing : float, optional
        Amplitude ``F`` when ``sigma = F sin(omega t)``.
    """

    kind = "structured"

    def __init__(self, A, b, Q, Q_jac, sigma, theta, omega, *, name="custom",
                 params=None, disturbance: Optional[Disturbance] = None,
                 truth: Optional[Truth] = None, check=True, monomials=None,
                 sine_forcing=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.n = self.A.shape[0]
        if self.A.shape != (self.n, self.n) or self.b.size != self.n:
            raise ValueError("StructuredPlant: A must be n x n and b length n")
        if not omega > 0:
            raise ValueError("StructuredPlant: omega must be positive")
        self.Q = Q
        self.Q_jac = Q_jac
        self.sigma = sigma
        self.omega = float(omega)
        self.name = name
        self.params = dict(params or {})
        self.disturbance = disturbance
        self.monomials = None if monomials is None else np.asarray(monomials, dtype=np.int64)
        self.sine_forcing = None if sine_forcing is None else float(sine_forcing)
        theta = np.asarray(theta, dtype=float).reshape(-1)
        self.m = int(np.asarray(Q(0.0, np.zeros(self.n), self.omega)).shape[0])
        if theta.size != self.m:
            raise ValueError("StructuredPlant: theta length must match Q")
        self._truth = truth if truth is not None else Truth(theta=theta)
        self._rhs = self._make_rhs(theta)
        if check:
            if not hurwitz_check(self.A):
                raise ValueError("StructuredPlant: A is not Hurwitz")
            _spot_check_periodic(lambda t, q: Q(t, q, self.omega), self.omega, self.n, label="Q")
            _spot_check_periodic(lambda t, q: sigma(t, self.omega), self.omega, self.n, label="sigma")

    def _make_rhs(self, theta):
        A, b, Q, sigma = self.A, self.b, self.Q, self.sigma
        dist = self.disturbance

        def rhs(t, q, u, omega):
            s = u + theta @ Q(t, q, omega) + sigma(t, omega)
            dq = A @ q + np.multiply.outer(b, s)
            if dist is not None:
                dq = dq + dist.h(t, q)
            return dq

        def physics():
            # the same right-hand side as plain data, for the compiled kernel
            if self.monomials is None or self.sine_forcing is None:
                return None
            if dist is None:
                wave = np.zeros(5)
                wave[0] = -1.0
            elif dist.wave is not None:
                wave = np.asarray(dist.wave, dtype=float)
            else:
                return None
            return theta.copy(), wave

        self._physics = physics
        return rhs

    @property
    def period(self):
        return 2 * np.pi / self.omega

    @property
    def truth(self) -> Truth:
        """Ground truth; diagnostics only."""
        return self._truth

    @property
    def theta(self):
        return self._truth.theta

    def rhs(self, t, q, u, omega=None):
        return self._rhs(t, q, u, self.omega if omega is None else omega)

    def open_loop_field(self, omega=None):
        w = self.omega if omega is None else omega
        return lambda t, q: self._rhs(t, q, 0.0, w)

    def jacobian(self, t, q, omega=None):
        """State Jacobian of the uncontrolled field (reads the hidden theta)."""
        w = self.omega if omega is None else omega
        return self.A + np.outer(self.b, self.theta @ self.Q_jac(t, q, w))

    def at(self, omega):
        """Same plant at another forcing frequency."""
        new = self._clone()
        new.omega = float(omega)
        return new

    def trapped(self):
        """Copy whose hidden section raises on access (simulation still works)."""
        new = self._clone()
        new._truth = TrappedTruth()
        return new

    def _clone(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        return new

    def __repr__(self):
        return f"StructuredPlant(name={self.name!r}, n={self.n}, m={self.m}, omega={self.omega:g})"


class ScalarPlant:
    """``q' = a q + b (k q + f(t, q) + sigma(t) + u)`` with hidden ``k`` and ``f``."""

    kind = "scalar"

    def __init__(self, a, b_s, f, sigma, k_true, omega, f_b, *, name="custom",
                 params=None, check=True):
        if not a < 0:
            raise ValueError("ScalarPlant: a must be negative")
        if b_s == 0:
            raise ValueError("ScalarPlant: b must be nonzero")
        if not omega > 0:
            raise ValueError("ScalarPlant: omega must be positive")
        self.a = float(a)
        self.b_s = float(b_s)
        self.sigma = sigma
        self.omega = float(omega)
        self.f_b = float(f_b)
        self.name = name
        self.params = dict(params or {})
        self.n = 1
        self.A = np.array([[self.a]])
        self.b = np.array([self.b_s])
        self._truth = Truth(k=float(k_true), f=f)
        self._rhs = self._make_rhs(float(k_true), f)
        if check:
            rng = np.random.default_rng(0)
            ts = rng.uniform(0, 50, 64)
            qs = rng.uniform(-10, 10, 64)
            if np.max(np.abs(f(ts, qs, self.omega))) > self.f_b * (1 + 1e-12):
                raise ValueError("ScalarPlant: |f| exceeds the declared bound f_b")
            _spot_check_periodic(lambda t, q: sigma(t, self.omega), self.omega, 1, label="sigma")

    def _make_rhs(self, k, f):
        a, bs, sigma = self.a, self.b_s, self.sigma

        def rhs(t, q, u, omega):
            return a * q + bs * (k * q + f(t, q, omega) + sigma(t, omega) + u)

        return rhs

    @property
    def period(self):
        return 2 * np.pi / self.omega

    @property
    def truth(self):
        return self._truth

    @property
    def k_true(self):
        return self._truth.k

    def rhs(self, t, q, u, omega=None):
        return self._rhs(t, q, u, self.omega if omega is None else omega)

    def open_loop_field(self, omega=None):
        w = self.omega if omega is None else omega
        return lambda t, q: self._rhs(t, q, 0.0, w)

    def jacobian(self, t, q, omega=None, h=1e-7):
        # f is unmodeled, so differentiate the true field numerically
        w = self.omega if omega is None else omega
        q = np.asarray(q, dtype=float)
        d = (self._rhs(t, q + h, 0.0, w) - self._rhs(t, q - h, 0.0, w)) / (2 * h)
        return np.atleast_2d(d)

    at = StructuredPlant.at
    trapped = StructuredPlant.trapped
    _clone = StructuredPlant._clone

    def __repr__(self):
        return f"ScalarPlant(name={self.name!r}, a={self.a:g}, b={self.b_s:g}, omega={self.omega:g})"


def _sin_forcing(amplitude):
    def sigma(t, omega):
        return amplitude * np.sin(omega * t)

    return sigma


def duffing(omega=1.0, forcing=1.0, theta=(0.5, 0.4, -0.04), A=((0.0, 1.0), (-1.5, -0.5))):
    """Harmonically forced Duffing oscillator with unknown damping, stiffness
    and cubic coefficients."""

    def Q(t, q, omega):
        return np.array([q[0], q[1], q[0] ** 3])

    def Q_jac(t, q, omega):
        return np.array([[1.0, 0.0], [0.0, 1.0], [3.0 * q[0] ** 2, 0.0]])

    return StructuredPlant(
        np.array(A), np.array([0.0, 1.0]), Q, Q_jac, _sin_forcing(forcing), theta, omega,
        name="duffing", params={"forcing": forcing, "theta": list(theta)},
        monomials=[[1, 0], [0, 1], [3, 0]], sine_forcing=forcing,
    )


def linear_oscillator(omega=1.0, forcing=1.0, A=((0.0, 1.0), (-1.5, -0.5)), theta=(0.5, 0.4)):
    """Duffing without the cubic term: ``Q = q``; used as an analytic check."""

    def Q(t, q, omega):
        return q[:2]

    def Q_jac(t, q, omega):
        return np.eye(2)

    return StructuredPlant(
        np.array(A), np.array([0.0, 1.0]), Q, Q_jac, _sin_forcing(forcing), theta, omega,
        name="linear", params={"forcing": forcing, "theta": list(theta)},
        monomials=[[1, 0], [0, 1]], sine_forcing=forcing,
    )


def scalar_sine(omega=1.0, forcing=1.0):
    """``q' = -q + sin q + sin(omega t) + u``."""

    def f(t, q, omega):
        return np.sin(q)

    return ScalarPlant(-1.0, 1.0, f, _sin_forcing(forcing), 0.0, omega, 1.0,
                       name="scalar_sine", params={"forcing": forcing})


def beam_2dof(m1, m2, k01_lin, k12, k02, c01, c12, c02,
              k01_nlin=0.0, kpe_lin=0.0, kpe_nlin=0.0, omega=1.0):
    """Two lumped masses on a cantilever with a parametric, cubic restoring
    force on the first mass. ``omega`` is the parametric excitation frequency.

    State ordering is ``(x1, v1, x2, v2)``.
    """
    if m1 <= 0 or m2 <= 0:
        raise ValueError("beam_2dof: masses must be positive")
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-(k01_lin + k12) / m1, -(c01 + c12) / m1, k12 / m1, c12 / m1],
        [0.0, 0.0, 0.0, 1.0],
        [k12 / m2, c12 / m2, -(k02 + k12) / m2, -(c02 + c12) / m2],
    ])
    b = np.array([0.0, 1.0, 0.0, 0.0])
    theta = -np.array([k01_nlin, kpe_lin, kpe_nlin]) / m1

    def Q(t, q, omega):
        c = np.cos(omega * t)
        x3 = q[0] ** 3
        return np.array([x3, q[0] * c, x3 * c])

    def Q_jac(t, q, omega):
        c = np.cos(omega * t)
        d = 3.0 * q[0] ** 2
        return np.array([[d, 0, 0, 0], [c, 0, 0, 0], [d * c, 0, 0, 0]], dtype=float)

    def sigma(t, omega):
        return np.zeros_like(np.asarray(omega * t, dtype=float))

    if not hurwitz_check(A):
        raise ValueError("beam_2dof: resulting A is not Hurwitz")
    params = dict(m1=m1, m2=m2, k01_lin=k01_lin, k12=k12, k02=k02, c01=c01, c12=c12,
                  c02=c02, k01_nlin=k01_nlin, kpe_lin=kpe_lin, kpe_nlin=kpe_nlin)
    return StructuredPlant(A, b, Q, Q_jac, sigma, theta, omega, name="beam_2dof", params=params)


def with_disturbance(plant: StructuredPlant, d: Disturbance) -> StructuredPlant:
    """Plant with the additive disturbance ``h(t, q)`` switched on."""
    h0 = np.asarray(d.h(0.0, np.zeros(plant.n)))
    if h0.shape[0] != plant.n:
        raise ValueError("with_disturbance: h must return an n-vector")
    new = plant._clone()
    new.disturbance = d
    new._rhs = StructuredPlant._make_rhs(new, plant._truth.theta)
    return new


def _channel_disturbance(n, channel, h_b, wave):
    def h(t, q):
        out = np.zeros(np.broadcast_shapes(np.shape(q), (n,) + np.shape(t)))
        out[channel] = h_b * wave(np.asarray(t, dtype=float))
        return out

    return h


def periodic_disturbance(h_b, omega, n=2, channel=1):
    """``h = h_b cos(2 omega t) e_channel``: periodic with the forcing period."""
    return Disturbance(_channel_disturbance(n, channel, h_b, lambda t: np.cos(2 * omega * t)),
                       h_b, periodic=True, label="periodic",
                       wave=(channel, h_b, 2 * omega, 0.0, np.pi / 2))


def nonperiodic_disturbance(h_b, n=2, channel=1):
    """``h = h_b sin(sqrt(2) t) e_channel``: incommensurate with any rational forcing."""
    return Disturbance(_channel_disturbance(n, channel, h_b, lambda t: np.sin(np.sqrt(2.0) * t)),
                       h_b, periodic=False, label="nonperiodic",
                       wave=(channel, h_b, np.sqrt(2.0), 0.0, 0.0))


@dataclass(frozen=True)
class ForcingReport:
    """``g(t)``: the residual forcing a reference leaves in the error dynamics."""

    func: Callable
    g_max: float
    is_zero: bool

    def __call__(self, t):
        return self.func(t)


def true_forcing_g(plant, r: VectorFourierSeries, samples=256) -> ForcingReport:
    """Forcing ``g = -r' + A r + b (theta^T Q(t, r) + sigma)`` (reads hidden truth).

    For a scalar plant the same expression reads
    ``g = (a + b k) r + b (f(t, r) + sigma) - r'``.
    """
    if abs(r.omega - plant.omega) > 1e-12 * plant.omega:
        raise ValueError("true_forcing_g: reference and plant periods differ")
    w = plant.omega
    if plant.kind == "structured":
        theta = plant.theta

        def g(t):
            rr = r.eval(t)
            s = np.tensordot(theta, plant.Q(t, rr, w), 1) + plant.sigma(t, w)
            return -r.eval_derivative(t) + plant.A @ rr + np.multiply.outer(plant.b, s)
    else:
        k, f = plant.truth.k, plant.truth.f

        def g(t):
            rr = r.eval(t)[0]
            val = (plant.a + plant.b_s * k) * rr + plant.b_s * (f(t, rr, w) + plant.sigma(t, w))
            return np.atleast_1d(val - r.eval_derivative(t)[0]) if np.ndim(t) == 0 else (
                val - r.eval_derivative(t)[0])[None, :]

    ts = r.period * np.arange(samples) / samples
    g_max = float(np.max(np.abs(g(ts))))
    return ForcingReport(g, g_max, g_max < 1e-8)
