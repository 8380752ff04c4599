"""Truncated Fourier series, periodic sampling, and excitation measures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numkit import eig_sym, solve_complex

__all__ = [
    "FourierSeries",
    "VectorFourierSeries",
    "PEReport",
    "dft_truncate",
    "dft_coefficients",
    "synthesize_reference",
    "simpson_weights",
    "pe_gram",
    "pe_running",
]


def _harmonic_phase(omega, t, K):
    """``k * omega * t`` for k = 1..K, shape (K, *t.shape)."""
    k = np.arange(1, K + 1).reshape((K,) + (1,) * np.ndim(t))
    return k * (omega * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class FourierSeries:
    """``a0 + sum_k a[k] cos(k w t) + b[k] sin(k w t)`` for k = 1..K."""

    omega: float
    a0: float = 0.0
    a: np.ndarray = field(default_factory=lambda: np.zeros(5))
    b: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if a.shape != b.shape or a.size < 1:
            raise ValueError("FourierSeries: a and b need the same length K >= 1")
        if not self.omega > 0:
            raise ValueError("FourierSeries: omega must be positive")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.isfinite(self.a0)):
            raise ValueError("FourierSeries: non-finite coefficient")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a0", float(self.a0))
        object.__setattr__(self, "omega", float(self.omega))

    @classmethod
    def from_terms(cls, omega, K=5, a0=0.0, cos=None, sin=None):
        """Build from ``{harmonic: coefficient}`` mappings."""
        a = np.zeros(K)
        b = np.zeros(K)
        for k, c in (cos or {}).items():
            a[k - 1] = c
        for k, c in (sin or {}).items():
            b[k - 1] = c
        return cls(omega, a0, a, b)

    @classmethod
    def from_vector(cls, coeffs, omega):
        """Inverse of :meth:`to_vector`: ``(a0, a1..aK, b1..bK)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        K = (coeffs.size - 1) // 2
        return cls(omega, coeffs[0], coeffs[1 : K + 1], coeffs[K + 1 :])

    @property
    def K(self):
        return self.a.size

    @property
    def period(self):
        return 2 * np.pi / self.omega

    def to_vector(self):
        return np.concatenate([[self.a0], self.a, self.b])

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        ph = _harmonic_phase(self.omega, t, self.K)
        return self.a0 + np.tensordot(self.a, np.cos(ph), 1) + np.tensordot(self.b, np.sin(ph), 1)

    def eval_derivative(self, t):
        ph = _harmonic_phase(self.omega, t, self.K)
        kw = self.omega * np.arange(1, self.K + 1)
        return np.tensordot(kw * self.b, np.cos(ph), 1) - np.tensordot(kw * self.a, np.sin(ph), 1)

    def scaled(self, c):
        return FourierSeries(self.omega, c * self.a0, c * self.a, c * self.b)

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_dict(self):
        return {
            "omega": _exact(self.omega),
            "a0": _exact(self.a0),
            "a": [_exact(v) for v in self.a],
            "b": [_exact(v) for v in self.b],
        }

    @classmethod
    def from_json(cls, text):
        d = json.loads(text) if isinstance(text, str) else text
        return cls(float(d["omega"]), float(d["a0"]), d["a"], d["b"])


def _exact(v):
    # 17 significant digits survive a decimal round trip
    return float(f"{float(v):.17g}")


@dataclass(frozen=True)
class VectorFourierSeries:
    """Vector of Fourier series sharing one frequency and truncation order."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("VectorFourierSeries: no components")
        w, K = comps[0].omega, comps[0].K
        if any(c.omega != w or c.K != K for c in comps):
            raise ValueError("VectorFourierSeries: components must share omega and K")
        object.__setattr__(self, "components", comps)

    @property
    def omega(self):
        return self.components[0].omega

    @property
    def K(self):
        return self.components[0].K

    @property
    def n(self):
        return len(self.components)

    @property
    def period(self):
        return 2 * np.pi / self.omega

    def coefficient_arrays(self):
        """``(a0 (n,), a (n, K), b (n, K))``."""
        return (
            np.array([c.a0 for c in self.components]),
            np.array([c.a for c in self.components]),
            np.array([c.b for c in self.components]),
        )

    def eval(self, t):
        return np.array([c.eval(t) for c in self.components])

    def eval_derivative(self, t):
        return np.array([c.eval_derivative(t) for c in self.components])

    def __getitem__(self, i):
        return self.components[i]


def dft_coefficients(samples, K):
    """Real DFT coefficients ``(a0, a1..aK, b1..bK)`` of uniform samples.

    ``samples`` has the sample index on axis 0; any further axes are carried
    through, so a batch of signals gives a ``(2K+1, ...)`` result.
    """
    u = np.asarray(samples, dtype=float)
    N = u.shape[0]
    if N < 4 * K + 4:
        raise ValueError(f"aliasing risk: {N} samples for order {K} (need >= {4 * K + 4})")
    ph = 2 * np.pi * np.outer(np.arange(1, K + 1), np.arange(N)) / N
    a0 = u.mean(axis=0, keepdims=True)
    a = (2.0 / N) * np.tensordot(np.cos(ph), u, 1)
    b = (2.0 / N) * np.tensordot(np.sin(ph), u, 1)
    return np.concatenate([a0, a, b], axis=0)


def dft_truncate(samples, K, omega) -> FourierSeries:
    """Fourier series of order ``K`` from ``N`` uniform samples of one period.

    Sample ``j`` is taken to sit at phase ``2 pi j / N``.
    """
    return FourierSeries.from_vector(dft_coefficients(samples, K), omega)


def synthesize_reference(v: FourierSeries, A, b) -> VectorFourierSeries:
    """Periodic ``r`` with ``r' = A r + b v(t)``, harmonic by harmonic.

    Each harmonic of ``r`` is the resolvent ``(i k w I - A)^{-1} b`` applied
    to the matching harmonic of ``v``; the constant term solves
    ``A r0 = -b a0``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    n = A.shape[0]
    K, w = v.K, v.omega
    r0 = np.real(solve_complex(-A, b * v.a0, harmonic=0))
    ra = np.zeros((n, K))
    rb = np.zeros((n, K))
    eye = np.eye(n)
    for k in range(1, K + 1):
        # v_k(t) = Re[(a_k - i b_k) e^{ikwt}]
        ck = v.a[k - 1] - 1j * v.b[k - 1]
        zk = solve_complex(1j * k * w * eye - A, b * ck, harmonic=k)
        ra[:, k - 1] = zk.real
        rb[:, k - 1] = -zk.imag
    comps = tuple(FourierSeries(w, r0[i], ra[i], rb[i]) for i in range(n))
    return VectorFourierSeries(comps)


@dataclass(frozen=True)
class PEReport:
    gram: np.ndarray
    alpha: float
    window_start: float = 0.0


def simpson_weights(M, T):
    """Composite Simpson weights for ``M`` (odd) uniform points over ``T``."""
    if M < 3 or M % 2 == 0:
        raise ValueError(f"Simpson quadrature needs an odd sample count, got {M}")
    w = np.ones(M)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (T / (M - 1) / 3.0)


def pe_gram(Q_samples, T, window_start=0.0) -> PEReport:
    """Gram matrix ``int Q Q^T dt`` over one window and its smallest eigenvalue.

    ``Q_samples`` has shape ``(M, m)`` with the ``M`` samples spanning the
    closed window ``[t, t+T]``.
    """
    Qs = np.asarray(Q_samples, dtype=float)
    if Qs.ndim == 1:
        Qs = Qs[:, None]
    M = Qs.shape[0]
    if M < 129:
        raise ValueError(f"pe_gram needs at least 129 samples, got {M}")
    w = simpson_weights(M, T)
    gram = (Qs * w[:, None]).T @ Qs
    gram = 0.5 * (gram + gram.T)
    alpha = float(eig_sym(gram)[0])
    return PEReport(gram, alpha, float(window_start))


def pe_running(Q_of_t, t_start, t_end, T, stride, n_samples=1025):
    """Sliding-window excitation level.

    ``Q_of_t`` maps an array of times to an ``(M, m)`` array of regressor
    values. Returns arrays ``(window_starts, alphas)``.
    """
    starts = np.arange(t_start, t_end - T + 1e-12, stride)
    alphas = np.empty(starts.size)
    for i, t in enumerate(starts):
        ts = t + np.linspace(0.0, T, n_samples)
        alphas[i] = pe_gram(Q_of_t(ts), T, t).alpha
    return starts, alphas
