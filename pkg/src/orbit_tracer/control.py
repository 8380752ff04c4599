"""Controllers and closed-loop assembly.

Closed-loop fields act on an augmented state ``z``:

* no control / proportional: ``z = q``
* model-reference adaptive: ``z = (q, x_m, theta_hat)``
* scalar adaptive gain: ``z = (q, k_hat)``

Fields broadcast over a trailing batch axis, the same way plant callables do,
which lets a whole set of reference perturbations run as one integration.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .numkit import eig_sym, solve_lyapunov
from .ode import IntegratorConfig, integrate
from .signal import VectorFourierSeries

__all__ = [
    "NoControl",
    "Proportional",
    "Mrac",
    "ScalarAdaptive",
    "Reference",
    "ClosedLoop",
    "ClosedLoopRun",
    "proportional_u",
    "mrac_u",
    "mrac_rates",
    "proj",
    "scalar_rates",
    "assemble_closed_loop",
    "simulate",
    "lyapunov_diagnostics",
]


def _dot(v, w):
    """Inner product over axis 0, keeping any batch axes."""
    if v.ndim == 1 and w.ndim == 1:
        return v @ w
    return (v * w).sum(0)


# -- control laws ------------------------------------------------------------


def proportional_u(k, t, q, r, Q, omega):
    """``u = -k^T (Q(t, q) - Q(t, r))``."""
    k = np.asarray(k, dtype=float)
    k = k.reshape(k.shape + (1,) * (np.ndim(q) - 1))
    return -_dot(k, Q(t, q, omega) - Q(t, r, omega))


def mrac_u(theta_hat, t, q, r, Q, omega):
    """Adaptive version of :func:`proportional_u` with ``k = theta_hat(t)``."""
    return -_dot(theta_hat, Q(t, q, omega) - Q(t, r, omega))


def proj(theta_hat, y, R, eps):
    """Smooth projection keeping ``theta_hat`` inside the ball of radius
    ``R * sqrt(1 + eps)``.

    The convex function ``f = (|th|^2 - R^2) / (eps R^2)`` is zero on the
    radius-``R`` sphere and one on the outer sphere; outward components of
    ``y`` are scaled down by ``f`` in between and removed at the outer sphere.
    """
    th = np.asarray(theta_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    nrm2 = _dot(th, th)
    f = (nrm2 - R * R) / (eps * R * R)
    radial = _dot(th, y)
    active = (f > 0) & (radial > 0)
    scale = np.where(active, f * radial / np.where(nrm2 > 0, nrm2, 1.0), 0.0)
    return y - scale * th


def scalar_rates(Gamma, x, b_s):
    """``dk_hat/dt = Gamma b x^2``."""
    return Gamma * b_s * x * x


# -- controllers -------------------------------------------------------------


@dataclass(frozen=True)
class NoControl:
    kind: str = field(default="none", init=False)


@dataclass(frozen=True)
class Proportional:
    k: tuple
    kind: str = field(default="proportional", init=False)


@dataclass(frozen=True)
class Mrac:
    """Model-reference adaptive controller settings.

    ``R``/``eps`` switch on the projection operator when both are given.
    """

    Gamma: float = 1.0
    S: Optional[np.ndarray] = None
    R: Optional[float] = None
    eps: Optional[float] = None
    theta_hat0: Optional[tuple] = None
    kind: str = field(default="mrac", init=False)

    def __post_init__(self):
        if not self.Gamma > 0:
            raise ValueError("Mrac: Gamma must be > 0")
        if (self.R is None) != (self.eps is None):
            raise ValueError("Mrac: projection needs both R and eps")
        if self.R is not None and not (self.R > 0 and self.eps > 0):
            raise ValueError("Mrac: R and eps must be positive")

    @property
    def projected(self):
        return self.R is not None

    def lyapunov_matrices(self, A):
        n = A.shape[0]
        S = np.eye(n) if self.S is None else np.asarray(self.S, dtype=float)
        return solve_lyapunov(A, S), S


@dataclass(frozen=True)
class ScalarAdaptive:
    Gamma: float = 1.0
    k_hat0: float = 0.0
    kind: str = field(default="scalar_adaptive", init=False)

    def __post_init__(self):
        if not self.Gamma > 0:
            raise ValueError("ScalarAdaptive: Gamma must be > 0")


def mrac_rates(theta_hat, x_m, t, q, r, dr, Q, sigma, A, b, Pb, Gamma, omega,
               R=None, eps=None):
    """Right-hand sides of the estimate and reference-model states.

    The reference model is written in its implementable form
    ``x_m' = A x_m + b (theta_hat^T Q(t, r) + sigma) - r' + A r``, which never
    needs the unknown coefficients.
    """
    e = x_m - (q - r)
    ePb = Pb @ e
    y = -ePb * Q(t, q, omega)
    if R is not None:
        y = proj(theta_hat, y, R, eps)
    dth = Gamma * y
    s = _dot(theta_hat, Q(t, r, omega)) + sigma(t, omega)
    dxm = A @ x_m + np.multiply.outer(b, s) - dr + A @ r
    return dth, dxm


# -- references --------------------------------------------------------------


class Reference:
    """Coefficient arrays of a (possibly batched) vector Fourier series.

    ``a0`` is ``(n, *B)``, ``a``/``b`` are ``(n, K, *B)``, ``omega`` is a scalar
    or ``(B,)``. Calling the reference returns ``(r(t), r'(t))``.
    """

    def __init__(self, a0, a, b, omega):
        a0 = np.asarray(a0, dtype=float)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        self.batched = self.omega.ndim == 1
        self.n, self.K = a.shape[:2]
        self._k = np.arange(1, self.K + 1, dtype=float)
        self._kk = np.concatenate([[0.0], self._k, self._k])
        self._shift = np.concatenate([np.zeros(self.K + 1), np.full(self.K, np.pi / 2)])
        kw = self._k.reshape((self.K,) + (1,) * self.omega.ndim) * self.omega
        # rows: r then r'; columns: 1, cos(k w t), sin(k w t)
        top = np.concatenate([a0[:, None], a, b], axis=1)
        bot = np.concatenate([np.zeros_like(a0)[:, None], b * kw, -a * kw], axis=1)
        self._C = np.concatenate([top, bot], axis=0)
        if self.batched:
            self._C = np.ascontiguousarray(np.moveaxis(self._C, -1, 0))  # (B, 2n, 1+2K)

    @classmethod
    def from_series(cls, r: VectorFourierSeries):
        return cls(*r.coefficient_arrays(), r.omega)

    @classmethod
    def stack(cls, refs):
        arrs = [r.coefficient_arrays() for r in refs]
        return cls(
            np.stack([x[0] for x in arrs], axis=-1),
            np.stack([x[1] for x in arrs], axis=-1),
            np.stack([x[2] for x in arrs], axis=-1),
            np.array([r.omega for r in refs]),
        )

    def __call__(self, t):
        # one cosine call: sin(x) = cos(x - pi/2)
        ph = np.multiply.outer(self._kk, self.omega * t)
        basis = np.cos(ph - self._shift.reshape((-1,) + (1,) * (ph.ndim - 1)))
        if self.batched:
            out = np.einsum("bij,jb->ib", self._C, basis)
        else:
            out = self._C @ basis
        return out[: self.n], out[self.n :]


# -- closed loop -------------------------------------------------------------


class ClosedLoop:
    """Plant, controller and reference wired into one augmented field.

    The field only uses the plant's known quantities plus its black-box
    right-hand side; it never opens the sealed truth record.
    """

    def __init__(self, plant, controller, reference, omega=None):
        self.plant = plant
        self.controller = controller
        if isinstance(reference, VectorFourierSeries):
            reference = Reference.from_series(reference)
        self.ref = reference
        self.omega = plant.omega if omega is None else omega
        self.n = plant.n
        if reference.n != plant.n:
            raise ValueError(f"closed loop: reference has {reference.n} components, plant {plant.n}")
        kind = controller.kind
        if kind in ("mrac", "proportional") and plant.kind != "structured":
            raise ValueError(f"closed loop: {kind} control needs a structured plant")
        if kind == "scalar_adaptive" and plant.kind != "scalar":
            raise ValueError("closed loop: scalar adaptive control needs a scalar plant")
        if kind == "mrac":
            self.m = plant.m
            self.P, self.S = controller.lyapunov_matrices(plant.A)
            self.Pb = self.P @ plant.b
            self.dim = 2 * self.n + self.m
        elif kind == "scalar_adaptive":
            self.dim = 2
        elif kind == "proportional":
            k = np.asarray(controller.k, dtype=float)
            if k.size != plant.m:
                raise ValueError("closed loop: proportional gain length must match Q")
            self.dim = self.n
        else:
            self.dim = self.n

    # state layout
    def split(self, z):
        n = self.n
        kind = self.controller.kind
        if kind == "mrac":
            return {"q": z[:n], "x_m": z[n:2 * n], "theta_hat": z[2 * n:]}
        if kind == "scalar_adaptive":
            return {"q": z[:1], "k_hat": z[1]}
        return {"q": z[:n]}

    def initial_state(self, q0, theta_hat0=None, k_hat0=None, t0=0.0):
        """Augmented state with ``x_m(0) = q(0) - r(0)`` so that ``e(0) = 0``."""
        q0 = np.asarray(q0, dtype=float)
        kind = self.controller.kind
        if kind == "mrac":
            r0, _ = self.ref(t0)
            if theta_hat0 is None:
                th = self.controller.theta_hat0
                theta_hat0 = np.zeros(self.m) if th is None else th
            theta_hat0 = np.asarray(theta_hat0, dtype=float)
            if q0.ndim > 1 and theta_hat0.ndim == 1:
                theta_hat0 = np.repeat(theta_hat0[:, None], q0.shape[1], axis=1)
            return np.concatenate([q0, q0 - r0, theta_hat0], axis=0)
        if kind == "scalar_adaptive":
            k0 = self.controller.k_hat0 if k_hat0 is None else k_hat0
            k0 = np.asarray(k0, dtype=float) * np.ones(q0.shape[1:])
            return np.concatenate([q0, k0[None]], axis=0)
        return q0.copy()

    def control(self, t, z):
        """Control input ``u`` at the state ``z``."""
        p = self.plant
        w = self.omega
        kind = self.controller.kind
        if kind == "none":
            return np.zeros(np.shape(z)[1:])
        r, _ = self.ref(t)
        n = self.n
        q = z[:n]
        if kind == "mrac":
            return mrac_u(z[2 * n:], t, q, r, p.Q, w)
        if kind == "proportional":
            return proportional_u(self.controller.k, t, q, r, p.Q, w)
        return -z[1] * (z[0] - r[0])

    def field(self, t, z):
        p = self.plant
        w = self.omega
        kind = self.controller.kind
        n = self.n
        if kind == "none":
            return p.rhs(t, z, 0.0, w)
        r, dr = self.ref(t)
        q = z[:n]
        if kind == "mrac":
            xm = z[n:2 * n]
            th = z[2 * n:]
            Qq = p.Q(t, q, w)
            Qr = p.Q(t, r, w)
            thQr = _dot(th, Qr)
            u = thQr - _dot(th, Qq)
            dq = p.rhs(t, q, u, w)
            c = self.controller
            # same expressions as mrac_rates, with Q(t, q) and Q(t, r) shared
            y = -(self.Pb @ (xm - q + r)) * Qq
            if c.R is not None:
                y = proj(th, y, c.R, c.eps)
            A = p.A
            dxm = A @ (xm + r) + np.multiply.outer(p.b, thQr + p.sigma(t, w)) - dr
            return np.concatenate([dq, dxm, c.Gamma * y], axis=0)
        if kind == "proportional":
            u = proportional_u(self.controller.k, t, q, r, p.Q, w)
            return p.rhs(t, q, u, w)
        x = z[0] - r[0]
        u = -z[1] * x
        dq = p.rhs(t, z[0], u, w)
        dk = scalar_rates(self.controller.Gamma, x, p.b_s)
        return np.stack([dq, dk])

    def prediction_error(self, t, z):
        n = self.n
        r, _ = self.ref(t)
        return z[n:2 * n] - (z[:n] - r)


def assemble_closed_loop(plant, controller, r) -> ClosedLoop:
    return ClosedLoop(plant, controller, r)


# -- runs and diagnostics ----------------------------------------------------


@dataclass
class ClosedLoopRun:
    """Uniformly sampled closed-loop history."""

    t: np.ndarray
    z: np.ndarray  # (N, dim)
    u: np.ndarray
    q: np.ndarray
    x: np.ndarray
    e: Optional[np.ndarray] = None
    theta_hat: Optional[np.ndarray] = None
    k_hat: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    theta_err: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def e_norm(self):
        return None if self.e is None else np.linalg.norm(self.e, axis=1)

    def to_csv(self, path=None):
        """``t,q...,xm...,theta_hat...,u,e_norm,V`` at 17 significant digits."""
        n = self.q.shape[1]
        header = ["t"] + [f"q{i}" for i in range(n)]
        cols = [self.t[:, None], self.q]
        if self.e is not None:
            header += [f"xm{i}" for i in range(n)]
            cols.append(self.x + self.e)
        if self.theta_hat is not None:
            header += [f"theta_hat{i}" for i in range(self.theta_hat.shape[1])]
            cols.append(self.theta_hat)
        if self.k_hat is not None:
            header.append("k_hat")
            cols.append(self.k_hat[:, None])
        header.append("u")
        cols.append(self.u[:, None])
        if self.e is not None and self.V is not None:
            header += ["e_norm", "V"]
            cols += [self.e_norm[:, None], self.V[:, None]]
        data = np.hstack(cols)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([f"{v:.17g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def simulate(loop: ClosedLoop, z0, t0, t1, dt_out, cfg: IntegratorConfig | None = None,
             accelerate=True):
    """Integrate the closed loop and sample it every ``dt_out``.

    Adaptive loops on polynomial plants go through the compiled kernel unless
    ``accelerate`` is false; ``meta["traj"]`` evaluates the state at arbitrary
    times in either case.
    """
    n_out = int(np.floor((t1 - t0) / dt_out + 1e-9)) + 1
    ts = t0 + dt_out * np.arange(n_out)
    ts[-1] = min(ts[-1], t1)
    if accelerate and _kernels.mrac_supported(loop.plant, loop.controller):
        w = float(loop.omega)
        z0 = np.asarray(z0, dtype=float)

        def traj(times):
            times = np.atleast_1d(np.asarray(times, dtype=float))
            order = np.argsort(times, kind="stable")
            _, S, _ = _kernels.integrate_mrac_phase(loop, z0, w * t0, w * t1, w * times[order], cfg)
            out = np.empty((times.size, z0.size))
            out[order] = S[:, :, 0]
            return out

        z_end, S, steps = _kernels.integrate_mrac_phase(loop, z0, w * t0, w * t1, w * ts, cfg)
        Z = S[:, :, 0]
        meta = {"steps": steps, "z_final": z_end[:, 0], "traj": traj, "compiled": True}
    else:
        tr = integrate(loop.field, z0, t0, t1, cfg)
        Z = tr(ts)
        meta = {"steps": tr.n_steps, "z_final": tr.y_final, "traj": tr, "compiled": False}
    Zt = Z.T
    u = loop.control(ts, Zt)
    r, _ = loop.ref(ts)
    n = loop.n
    q = Z[:, :n]
    x = q - r.T
    run = ClosedLoopRun(ts, Z, np.asarray(u, dtype=float), q, x, meta=meta)
    kind = loop.controller.kind
    if kind == "mrac":
        run.e = Z[:, n:2 * n] - x
        run.theta_hat = Z[:, 2 * n:]
    elif kind == "scalar_adaptive":
        run.k_hat = Z[:, 1]
    return run


def lyapunov_diagnostics(run: ClosedLoopRun, theta, P, Gamma, R=None, S=None, h_b=None):
    """Lyapunov function, error norms and bound verdicts for an MRAC run.

    ``theta`` is the true coefficient vector, so this is a diagnostic only.
    ``R`` defaults to ``max(|theta_hat(0)|, |theta|)``.
    """
    theta = np.asarray(theta, dtype=float)
    e = run.e
    th_err = run.theta_hat - theta
    V = np.einsum("ij,jk,ik->i", e, P, e) + np.sum(th_err**2, axis=1) / Gamma
    e_norm = np.linalg.norm(e, axis=1)
    th_norm = np.linalg.norm(th_err, axis=1)
    if R is None:
        R = max(float(np.linalg.norm(run.theta_hat[0])), float(np.linalg.norm(theta)))
    lam_min = float(eig_sym(P)[0])
    e_bound = 2 * R / np.sqrt(lam_min * Gamma)
    th_bound = 2 * R
    run.V = V
    run.theta_err = th_norm
    out = {
        "V": V,
        "e_norm": e_norm,
        "theta_err": th_norm,
        "R": R,
        "e_bound": e_bound,
        "theta_bound": th_bound,
        "e_within": bool(np.max(e_norm) <= e_bound),
        "theta_within": bool(np.max(th_norm) <= th_bound),
        "V_max_increase": float(np.max(np.diff(V), initial=0.0)),
    }
    if h_b is not None:
        S = np.eye(P.shape[0]) if S is None else S
        out["e_ultimate_bound"] = 2 * float(eig_sym(P)[-1]) / float(eig_sym(S)[0]) * h_b
    return out
