"""Dormand-Prince 5(4) integration with dense output.

State arrays may be one-dimensional (a single system) or two-dimensional with
trailing batch axis ``(n, B)``; in the latter case the error norm is taken per
column and the worst column drives the step size, so every member of the batch
shares one step sequence.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "IntegrationError",
    "IntegratorConfig",
    "Trajectory",
    "integrate",
    "integrate_fixed",
    "sample_period",
    "monodromy",
]


class IntegrationError(RuntimeError):
    """Integration could not reach the requested end time."""

    def __init__(self, message, t=None, y=None, steps=None):
        super().__init__(message)
        self.t = t
        self.y = y
        self.steps = steps


# Butcher tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# difference between 5th and embedded 4th order weights
E1, E3, E4, E5, E6, E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)
# dense output (Hairer, Norsett & Wanner)
D1 = -12715105075 / 11282082432
D3 = 87487479700 / 32700410799
D4 = -10690763975 / 1880347072
D5 = 701980252875 / 199316789632
D6 = -1453857185 / 822651844
D7 = 69997945 / 29380423

SAFETY = 0.9
FAC_MIN, FAC_MAX = 0.2, 5.0
# PI controller exponents
ALPHA = 0.7 / 5
BETA = 0.4 / 5


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    h_init: float = 1e-2
    h_min: float = 1e-12
    h_max: float = 1.0
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not (0 < self.h_min <= self.h_init <= self.h_max):
            raise ValueError("need 0 < h_min <= h_init <= h_max")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


class Trajectory:
    """Accepted steps of an integration plus their interpolants.

    ``times`` has one more entry than there are steps; ``states[i]`` is the
    state at ``times[i]``.
    """

    def __init__(self, times, states, dense=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        # (steps, 5, *state_shape) polynomial coefficients, or None
        self._dense = dense

    @property
    def t0(self):
        return self.times[0]

    @property
    def t1(self):
        return self.times[-1]

    @property
    def y_final(self):
        return self.states[-1]

    @property
    def n_steps(self):
        return len(self.times) - 1

    def __call__(self, t):
        """Interpolate the state at time(s) ``t`` inside the covered span."""
        if self._dense is None:
            raise ValueError("trajectory was integrated without dense output")
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        lo, hi = self.times[0], self.times[-1]
        span = hi - lo
        if np.any(t < lo - 1e-12 * max(1.0, abs(span))) or np.any(
            t > hi + 1e-12 * max(1.0, abs(span))
        ):
            raise ValueError("interpolation time outside trajectory")
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = np.clip(idx, 0, self.n_steps - 1)
        h = self.times[idx + 1] - self.times[idx]
        th = (t - self.times[idx]) / h
        th1 = 1.0 - th
        c = self._dense[idx]
        shape = (-1,) + (1,) * (c.ndim - 2)
        th = th.reshape(shape)
        th1 = th1.reshape(shape)
        out = c[:, 0] + th * (c[:, 1] + th1 * (c[:, 2] + th * (c[:, 3] + th1 * c[:, 4])))
        # exact endpoints
        exact_hi = t == self.times[idx + 1]
        if np.any(exact_hi):
            out[exact_hi] = self.states[idx[exact_hi] + 1]
        exact_lo = t == self.times[idx]
        if np.any(exact_lo):
            out[exact_lo] = self.states[idx[exact_lo]]
        return out[0] if scalar else out

    def to_csv(self, path=None):
        """Write (or return) ``t,y0,y1,...`` rows at 17 significant digits."""
        states = self.states.reshape(len(self.times), -1)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"y{i}" for i in range(states.shape[1])])
        for t, y in zip(self.times, states):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in y])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return text


_A = np.zeros((7, 7))
_A[1, :1] = [A21]
_A[2, :2] = [A31, A32]
_A[3, :3] = [A41, A42, A43]
_A[4, :4] = [A51, A52, A53, A54]
_A[5, :5] = [A61, A62, A63, A64, A65]
_A[6, :6] = [B1, 0.0, B3, B4, B5, B6]
_C = np.array([0.0, C2, C3, C4, C5, 1.0, 1.0])
_E = np.array([E1, 0.0, E3, E4, E5, E6, E7])
_D = np.array([D1, 0.0, D3, D4, D5, D6, D7])


class _Stepper:
    """Dormand-Prince steps on a flattened state.

    Stage derivatives live in a ``(7, size)`` buffer so that every stage
    combination is one small matrix product. Row 6 of ``_A`` holds the 5th
    order weights, so the last stage is evaluated at the new state (FSAL).
    """

    def __init__(self, field, shape):
        self.cols = shape[-1] if len(shape) > 1 else None
        if len(shape) > 1:
            self.f = lambda t, y: np.asarray(field(t, y.reshape(shape)), dtype=float).reshape(-1)
        else:
            self.f = lambda t, y: np.asarray(field(t, y), dtype=float)
        self.k = None

    def step(self, t, y, h, k1):
        k = np.empty((7, y.size))
        k[0] = k1
        f = self.f
        for i in range(1, 6):
            k[i] = f(t + _C[i] * h, y + h * (_A[i, :i] @ k[:i]))
        y_new = y + h * (_A[6, :6] @ k[:6])
        k[6] = f(t + h, y_new)
        self.k = k
        return y_new, h * (_E @ k)

    def err_norm(self, err, y, y_new, atol, rtol):
        ratio = err / (atol + rtol * np.maximum(np.abs(y), np.abs(y_new)))
        if self.cols is None:
            return float(np.sqrt(np.mean(ratio * ratio)))
        ratio = ratio.reshape(-1, self.cols)
        return float(np.sqrt(np.max(np.mean(ratio * ratio, axis=0))))

    def dense(self, y, y_new, h):
        k = self.k
        r2 = y_new - y
        r3 = h * k[0] - r2
        r4 = r2 - h * k[6] - r3
        return np.stack([y, r2, r3, r4, h * (_D @ k)])


def integrate(
    field: Callable,
    y0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig | None = None,
    *,
    dense: bool = True,
    keep: bool = True,
) -> Trajectory:
    """Integrate ``y' = field(t, y)`` from ``t0`` to exactly ``t1``.

    Parameters
    ----------
    field : callable
        ``field(t, y)`` returning an array shaped like ``y``.
    y0 : array_like
        Initial state, shape ``(n,)`` or ``(n, B)``.
    cfg : IntegratorConfig, optional
        Tolerances and step limits; defaults to rtol 1e-8, atol 1e-10.
    dense : bool
        Store interpolation coefficients for every accepted step.
    keep : bool
        Store every accepted step. With ``keep=False`` only the endpoints are
        retained, which is what long settling runs want.
    """
    cfg = cfg or IntegratorConfig()
    if not t1 > t0:
        raise ValueError("integrate: need t1 > t0")
    if not keep:
        dense = False
    y = np.array(y0, dtype=float)
    shape = y.shape
    stepper = _Stepper(field, shape)
    y = y.reshape(-1)
    t = float(t0)
    h = min(cfg.h_init, cfg.h_max, float(t1) - t)
    k1 = stepper.f(t, y)
    times = [t]
    states = [y]
    coeffs = []
    err_old = 1e-4
    steps = 0
    rejected = False
    while True:
        if steps >= cfg.max_steps:
            raise IntegrationError("integrate: max_steps exceeded", t=t, y=y.reshape(shape), steps=steps)
        remaining = t1 - t
        last = h >= remaining * (1 - 1e-12)
        if last:
            h = remaining
        y_new, err = stepper.step(t, y, h, k1)
        en = stepper.err_norm(err, y, y_new, cfg.atol, cfg.rtol)
        steps += 1
        if en <= 1.0:
            if dense:
                coeffs.append(stepper.dense(y, y_new, h))
            t = t1 if last else t + h
            y = y_new
            k1 = stepper.k[6]
            if keep:
                times.append(t)
                states.append(y)
            if last:
                break
            en = max(en, 1e-10)
            fac = min(FAC_MAX, max(FAC_MIN, SAFETY * en ** (-ALPHA) * err_old**BETA))
            if rejected:
                fac = min(fac, 1.0)
            h = min(cfg.h_max, h * fac)
            err_old = en
            rejected = False
        else:
            # nan compares false above and lands here too
            fac = max(FAC_MIN, SAFETY * en ** (-1 / 5)) if np.isfinite(en) else FAC_MIN
            h = h * fac
            rejected = True
            if h < cfg.h_min:
                raise IntegrationError(
                    f"integrate: stiffness/blowup near t={t:.6g} (step {h:.3g} below h_min)",
                    t=t,
                    y=y.reshape(shape),
                    steps=steps,
                )
    if not keep:
        times.append(t)
        states.append(y)
    n_pts = len(times)
    states = np.array(states).reshape((n_pts,) + shape)
    dense_arr = np.array(coeffs).reshape((n_pts - 1, 5) + shape) if dense else None
    return Trajectory(np.array(times), states, dense_arr)


def integrate_fixed(field, y0, t0, t1, h):
    """Fixed-step Dormand-Prince (5th order solution, no error control)."""
    n = int(round((t1 - t0) / h))
    if n < 1 or abs(n * h - (t1 - t0)) > 1e-9 * abs(t1 - t0):
        raise ValueError("integrate_fixed: step must divide the interval")
    y = np.array(y0, dtype=float)
    shape = y.shape
    stepper = _Stepper(field, shape)
    y = y.reshape(-1)
    for i in range(n):
        t = t0 + i * h
        y, _ = stepper.step(t, y, h, stepper.f(t, y))
    return y.reshape(shape)


def sample_period(field, y_start, t_start, T, N, cfg=None):
    """Integrate one period and sample it uniformly.

    Returns
    -------
    samples : ndarray, shape (N, *state_shape)
        States at ``t_start + j*T/N`` for ``j = 0..N-1``.
    y_end : ndarray
        State at ``t_start + T``.
    """
    traj = integrate(field, y_start, t_start, t_start + T, cfg)
    ts = t_start + T * np.arange(N) / N
    return traj(ts), traj.y_final


def monodromy(jac, T, n, t0=0.0, cfg=None):
    """Monodromy matrix of ``Phi' = jac(t) Phi`` over ``[t0, t0+T]``.

    ``jac(t)`` returns the ``n x n`` Jacobian along the stored orbit; the
    columns of ``Phi`` are integrated together as a batch.
    """

    def var_field(t, Phi):
        return jac(t) @ Phi

    traj = integrate(var_field, np.eye(n), t0, t0 + T, cfg, dense=False, keep=False)
    return traj.y_final
