"""Compiled Dormand-Prince kernel for the adaptive closed loop.

The numpy route in :mod:`orbit_tracer.ode` and :class:`~orbit_tracer.control.ClosedLoop`
is the reference implementation. This module repeats the same field and the
same step-size control in numba so that long experiments with polynomial
regressors run at compiled speed. It is used only when numba is importable and
the plant describes itself as data (``monomials`` and ``sine_forcing``).

The state is integrated in phase time ``s = omega t`` with a batch of columns
sharing one step sequence, exactly like the numpy experiment runner.
"""

from __future__ import annotations

import math

import numpy as np

from .ode import ALPHA, BETA, FAC_MAX, FAC_MIN, SAFETY, IntegrationError, _A, _C, _D, _E

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

__all__ = ["available", "mrac_supported", "integrate_mrac_phase"]


def available() -> bool:
    return njit is not None


def mrac_supported(plant, controller) -> bool:
    """True when the compiled route can run this plant/controller pair."""
    if njit is None or controller.kind != "mrac" or plant.kind != "structured":
        return False
    physics = getattr(plant, "_physics", None)
    return physics is not None and physics() is not None


if njit is not None:

    @njit(cache=True)
    def _mrac_field(s, z, out, w, C, K, A, b, Pb, expo, theta, F, wave, Gamma, R, eps,
                    cs, sn, r, dr, Qq, Qr, y):
        n = A.shape[0]
        m = expo.shape[0]
        B = z.shape[1]
        for k in range(K):
            cs[k] = math.cos((k + 1) * s)
            sn[k] = math.sin((k + 1) * s)
        sig = F * math.sin(s)
        for j in range(B):
            wj = w[j]
            t = s / wj
            for i in range(n):
                acc = C[j, i, 0]
                dacc = C[j, n + i, 0]
                for k in range(K):
                    acc += C[j, i, 1 + k] * cs[k] + C[j, i, 1 + K + k] * sn[k]
                    dacc += C[j, n + i, 1 + k] * cs[k] + C[j, n + i, 1 + K + k] * sn[k]
                r[i] = acc
                dr[i] = dacc
            for l in range(m):
                a = 1.0
                c = 1.0
                for i in range(n):
                    for _ in range(expo[l, i]):
                        a *= z[i, j]
                        c *= r[i]
                Qq[l] = a
                Qr[l] = c
            thQq = 0.0
            thQr = 0.0
            trueQ = 0.0
            for l in range(m):
                th = z[2 * n + l, j]
                thQq += th * Qq[l]
                thQr += th * Qr[l]
                trueQ += theta[l] * Qq[l]
            u = thQr - thQq
            drive = u + trueQ + sig
            for i in range(n):
                acc = 0.0
                for k in range(n):
                    acc += A[i, k] * z[k, j]
                out[i, j] = acc + b[i] * drive
            if wave[0] >= 0:
                out[int(wave[0]), j] += wave[1] * math.sin(wave[2] * t + wave[3] * s + wave[4])
            pe = 0.0
            for i in range(n):
                pe += Pb[i] * (z[n + i, j] - z[i, j] + r[i])
            for l in range(m):
                y[l] = -pe * Qq[l]
            if R > 0:
                nrm2 = 0.0
                radial = 0.0
                for l in range(m):
                    th = z[2 * n + l, j]
                    nrm2 += th * th
                    radial += th * y[l]
                f = (nrm2 - R * R) / (eps * R * R)
                if f > 0 and radial > 0:
                    scale = f * radial / (nrm2 if nrm2 > 0 else 1.0)
                    for l in range(m):
                        y[l] -= scale * z[2 * n + l, j]
            for i in range(n):
                acc = 0.0
                for k in range(n):
                    acc += A[i, k] * (z[n + k, j] + r[k])
                out[n + i, j] = acc + b[i] * (thQr + sig) - dr[i]
            for l in range(m):
                out[2 * n + l, j] = Gamma * y[l]
            for i in range(2 * n + m):
                out[i, j] /= wj

    @njit(cache=True)
    def _integrate(s0, s1, z0, samples_s, w, C, K, A, b, Pb, expo, theta, F, wave, Gamma, R, eps,
                   TA, TC, TE, TD, rtol, atol, h_init, h_min, h_max, max_steps,
                   safety, fac_min, fac_max, alpha, beta):
        dim, B = z0.shape
        n = A.shape[0]
        m = expo.shape[0]
        cs = np.empty(max(K, 1))
        sn = np.empty(max(K, 1))
        r = np.empty(n)
        dr = np.empty(n)
        Qq = np.empty(m)
        Qr = np.empty(m)
        yv = np.empty(m)
        k = np.empty((7, dim, B))
        y = z0.copy()
        y_new = np.empty((dim, B))
        tmp = np.empty((dim, B))
        err = np.empty((dim, B))
        ns = samples_s.shape[0]
        out = np.empty((ns, dim, B))
        si = 0
        t = s0
        h = min(h_init, h_max, s1 - s0)
        _mrac_field(t, y, k[0], w, C, K, A, b, Pb, expo, theta, F, wave, Gamma, R, eps,
                    cs, sn, r, dr, Qq, Qr, yv)
        err_old = 1e-4
        steps = 0
        rejected = False
        while True:
            if steps >= max_steps:
                return 1, t, y, out, steps
            remaining = s1 - t
            last = h >= remaining * (1 - 1e-12)
            if last:
                h = remaining
            for st in range(1, 6):
                for i in range(dim):
                    for j in range(B):
                        acc = 0.0
                        for q in range(st):
                            acc += TA[st, q] * k[q, i, j]
                        tmp[i, j] = y[i, j] + h * acc
                _mrac_field(t + TC[st] * h, tmp, k[st], w, C, K, A, b, Pb, expo, theta, F, wave,
                            Gamma, R, eps, cs, sn, r, dr, Qq, Qr, yv)
            for i in range(dim):
                for j in range(B):
                    acc = 0.0
                    for q in range(6):
                        acc += TA[6, q] * k[q, i, j]
                    y_new[i, j] = y[i, j] + h * acc
            _mrac_field(t + h, y_new, k[6], w, C, K, A, b, Pb, expo, theta, F, wave, Gamma, R, eps,
                        cs, sn, r, dr, Qq, Qr, yv)
            for i in range(dim):
                for j in range(B):
                    acc = 0.0
                    for q in range(7):
                        acc += TE[q] * k[q, i, j]
                    err[i, j] = h * acc
            en = 0.0
            for j in range(B):
                ssum = 0.0
                for i in range(dim):
                    sc = atol + rtol * max(abs(y[i, j]), abs(y_new[i, j]))
                    ratio = err[i, j] / sc
                    ssum += ratio * ratio
                col = math.sqrt(ssum / dim)
                if col > en or col != col:
                    en = col
            steps += 1
            if en <= 1.0:
                t_new = s1 if last else t + h
                # dense samples inside [t, t_new]
                while si < ns and samples_s[si] <= t_new:
                    sv = samples_s[si]
                    if sv == t_new:
                        out[si] = y_new
                    elif sv == t:
                        out[si] = y
                    else:
                        th = (sv - t) / h
                        th1 = 1.0 - th
                        for i in range(dim):
                            for j in range(B):
                                r2 = y_new[i, j] - y[i, j]
                                r3 = h * k[0, i, j] - r2
                                r4 = r2 - h * k[6, i, j] - r3
                                acc = 0.0
                                for q in range(7):
                                    acc += TD[q] * k[q, i, j]
                                c4 = h * acc
                                out[si, i, j] = y[i, j] + th * (r2 + th1 * (r3 + th * (r4 + th1 * c4)))
                    si += 1
                t = t_new
                y[:, :] = y_new
                k[0] = k[6]
                if last:
                    break
                en = max(en, 1e-10)
                fac = min(fac_max, max(fac_min, safety * en ** (-alpha) * err_old ** beta))
                if rejected:
                    fac = min(fac, 1.0)
                h = min(h_max, h * fac)
                err_old = en
                rejected = False
            else:
                if en == en and en < math.inf:
                    fac = max(fac_min, safety * en ** (-0.2))
                else:
                    fac = fac_min
                h = h * fac
                rejected = True
                if h < h_min:
                    return 2, t, y, out, steps
        return 0, t, y, out, steps


def integrate_mrac_phase(loop, z0, s0, s1, samples_s=None, cfg=None):
    """Integrate a batched adaptive closed loop in phase time.

    Parameters
    ----------
    loop : ClosedLoop
        MRAC loop on a plant for which :func:`mrac_supported` holds.
    z0 : ndarray, shape (dim, B)
    samples_s : ndarray, optional
        Sorted phase times inside ``[s0, s1]`` at which to return the state.

    Returns
    -------
    z_end : ndarray, shape (dim, B)
    samples : ndarray, shape (len(samples_s), dim, B)
    steps : int
    """
    from .ode import IntegratorConfig

    cfg = cfg or IntegratorConfig()
    plant = loop.plant
    theta, wave = plant._physics()
    z0 = np.ascontiguousarray(z0, dtype=float)
    if z0.ndim == 1:
        z0 = z0[:, None]
    B = z0.shape[1]
    w = np.broadcast_to(np.asarray(loop.omega, dtype=float), (B,)).copy()
    C = loop.ref._C
    if C.ndim == 2:
        C = np.broadcast_to(C, (B,) + C.shape)
    C = np.ascontiguousarray(C)
    ctrl = loop.controller
    R = float(ctrl.R) if ctrl.R is not None else -1.0
    eps = float(ctrl.eps) if ctrl.eps is not None else 1.0
    samples_s = np.zeros(0) if samples_s is None else np.ascontiguousarray(samples_s, dtype=float)
    if samples_s.size and (np.any(np.diff(samples_s) < 0) or samples_s[0] < s0 or samples_s[-1] > s1):
        raise ValueError("integrate_mrac_phase: samples must be sorted inside [s0, s1]")
    status, t, y, out, steps = _integrate(
        float(s0), float(s1), z0, samples_s, w, C, int(loop.ref.K), plant.A, plant.b,
        np.asarray(loop.Pb, dtype=float), plant.monomials, np.asarray(theta, dtype=float),
        float(plant.sine_forcing), np.asarray(wave, dtype=float), float(ctrl.Gamma), R, eps,
        _A, _C, _E, _D, cfg.rtol, cfg.atol, cfg.h_init, cfg.h_min, cfg.h_max, cfg.max_steps,
        SAFETY, FAC_MIN, FAC_MAX, ALPHA, BETA,
    )
    if status == 1:
        raise IntegrationError("integrate: max_steps exceeded", t=t, y=y, steps=steps)
    if status == 2:
        raise IntegrationError(f"integrate: stiffness/blowup near t={t:.6g} (step below h_min)",
                               t=t, y=y, steps=steps)
    return y, out, steps
