"""Control-based continuation of periodic orbits.

The unknown vector ``xi`` holds the Fourier coefficients
``(a0, a1..aK, b1..bK)`` of a scalar generator ``v`` followed by the forcing
frequency ``omega``. The generator fixes the reference through
``r' = A r + b v``. One *experiment* runs the closed loop for a number of
transient periods, samples the control input over one more period, and
returns its Fourier coefficients; a zero control input marks an orbit of the
uncontrolled plant.

Experiments run in phase time ``s = omega t`` so that a batch of references
with different frequencies can share one integration. All finite-difference
columns of a Jacobian start from the same state and share one step sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .control import ClosedLoop, Reference
from .numkit import eig_general
from .ode import IntegrationError, IntegratorConfig, integrate, monodromy
from .signal import FourierSeries, dft_coefficients, synthesize_reference

log = logging.getLogger(__name__)

__all__ = [
    "ContinuationError",
    "ExperimentProtocol",
    "ChartSettings",
    "BranchPoint",
    "BranchResult",
    "Experiment",
    "generator_from_xi",
    "xi_from_generator",
    "generator_from_reference",
    "steady_control_residual",
    "fd_jacobian",
    "newton_correct",
    "continue_branch",
    "initial_point",
    "open_loop_orbit",
    "open_loop_sweep",
    "floquet_diagnostics",
    "count_folds",
]


class ContinuationError(RuntimeError):
    """An experiment or correction step failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ExperimentProtocol:
    n_transient_periods: int = 10
    n_samples: int = 1024
    K: int = 5
    warm_start: str = "chain"
    conv_tol: float = 1e-6
    adaptation_reset: str = "carry_theta_hat"
    k_hat0: float = 0.0

    def __post_init__(self):
        if self.n_transient_periods < 1:
            raise ValueError("protocol: n_transient_periods must be >= 1")
        if self.K < 1:
            raise ValueError("protocol: K must be >= 1")
        if self.n_samples < 4 * self.K + 4:
            raise ValueError("protocol: n_samples must be >= 4K+4")
        if self.warm_start not in ("cold", "chain"):
            raise ValueError("protocol: warm_start must be 'cold' or 'chain'")
        if self.adaptation_reset not in ("carry_theta_hat", "reset_k_hat_zero"):
            raise ValueError("protocol: unknown adaptation_reset policy")
        if not self.conv_tol > 0:
            raise ValueError("protocol: conv_tol must be > 0")


@dataclass(frozen=True)
class ChartSettings:
    h0: float = 0.05
    h_min: float = 0.005
    h_max: float = 0.5
    grow: float = 1.5
    grow_iters: int = 3
    shrink: float = 0.5
    newton_cap: int = 10
    fd_step: float = 1e-4
    max_points: int = 400

    def __post_init__(self):
        if not (0 < self.h_min <= self.h0 <= self.h_max):
            raise ValueError("chart settings: need h_min <= h0 <= h_max")
        if not (self.grow >= 1 and 0 < self.shrink < 1):
            raise ValueError("chart settings: need grow >= 1 and 0 < shrink < 1")
        if self.newton_cap < 1 or not self.fd_step > 0:
            raise ValueError("chart settings: newton_cap >= 1 and fd_step > 0 required")


@dataclass
class BranchPoint:
    xi: np.ndarray
    tangent: np.ndarray
    residual_norm: float
    amplitude: float
    newton_iters: int = 0
    step: float = 0.0
    floquet: Optional[np.ndarray] = None
    terminal_state: Optional[np.ndarray] = None
    jacobian: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def omega(self):
        return float(self.xi[-1])

    @property
    def coefficients(self):
        return self.xi[:-1]


@dataclass
class BranchResult:
    points: list
    status: str
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


# -- unknown vector ----------------------------------------------------------


def generator_from_xi(xi, K):
    xi = np.asarray(xi, dtype=float)
    return FourierSeries.from_vector(xi[: 2 * K + 1], xi[-1])


def xi_from_generator(v: FourierSeries):
    return np.concatenate([v.to_vector(), [v.omega]])


def generator_from_reference(r, A, b):
    """Generator ``v`` with ``r' - A r = b v`` (least squares onto ``b``)."""
    A = np.atleast_2d(A)
    b = np.asarray(b, dtype=float)
    a0, ra, rb = r.coefficient_arrays()
    w = r.omega
    k = w * np.arange(1, r.K + 1)
    bb = b @ b
    # r' has cos coefficient k b_k and sin coefficient -k a_k
    v0 = b @ (-A @ a0) / bb
    va = b @ (rb * k - A @ ra) / bb
    vb = b @ (-ra * k - A @ rb) / bb
    return FourierSeries(w, v0, va, vb)


# -- experiments -------------------------------------------------------------


class Experiment:
    """Runs batches of closed-loop experiments on one plant/controller pair.

    The plant is only used through its known model and its black-box
    right-hand side, never through its hidden parameters.
    """

    def __init__(self, plant, controller, proto: ExperimentProtocol | None = None,
                 cfg: IntegratorConfig | None = None, accelerate=True):
        self.plant = plant
        self.controller = controller
        self.proto = proto or ExperimentProtocol()
        self.cfg = cfg or IntegratorConfig()
        self.K = self.proto.K
        self.runs = 0
        # compiled route for adaptive loops on polynomial plants
        self.compiled = bool(accelerate) and _kernels.mrac_supported(plant, controller)

    def reference(self, xi):
        return synthesize_reference(generator_from_xi(xi, self.K), self.plant.A, self.plant.b)

    def _initial_states(self, loop, B, warm_state):
        n = self.plant.n
        kind = self.controller.kind
        if warm_state is None or self.proto.warm_start == "cold":
            q0 = np.zeros((n, B))
            if kind == "mrac":
                th0 = self.controller.theta_hat0
                th0 = np.zeros(self.plant.m) if th0 is None else np.asarray(th0, dtype=float)
                return loop.initial_state(q0, theta_hat0=th0)
            if kind == "scalar_adaptive":
                return loop.initial_state(q0, k_hat0=self.proto.k_hat0)
            return q0
        ws = np.asarray(warm_state, dtype=float)
        q0 = np.repeat(ws[:n, None], B, axis=1)
        if kind == "mrac":
            th = ws[2 * n:] if self.proto.adaptation_reset == "carry_theta_hat" else np.zeros(self.plant.m)
            return loop.initial_state(q0, theta_hat0=th)
        if kind == "scalar_adaptive":
            k0 = ws[n] if self.proto.adaptation_reset == "carry_theta_hat" else self.proto.k_hat0
            return loop.initial_state(q0, k_hat0=k0)
        return q0

    def run(self, xis, warm_state=None):
        """Run one experiment per column of ``xis`` (shape ``(2K+2, B)``).

        Returns the control-input coefficients ``(2K+1, B)`` and the terminal
        augmented states ``(dim, B)``.
        """
        xis = np.atleast_2d(np.asarray(xis, dtype=float))
        if xis.shape[0] != 2 * self.K + 2:
            xis = xis.T
        B = xis.shape[1]
        omegas = xis[-1]
        if np.any(omegas <= 0):
            raise ContinuationError("experiment: omega must stay positive")
        refs = [self.reference(xis[:, j]) for j in range(B)]
        loop = ClosedLoop(self.plant, self.controller, Reference.stack(refs), omega=omegas)
        z0 = self._initial_states(loop, B, warm_state)

        def phase_field(s, z):
            return loop.field(s / omegas, z) / omegas

        two_pi = 2 * np.pi
        s_settle = two_pi * self.proto.n_transient_periods
        N = self.proto.n_samples
        s = s_settle + two_pi * np.arange(N) / N
        try:
            if self.compiled:
                z_set, _, _ = _kernels.integrate_mrac_phase(loop, z0, 0.0, s_settle, None, self.cfg)
                z_end, Z, _ = _kernels.integrate_mrac_phase(loop, z_set, s_settle, s_settle + two_pi,
                                                            s, self.cfg)
            else:
                settle = integrate(phase_field, z0, 0.0, s_settle, self.cfg, keep=False)
                last = integrate(phase_field, settle.y_final, s_settle, s_settle + two_pi, self.cfg)
                Z = last(s)  # (N, dim, B)
                z_end = last.y_final
        except (IntegrationError, FloatingPointError) as exc:
            raise ContinuationError(f"experiment: integration failed: {exc}",
                                    {"omegas": omegas, "t": getattr(exc, "t", None)}) from exc
        self.runs += B
        u = np.array([loop.control(s[j] / omegas, Z[j]) for j in range(N)])
        F = dft_coefficients(u, self.K)
        if not np.all(np.isfinite(F)):
            raise ContinuationError("experiment: non-finite control coefficients",
                                    {"omegas": omegas})
        return F, z_end


def steady_control_residual(experiment: Experiment, xi, warm_state=None):
    """Control-input Fourier coefficients after the transient, plus terminal state."""
    F, Z = experiment.run(np.asarray(xi, dtype=float)[:, None], warm_state)
    return F[:, 0], Z[:, 0]


def fd_jacobian(experiment: Experiment, xi, fd_step=1e-4, warm_state=None):
    """Forward-difference Jacobian of the residual with respect to ``xi``.

    The base experiment and every perturbed one start from ``warm_state`` and
    run as one batch. Returns ``(J, F, terminal_state)`` for the base point.
    """
    xi = np.asarray(xi, dtype=float)
    d = xi.size
    xis = np.repeat(xi[:, None], d + 1, axis=1)
    xis[np.arange(d), np.arange(1, d + 1)] += fd_step
    F, Z = experiment.run(xis, warm_state)
    J = (F[:, 1:] - F[:, :1]) / fd_step
    return J, F[:, 0], Z[:, 0]


def reference_amplitude(experiment: Experiment, xi, n=1024):
    r = experiment.reference(xi)
    ts = r.period * np.arange(n) / n
    return float(np.max(np.abs(r[0].eval(ts))))


def _null_tangent(J, prev):
    M = np.vstack([J, prev])
    rhs = np.zeros(M.shape[0])
    rhs[-1] = 1.0
    tau = np.linalg.solve(M, rhs)
    tau /= np.linalg.norm(tau)
    if tau @ prev < 0:
        tau = -tau
    return tau


def newton_correct(experiment: Experiment, xi_p, tangent, settings: ChartSettings,
                   warm_state=None):
    """Correct a predictor onto the branch within the plane orthogonal to ``tangent``.

    Returns ``(point_or_None, warm_state, info)``; the warm state is the
    terminal state of the last experiment run, successful or not.
    """
    tol = experiment.proto.conv_tol
    xi = np.array(xi_p, dtype=float)
    tangent = np.asarray(tangent, dtype=float)
    state = warm_state
    history = []
    for it in range(settings.newton_cap + 1):
        try:
            J, F, term = fd_jacobian(experiment, xi, settings.fd_step, state)
        except ContinuationError as exc:
            return None, state, {"reason": str(exc), "iters": it, "history": history}
        state = term
        fn = float(np.linalg.norm(F))
        history.append(fn)
        log.debug("newton it=%d omega=%.6f |F|=%.3e", it, xi[-1], fn)
        if fn <= tol:
            point = BranchPoint(xi.copy(), tangent.copy(), fn, reference_amplitude(experiment, xi),
                                newton_iters=it, terminal_state=term.copy(), jacobian=J)
            return point, state, {"iters": it, "history": history}
        if it == settings.newton_cap:
            break
        G = np.concatenate([F, [tangent @ (xi - xi_p)]])
        DG = np.vstack([J, tangent])
        cond = np.linalg.cond(DG)
        if not np.isfinite(cond) or cond > 1e12:
            return None, state, {"reason": "singular corrected system", "iters": it,
                                 "history": history}
        xi = xi - np.linalg.solve(DG, G)
        if xi[-1] <= 0:
            return None, state, {"reason": "omega left positive axis", "iters": it,
                                 "history": history}
    return None, state, {"reason": "newton cap exceeded", "iters": settings.newton_cap,
                         "history": history}


# -- open loop ---------------------------------------------------------------


def open_loop_orbit(plant, omega=None, settle_periods=200, q0=None, cfg=None,
                    tol=1e-8, check_every=10):
    """Settle the uncontrolled plant onto a periodic orbit by forward simulation.

    Simulation stops early once the state changes by less than ``tol``
    (relative) over one period. Returns ``(q_start, converged, periods)``.
    """
    w = plant.omega if omega is None else omega
    f = plant.open_loop_field(w)
    T = 2 * np.pi / w
    q = np.zeros(plant.n) if q0 is None else np.asarray(q0, dtype=float)
    done = 0
    while done < settle_periods:
        q_prev = q
        q = integrate(f, q, 0.0, T, cfg, keep=False).y_final
        done += 1
        change = np.linalg.norm(q - q_prev) / max(1.0, np.linalg.norm(q))
        if done % check_every == 0 or done == settle_periods:
            if change < tol:
                return q, True, done
    return q, False, done


def _orbit_reference(plant, q_start, omega, K, N=1024, cfg=None):
    from .signal import VectorFourierSeries

    T = 2 * np.pi / omega
    traj = integrate(plant.open_loop_field(omega), q_start, 0.0, T, cfg)
    samples = traj(T * np.arange(N) / N)
    coeffs = dft_coefficients(samples, K)  # (2K+1, n)
    return VectorFourierSeries(tuple(FourierSeries.from_vector(coeffs[:, i], omega)
                                     for i in range(plant.n)))


def initial_point(experiment: Experiment, omega, settings: ChartSettings, settle_periods=300):
    """First branch point: forward-simulate a stable orbit, take its harmonics as
    the reference, then correct at fixed ``omega``.

    The forward simulation is the experimenter letting the uncontrolled
    system settle; it does not look inside the plant.
    """
    plant = experiment.plant
    q_start, _, _ = open_loop_orbit(plant, omega, settle_periods, cfg=experiment.cfg)
    r = _orbit_reference(plant, q_start, omega, experiment.K, cfg=experiment.cfg)
    v = generator_from_reference(r, plant.A, plant.b)
    xi0 = xi_from_generator(v)
    e_omega = np.zeros(xi0.size)
    e_omega[-1] = 1.0
    point, state, info = newton_correct(experiment, xi0, e_omega, settings, warm_state=None)
    if point is None:
        raise ContinuationError(f"initial point did not converge: {info.get('reason')}", info)
    return point, state


def continue_branch(experiment: Experiment, xi0=None, omega_range=(0.2, 3.0),
                    settings: ChartSettings | None = None, direction=-1, omega0=None,
                    start=None, callback=None):
    """Trace a branch of periodic orbits by pseudo-arclength continuation.

    Parameters
    ----------
    xi0 : array_like, optional
        Starting guess; corrected at fixed omega first. If omitted, the start
        comes from :func:`initial_point` at ``omega0``.
    direction : {-1, 1}
        Initial sense of travel in omega.
    start : tuple, optional
        ``(BranchPoint, warm_state)`` of an already-converged point.
    """
    settings = settings or ChartSettings()
    lo, hi = omega_range
    if start is not None:
        point, state = start
    elif xi0 is not None:
        e_omega = np.zeros(len(xi0))
        e_omega[-1] = 1.0
        point, state, info = newton_correct(experiment, xi0, e_omega, settings)
        if point is None:
            raise ContinuationError(f"initial point did not converge: {info.get('reason')}", info)
    else:
        point, state = initial_point(experiment, omega0, settings)

    d = point.xi.size
    prev = np.zeros(d)
    prev[-1] = float(np.sign(direction)) or 1.0
    point.tangent = _null_tangent(point.jacobian, prev)
    points = [point]
    h = settings.h0
    status = "range"
    while True:
        cur = points[-1]
        if len(points) >= settings.max_points:
            status = "budget"
            break
        xi_p = cur.xi + h * cur.tangent
        new, state, info = newton_correct(experiment, xi_p, cur.tangent, settings, state)
        if new is None or not np.isfinite(new.residual_norm):
            log.info("step rejected at omega=%.5f h=%.4f: %s", cur.omega, h, info.get("reason"))
            if state is not None and not np.all(np.isfinite(state)):
                state = cur.terminal_state
            h *= settings.shrink
            if h < settings.h_min:
                status = "stalled"
                break
            continue
        new.step = h
        new.tangent = _null_tangent(new.jacobian, cur.tangent)
        points.append(new)
        if callback is not None:
            callback(new)
        log.info("point %d omega=%.5f amp=%.5f |F|=%.2e iters=%d h=%.3f",
                 len(points) - 1, new.omega, new.amplitude, new.residual_norm,
                 new.newton_iters, h)
        if new.newton_iters <= settings.grow_iters:
            h = min(settings.h_max, h * settings.grow)
        if not lo <= new.omega <= hi:
            status = "range"
            break
    return BranchResult(points, status, {"experiments": experiment.runs})


def count_folds(points):
    """Indices ``i`` where the omega-component of the tangent changes sign
    between points ``i`` and ``i+1``."""
    s = np.sign([p.tangent[-1] for p in points])
    return [i for i in range(len(s) - 1) if s[i] * s[i + 1] < 0]


# -- sweeps and stability ----------------------------------------------------


def open_loop_sweep(plant, omega_grid, settle_periods=100, cfg=None, n_samples=1024,
                    q0=None, tol=1e-6):
    """Quasi-static frequency sweep of the uncontrolled plant.

    For each frequency, the plant runs ``settle_periods`` periods from the
    previous terminal state and the peak of ``|q_1|`` over one more period is
    recorded. The sweep direction is the order of ``omega_grid``.

    Returns a list of ``(omega, amplitude, converged)``.
    """
    grid = np.asarray(omega_grid, dtype=float)
    dg = np.diff(grid)
    if grid.size > 1 and not (np.all(dg > 0) or np.all(dg < 0)):
        raise ValueError("open_loop_sweep: grid must be strictly monotone")
    q = np.zeros(plant.n) if q0 is None else np.asarray(q0, dtype=float)
    out = []
    for w in grid:
        f = plant.open_loop_field(w)
        T = 2 * np.pi / w
        try:
            q_set = integrate(f, q, 0.0, settle_periods * T, cfg, keep=False).y_final
            traj = integrate(f, q_set, 0.0, T, cfg)
        except IntegrationError:
            out.append((float(w), float("nan"), False))
            q = np.zeros(plant.n)
            continue
        ts = T * np.arange(n_samples) / n_samples
        samples = traj(ts)
        amp = float(np.max(np.abs(samples[:, 0])))
        q_end = traj.y_final
        converged = bool(np.linalg.norm(q_end - q_set) <= tol * max(1.0, np.linalg.norm(q_end)))
        if not np.all(np.isfinite(q_end)) or amp > 1e6:
            out.append((float(w), float("nan"), False))
            q = np.zeros(plant.n)
            continue
        out.append((float(w), amp, converged))
        q = q_end
    return out


def floquet_diagnostics(plant, point: BranchPoint, experiment: Experiment | None = None,
                        K=None, cfg=None, polish_iters=8, tol=1e-10):
    """Floquet multipliers of the open-loop orbit at a branch point.

    Starts from ``r(0)``, polishes the orbit's initial state by a fixed-omega
    shooting Newton, and returns the eigenvalues of the monodromy matrix.
    Reads the plant's hidden parameters; for diagnostics only.
    """
    w = point.omega
    K = K if K is not None else (experiment.K if experiment else (point.xi.size - 2) // 2)
    cfg = cfg or (experiment.cfg if experiment else IntegratorConfig())
    r = synthesize_reference(generator_from_xi(point.xi, K), plant.A, plant.b)
    q0 = r.eval(0.0)
    f = plant.open_loop_field(w)
    T = 2 * np.pi / w
    n = plant.n
    Phi = None
    for _ in range(polish_iters):
        traj = integrate(f, q0, 0.0, T, cfg)
        Phi = monodromy(lambda t: plant.jacobian(t, traj(t), w), T, n, cfg=cfg)
        res = traj.y_final - q0
        if np.linalg.norm(res) < tol * max(1.0, np.linalg.norm(q0)):
            break
        q0 = q0 - np.linalg.solve(Phi - np.eye(n), res)
    return eig_general(Phi)
