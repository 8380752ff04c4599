"""Command-line front end: ``orbit-tracer <command> --config <path>``.

Configs are JSON documents with ``"schema": 1``. Unknown keys are rejected
so that a misspelt gain name cannot silently fall back to a default.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 non-convergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import plant as plants
from .continuation import (
    ChartSettings,
    ContinuationError,
    Experiment,
    ExperimentProtocol,
    continue_branch,
    count_folds,
    floquet_diagnostics,
    generator_from_reference,
    open_loop_orbit,
    open_loop_sweep,
    xi_from_generator,
)
from .control import ClosedLoop, Mrac, NoControl, Proportional, ScalarAdaptive, lyapunov_diagnostics, simulate
from .numkit import LinAlgError
from .ode import IntegrationError, IntegratorConfig, integrate
from .signal import FourierSeries, VectorFourierSeries, dft_coefficients, pe_gram, synthesize_reference

log = logging.getLogger("orbit_tracer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 1, 2, 3
COMMANDS = ("simulate", "continue", "sweep", "pe-check")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NonConvergence(RuntimeError):
    """A run finished but did not meet its convergence criterion."""

    def __init__(self, message, outputs=None, summary=None):
        super().__init__(message)
        self.outputs = outputs or {}
        self.summary = summary


# -- configuration -----------------------------------------------------------

_PLANTS = {
    "duffing": plants.duffing,
    "linear": plants.linear_oscillator,
    "scalar_sine": plants.scalar_sine,
    "beam_2dof": plants.beam_2dof,
}
_CONTROLLERS = ("none", "proportional", "mrac", "mrac_projected", "scalar_adaptive")

# section -> {key: default}; None means "not set"
_DEFAULTS = {
    "plant": {"name": "duffing", "params": {}},
    "controller": {"type": "none", "Gamma": 1.0, "S": None, "k": None, "R": None, "eps": None,
                   "theta_hat0": None, "k_hat0": 0.0},
    "reference": {"omega": None, "generator": None, "components": None, "from_file": None,
                  "open_loop": False},
    "disturbance": {"kind": "none", "h_b": 0.1},
    "simulate": {"t_end": 200.0, "dt_out": 0.05, "q0": None},
    "protocol": {f.name: f.default for f in fields(ExperimentProtocol)},
    "continuation": {**{f.name: f.default for f in fields(ChartSettings)},
                     "omega_range": [0.2, 3.0], "omega0": 1.0, "direction": "both",
                     "floquet": True, "sweep_overlay": None},
    "sweep": {"omega_start": 0.2, "omega_stop": 3.0, "n_points": 57, "direction": "both",
              "settle_periods": 100},
    "pe": {"n_samples": 1025, "window_start": 0.0, "along": "reference"},
    "integrator": {f.name: f.default for f in fields(IntegratorConfig)},
}
_TOP = {"schema", "output_dir", *_DEFAULTS}


@dataclass
class RunConfig:
    plant: dict
    controller: dict
    reference: dict
    disturbance: dict
    simulate: dict
    protocol: dict
    continuation: dict
    sweep: dict
    pe: dict
    integrator: dict
    output_dir: str = "out"
    schema: int = 1
    source: str = field(default="", compare=False)

    def to_dict(self):
        d = {"schema": self.schema, "output_dir": self.output_dir}
        for name in _DEFAULTS:
            d[name] = copy.deepcopy(getattr(self, name))
        return d


def _positive(d, section, key, strict=True):
    v = d[key]
    if v is None:
        return
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not (v > 0 if strict else v >= 0):
        raise ConfigError(f"{section}.{key} must be > 0" if strict else f"{section}.{key} must be >= 0")


def _finite_list(v, section, key):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be numeric") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{section}.{key} must be finite")
    return arr


def normalize(raw: dict) -> dict:
    """Fill defaults and check keys; the result is plain JSON data."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _TOP:
            raise ConfigError(f"unknown key '{key}'")
    if raw.get("schema") != 1:
        raise ConfigError("schema must be 1")
    out = {"schema": 1, "output_dir": str(raw.get("output_dir", "out"))}
    for section, defaults in _DEFAULTS.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section} must be an object")
        for key in given:
            if key not in defaults:
                raise ConfigError(f"unknown key '{section}.{key}'")
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(given))
        out[section] = merged
    return out


def _validate(d: dict):
    pl = d["plant"]
    if pl["name"] not in _PLANTS:
        raise ConfigError(f"plant.name '{pl['name']}' is not one of {sorted(_PLANTS)}")
    if not isinstance(pl["params"], dict):
        raise ConfigError("plant.params must be an object")
    c = d["controller"]
    if c["type"] not in _CONTROLLERS:
        raise ConfigError(f"controller.type must be one of {list(_CONTROLLERS)}")
    _positive(c, "controller", "Gamma")
    _positive(c, "controller", "R")
    _positive(c, "controller", "eps")
    if c["type"] == "proportional" and c["k"] is None:
        raise ConfigError("controller.k is required for proportional control")
    scalar_plant = pl["name"] == "scalar_sine"
    if scalar_plant and c["type"] not in ("none", "scalar_adaptive"):
        raise ConfigError("controller.type must be 'none' or 'scalar_adaptive' for a scalar plant")
    if not scalar_plant and c["type"] == "scalar_adaptive":
        raise ConfigError("controller.type 'scalar_adaptive' needs plant.name 'scalar_sine'")
    r = d["reference"]
    _positive(r, "reference", "omega")
    given = [k for k in ("generator", "components", "from_file") if r[k] is not None]
    if r["open_loop"]:
        given.append("open_loop")
    if len(given) > 1:
        raise ConfigError(f"reference: give only one of generator/components/from_file/open_loop, got {given}")
    dist = d["disturbance"]
    if dist["kind"] not in ("none", "periodic", "nonperiodic"):
        raise ConfigError("disturbance.kind must be 'none', 'periodic' or 'nonperiodic'")
    _positive(dist, "disturbance", "h_b", strict=False)
    s = d["simulate"]
    _positive(s, "simulate", "t_end")
    _positive(s, "simulate", "dt_out")
    cont = d["continuation"]
    rng = cont["omega_range"]
    if not (isinstance(rng, list) and len(rng) == 2 and 0 < rng[0] < rng[1]):
        raise ConfigError("continuation.omega_range must be [lo, hi] with 0 < lo < hi")
    if cont["direction"] not in ("up", "down", "both"):
        raise ConfigError("continuation.direction must be 'up', 'down' or 'both'")
    _positive(cont, "continuation", "omega0")
    sw = d["sweep"]
    if sw["direction"] not in ("up", "down", "both"):
        raise ConfigError("sweep.direction must be 'up', 'down' or 'both'")
    if not (isinstance(sw["n_points"], int) and sw["n_points"] >= 2):
        raise ConfigError("sweep.n_points must be an integer >= 2")
    _positive(sw, "sweep", "omega_start")
    _positive(sw, "sweep", "omega_stop")
    if d["pe"]["along"] not in ("reference", "closed_loop"):
        raise ConfigError("pe.along must be 'reference' or 'closed_loop'")
    if not (isinstance(d["pe"]["n_samples"], int) and d["pe"]["n_samples"] >= 129 and d["pe"]["n_samples"] % 2):
        raise ConfigError("pe.n_samples must be an odd integer >= 129")
    if not (isinstance(sw["settle_periods"], int) and sw["settle_periods"] >= 1):
        raise ConfigError("sweep.settle_periods must be an integer >= 1")
    # typed sections: let the dataclasses apply their own invariants
    for section, cls in (("protocol", ExperimentProtocol), ("integrator", IntegratorConfig)):
        try:
            cls(**d[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    chart = {k: v for k, v in cont.items() if k in {f.name for f in fields(ChartSettings)}}
    try:
        ChartSettings(**chart)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"continuation: {exc}") from None


def parse_config(source) -> RunConfig:
    """Read, default-fill and validate a config from a path or a dict."""
    where = ""
    if isinstance(source, dict):
        raw = source
    else:
        path = _resolve_config_path(source)
        where = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    d = normalize(raw)
    _validate(d)
    return RunConfig(**{k: d[k] for k in _DEFAULTS}, output_dir=d["output_dir"], schema=1, source=where)


def serialize(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def bundled_configs():
    root = resources.files("orbit_tracer") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _resolve_config_path(name):
    p = Path(name)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in bundled_configs() and p.parent == Path("."):
        return Path(str(resources.files("orbit_tracer") / "configs" / f"{stem}.json"))
    return p


# -- building objects ----------------------------------------------------------


def build_plant(cfg: RunConfig, omega=None):
    params = dict(cfg.plant["params"])
    w = omega if omega is not None else cfg.reference["omega"]
    if w is not None:
        params["omega"] = w
    try:
        p = _PLANTS[cfg.plant["name"]](**params)
    except TypeError as exc:
        raise ConfigError(f"plant.params: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"plant: {exc}") from None
    dist = cfg.disturbance
    if dist["kind"] != "none":
        if p.kind != "structured":
            raise ConfigError("disturbance needs a structured plant")
        if dist["kind"] == "periodic":
            d = plants.periodic_disturbance(dist["h_b"], p.omega, n=p.n)
        else:
            d = plants.nonperiodic_disturbance(dist["h_b"], n=p.n)
        p = plants.with_disturbance(p, d)
    return p


def build_controller(cfg: RunConfig):
    c = cfg.controller
    t = c["type"]
    try:
        if t == "none":
            return NoControl()
        if t == "proportional":
            return Proportional(tuple(c["k"]))
        if t in ("mrac", "mrac_projected"):
            S = None if c["S"] is None else _finite_list(c["S"], "controller", "S")
            th0 = None if c["theta_hat0"] is None else tuple(c["theta_hat0"])
            R, eps = c["R"], c["eps"]
            if t == "mrac_projected":
                R = 10.0 if R is None else R
                eps = 0.1 if eps is None else eps
            else:
                R = eps = None
            return Mrac(Gamma=float(c["Gamma"]), S=S, R=R, eps=eps, theta_hat0=th0)
        return ScalarAdaptive(Gamma=float(c["Gamma"]), k_hat0=float(c["k_hat0"]))
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from None


def build_integrator(cfg: RunConfig):
    return IntegratorConfig(**cfg.integrator)


def _series_from_dict(d, omega, where):
    try:
        return FourierSeries(omega, d.get("a0", 0.0), d["a"], d["b"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_reference(cfg: RunConfig, plant, integ=None):
    """State reference from the configured source; ``None`` when absent."""
    r = cfg.reference
    w = plant.omega
    if r["from_file"] is not None:
        base = Path(cfg.source).parent if cfg.source else Path(".")
        path = Path(r["from_file"])
        path = path if path.is_absolute() else base / path
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"reference.from_file: {exc}") from None
        if "components" in data:
            comps = tuple(_series_from_dict(c, w, "reference.from_file") for c in data["components"])
            return VectorFourierSeries(comps)
        v = _series_from_dict(data.get("generator", data), w, "reference.from_file")
        return synthesize_reference(v, plant.A, plant.b)
    if r["components"] is not None:
        comps = tuple(_series_from_dict(c, w, "reference.components") for c in r["components"])
        if len(comps) != plant.n:
            raise ConfigError(f"reference.components needs {plant.n} entries")
        return VectorFourierSeries(comps)
    if r["generator"] is not None:
        v = _series_from_dict(r["generator"], w, "reference.generator")
        return synthesize_reference(v, plant.A, plant.b)
    if r["open_loop"]:
        K = cfg.protocol["K"]
        q_start, _, _ = open_loop_orbit(plant, w, cfg=integ)
        from .continuation import _orbit_reference

        return _orbit_reference(plant, q_start, w, K, cfg=integ)
    return None


def _zero_reference(plant, K=5):
    return VectorFourierSeries(tuple(FourierSeries(plant.omega, 0.0, np.zeros(K), np.zeros(K))
                                     for _ in range(plant.n)))


# -- output ------------------------------------------------------------------


def _fmt(v):
    return f"{float(v):.17g}"


def write_atomic(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_svg(series, labels=("x", "y"), path=None, title="", markers=None, width=640, height=420):
    """Deterministic standalone SVG line plot.

    Parameters
    ----------
    series : list of (label, xs, ys)
        One polyline each; NaN values split nothing and are dropped.
    labels : (str, str)
        Axis labels.
    markers : list of (label, xs, ys), optional
        Drawn as circles, e.g. fold points.
    """
    if not series:
        raise ValueError("emit_svg: no series to plot")
    markers = markers or []
    clean = []
    for label, xs, ys in list(series) + list(markers):
        xs = np.asarray(xs, dtype=float).reshape(-1)
        ys = np.asarray(ys, dtype=float).reshape(-1)
        ok = np.isfinite(xs) & np.isfinite(ys)
        clean.append((str(label), xs[ok], ys[ok]))
    allx = np.concatenate([c[1] for c in clean] + [np.zeros(0)])
    ally = np.concatenate([c[2] for c in clean] + [np.zeros(0)])
    if allx.size == 0:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    else:
        x0, x1 = float(allx.min()), float(allx.max())
        y0, y1 = float(ally.min()), float(ally.max())
    if x1 - x0 <= 0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 <= 0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 70, 150, 30, 50
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{ml + pw / 2:.2f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(xv):.2f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{xv:.4g}</text>')
        out.append(f'<text x="{ml - 6}" y="{py(yv) + 3:.2f}" text-anchor="end" font-size="10">{yv:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 10}" text-anchor="middle" font-size="12">{_esc(labels[0])}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.2f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {mt + ph / 2:.2f})">{_esc(labels[1])}</text>')
    n_lines = len(series)
    for i, (label, xs, ys) in enumerate(clean):
        color = palette[i % len(palette)]
        if i < n_lines:
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        else:
            for x, y in zip(xs, ys):
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="none" stroke="{color}"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" stroke="{color}"/>')
        out.append(f'<text x="{ml + pw + 34}" y="{ly}" font-size="11">{_esc(label)}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        write_atomic(path, text)
    return text


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _summary_text(summary):
    return json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in np.asarray(v, dtype=object).tolist()] if not isinstance(v, np.ndarray) \
            else [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        return float(f"{float(v):.17g}")
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def threads_from_env():
    raw = os.environ.get("ORBIT_TRACER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("ORBIT_TRACER_THREADS must be a positive integer") from None
    if n < 1:
        raise ConfigError("ORBIT_TRACER_THREADS must be a positive integer")
    return n


# -- commands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig):
    """Closed-loop (or open-loop) time simulation. Returns ``(summary, outputs)``."""
    integ = build_integrator(cfg)
    plant = build_plant(cfg)
    ctrl = build_controller(cfg)
    r = build_reference(cfg, plant, integ)
    if r is None:
        if ctrl.kind != "none":
            raise ConfigError("reference: a controlled simulation needs a reference")
        r = _zero_reference(plant, cfg.protocol["K"])
    loop = ClosedLoop(plant, ctrl, r)
    s = cfg.simulate
    q0 = np.zeros(plant.n) if s["q0"] is None else _finite_list(s["q0"], "simulate", "q0")
    if q0.shape != (plant.n,):
        raise ConfigError(f"simulate.q0 must have {plant.n} entries")
    z0 = loop.initial_state(q0)
    t_end, dt = float(s["t_end"]), float(s["dt_out"])
    run = simulate(loop, z0, 0.0, t_end, dt, integ)
    T = plant.period
    final = run.t >= t_end - T - 1e-9
    summary = {
        "command": "simulate",
        "plant": plant.name,
        "controller": ctrl.kind,
        "t_end": t_end,
        "steps": run.meta["steps"],
        "final_u_max": float(np.max(np.abs(run.u[final]))),
        "final_x_max": float(np.max(np.linalg.norm(run.x[final], axis=1))),
    }
    series = [("|x|", run.t, np.linalg.norm(run.x, axis=1)), ("|u|", run.t, np.abs(run.u))]
    # final-period harmonics of q
    N = cfg.protocol["n_samples"]
    K = cfg.protocol["K"]
    if t_end >= T:
        ts = (t_end - T) + T * np.arange(N) / N
        Zs = run.meta["traj"](ts)
        coeffs = dft_coefficients(Zs[:, :plant.n], K)
        summary["final_period_q_coefficients"] = coeffs.T.tolist()
        if ctrl.kind == "scalar_adaptive":
            # diagnostics: the true forcing left by r (reads hidden truth)
            from .plant import true_forcing_g

            g = true_forcing_g(plant, r)
            u_s = loop.control(ts, Zs.T)
            summary["final_u_plus_g_max"] = float(np.max(np.abs(u_s + g(ts)[0])))
            summary["g_b"] = g.g_max
            summary["k_hat_final"] = float(run.k_hat[-1])
            # k_hat' >= 0 exactly; the discrete solution may dip by integration error only
            slack = integ.atol + integ.rtol * np.abs(run.k_hat[1:])
            summary["k_hat_nondecreasing"] = bool(np.all(np.diff(run.k_hat) >= -slack))
    if ctrl.kind == "mrac":
        diag = lyapunov_diagnostics(run, plant.theta, loop.P, ctrl.Gamma,
                                    S=loop.S, h_b=cfg.disturbance["h_b"] if cfg.disturbance["kind"] != "none" else None)
        per_period = max(1, int(round(T / dt)))
        V = diag["V"]
        drift = float(np.max(V[per_period:] - V[:-per_period], initial=0.0)) if V.size > per_period else 0.0
        summary.update({
            "final_e_norm": float(diag["e_norm"][-1]),
            "final_theta_err": float(diag["theta_err"][-1]),
            "max_e_norm": float(np.max(diag["e_norm"])),
            "max_theta_err": float(np.max(diag["theta_err"])),
            "e_bound": diag["e_bound"],
            "theta_bound": diag["theta_bound"],
            "max_V_drift_per_period": drift,
            "max_theta_hat_norm": float(np.max(np.linalg.norm(run.theta_hat, axis=1))),
        })
        if "e_ultimate_bound" in diag:
            summary["e_ultimate_bound"] = diag["e_ultimate_bound"]
        series += [("|e|", run.t, diag["e_norm"]), ("|theta err|", run.t, diag["theta_err"])]
    elif ctrl.kind == "scalar_adaptive":
        series.append(("k_hat", run.t, run.k_hat))
    outputs = {
        "trajectory.csv": run.to_csv(),
        "simulate.svg": emit_svg(series, ("t", "value"), title=f"{plant.name} / {ctrl.kind}"),
    }
    return summary, outputs


def _experiment(cfg, plant):
    proto = ExperimentProtocol(**cfg.protocol)
    return Experiment(plant, build_controller(cfg), proto, build_integrator(cfg))


BRANCH_HEADER_FIXED = ["idx", "omega", "amplitude", "residual_norm", "newton_iters", "step",
                       "floq_re1", "floq_im1", "floq_re2", "floq_im2"]


def branch_csv(points, K):
    header = BRANCH_HEADER_FIXED + ["coeff_a0"] + [f"coeff_a{k}" for k in range(1, K + 1)] + \
        [f"coeff_b{k}" for k in range(1, K + 1)]
    rows = []
    for i, p in enumerate(points):
        fl = [float("nan")] * 4
        if p.floquet is not None:
            mu = sorted(np.asarray(p.floquet, dtype=complex), key=lambda z: (-abs(z), z.real, z.imag))
            for j, z in enumerate(mu[:2]):
                fl[2 * j] = z.real
                fl[2 * j + 1] = z.imag
        rows.append([i, float(p.omega), float(p.amplitude), float(p.residual_norm), int(p.newton_iters),
                     float(p.step)] + [float(v) for v in fl] + [float(v) for v in p.coefficients])
    return _csv(header, rows)


def trace_branch(cfg: RunConfig, plant=None):
    """Trace the configured branch; both directions from ``omega0`` when asked."""
    c = cfg.continuation
    plant = plant or build_plant(cfg, omega=c["omega0"])
    ex = _experiment(cfg, plant)
    chart = ChartSettings(**{k: v for k, v in c.items() if k in {f.name for f in fields(ChartSettings)}})
    from .continuation import initial_point

    start, state = initial_point(ex, c["omega0"], chart)
    rng = tuple(c["omega_range"])
    dirs = {"up": [1], "down": [-1], "both": [-1, 1]}[c["direction"]]
    pieces = {}
    status = []
    for d in dirs:
        s0 = copy.copy(start)
        res = continue_branch(ex, omega_range=rng, settings=chart, direction=d, start=(s0, state))
        pieces[d] = res
        status.append(res.status)
    if len(dirs) == 2:
        down = pieces[-1].points
        up = pieces[1].points
        points = [copy.copy(p) for p in reversed(down)]
        for p in points:
            p.tangent = -p.tangent
        points += up[1:]
    else:
        points = pieces[dirs[0]].points
    return points, status, ex


def cmd_continue(cfg: RunConfig):
    t0 = time.perf_counter()
    plant = build_plant(cfg, omega=cfg.continuation["omega0"])
    points, status, ex = trace_branch(cfg, plant)
    if cfg.continuation["floquet"]:
        for p in points:
            try:
                p.floquet = floquet_diagnostics(plant, p, ex)
            except (IntegrationError, LinAlgError, np.linalg.LinAlgError):
                p.floquet = None
    K = ex.K
    folds = count_folds(points)
    omegas = np.array([p.omega for p in points])
    amps = np.array([p.amplitude for p in points])
    series = [("branch", omegas, amps)]
    overlay = cfg.continuation["sweep_overlay"]
    if overlay:
        base = Path(cfg.source).parent if cfg.source else Path(".")
        path = Path(overlay) if Path(overlay).is_absolute() else base / overlay
        data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
        for d in ("up", "down"):
            sel = data["direction"] == d
            if np.any(sel):
                series.append((f"sweep {d}", data["omega"][sel], data["amplitude"][sel]))
    fold_marks = [("folds", omegas[[i for i in folds]], amps[[i for i in folds]])] if folds else None
    stalled = "stalled" in status
    summary = {
        "command": "continue",
        "plant": plant.name,
        "status": "stalled" if stalled else "ok",
        "leg_status": status,
        "points": len(points),
        "folds": len(folds),
        "fold_omegas": [float(omegas[i]) for i in folds],
        "max_residual_norm": float(max(p.residual_norm for p in points)),
        "experiments": ex.runs,
        "adaptation_reset": ex.proto.adaptation_reset,
        "warm_start": ex.proto.warm_start,
        "threads": threads_from_env(),
        "wall_time": time.perf_counter() - t0,
    }
    unstable = [p.omega for p in points if p.floquet is not None and np.max(np.abs(p.floquet)) > 1]
    summary["unstable_points"] = len(unstable)
    outputs = {
        "branch.csv": branch_csv(points, K),
        "branch.svg": emit_svg(series, ("omega", "amplitude"), title="branch", markers=fold_marks),
    }
    if stalled:
        raise NonConvergence("continuation stalled (step size underflow)", outputs, summary)
    return summary, outputs


def cmd_sweep(cfg: RunConfig):
    s = cfg.sweep
    plant = build_plant(cfg, omega=s["omega_start"])
    grid = np.linspace(s["omega_start"], s["omega_stop"], s["n_points"])
    integ = build_integrator(cfg)
    rows = []
    series = []
    dirs = {"up": ["up"], "down": ["down"], "both": ["up", "down"]}[s["direction"]]
    for d in dirs:
        g = np.sort(grid) if d == "up" else np.sort(grid)[::-1]
        res = open_loop_sweep(plant, g, settle_periods=s["settle_periods"], cfg=integ)
        rows += [[d, w, a, int(c)] for w, a, c in res]
        series.append((f"sweep {d}", [r[0] for r in res], [r[1] for r in res]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["direction", "omega", "amplitude", "converged"])
    for d, om, a, c in rows:
        w.writerow([d, _fmt(om), _fmt(a), c])
    summary = {
        "command": "sweep",
        "plant": plant.name,
        "points": len(rows),
        "converged": int(sum(r[3] for r in rows)),
    }
    return summary, {"sweep.csv": buf.getvalue(), "sweep.svg": emit_svg(series, ("omega", "max |q1|"))}


def cmd_pe_check(cfg: RunConfig):
    integ = build_integrator(cfg)
    plant = build_plant(cfg)
    r = build_reference(cfg, plant, integ)
    if r is None:
        raise ConfigError("reference: pe-check needs a reference")
    if plant.kind != "structured":
        raise ConfigError("pe-check needs a structured plant")
    M = cfg.pe["n_samples"]
    T = plant.period
    if cfg.pe["along"] == "reference":
        t0 = cfg.pe["window_start"]
        ts = t0 + np.linspace(0.0, T, M)
        q = r.eval(ts)
    else:
        # steady closed-loop response over the last simulated period
        loop = ClosedLoop(plant, build_controller(cfg), r)
        t_end = float(cfg.simulate["t_end"])
        traj = integrate(loop.field, loop.initial_state(np.zeros(plant.n)), 0.0, t_end, integ)
        t0 = t_end - T
        ts = t0 + np.linspace(0.0, T, M)
        q = traj(ts)[:, :plant.n].T
    Qs = plant.Q(ts, q, plant.omega).T
    rep = pe_gram(Qs, T, t0)
    summary = {"command": "pe-check", "plant": plant.name, "along": cfg.pe["along"],
               "alpha": rep.alpha, "gram": rep.gram.tolist(), "window_start": t0}
    return summary, {}


_DISPATCH = {"simulate": cmd_simulate, "continue": cmd_continue, "sweep": cmd_sweep,
             "pe-check": cmd_pe_check}


def run_command(command, cfg: RunConfig, out_dir=None):
    """Run one command and write its outputs; returns ``(exit_code, summary)``."""
    out = Path(out_dir or cfg.output_dir)
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        summary, outputs = _DISPATCH[command](cfg)
        summary["status"] = summary.get("status", "ok")
    except NonConvergence as exc:
        summary, outputs, code = exc.summary or {"status": "nonconverged"}, exc.outputs, EXIT_NONCONVERGED
        summary["error"] = str(exc)
    summary["wall_time"] = time.perf_counter() - t0
    summary = _jsonable(summary)
    for name, text in outputs.items():
        write_atomic(out / name, text)
    # wall time is the only nondeterministic field; keep it out of the file
    stable = {k: v for k, v in summary.items() if k != "wall_time"}
    write_atomic(out / "summary.json", _summary_text(stable))
    return code, summary


def main(argv=None):
    parser = argparse.ArgumentParser(prog="orbit-tracer", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config path or bundled config name")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        threads_from_env()
        cfg = parse_config(args.config)
        code, summary = run_command(args.command, cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ContinuationError as exc:
        msg = str(exc)
        print(f"numerical failure: {msg}", file=sys.stderr)
        return EXIT_NONCONVERGED if "converge" in msg else EXIT_NUMERIC
    except (IntegrationError, LinAlgError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if not args.quiet:
        for k, v in summary.items():
            if not isinstance(v, (list, dict)):
                print(f"{k}: {v}")
    return code


if __name__ == "__main__":
    sys.exit(main())
