"""Command line front end: ``shapelab <experiment> CONFIG`` and ``shapelab report DIR``.

Configuration is YAML::

    format_version: 1
    environment: {d: 1, intensity: 1.0, amplitude: {kind: uniform, params: [-1, 1]},
                  r_t: 1.0, r_x: 1.0, r_t_max: 1.0, r_x_max: 1.0}
    kinetic: {kind: quadratic, scale: 1.0}
    grid: {dt: 0.5, dx: 0.125, steps: 400, window: 16}
    experiment: {kind: shape, v: [0.0, 0.5], T: [25, 50, 100, 200], seeds: [0, 1, 2]}
    output: runs/shape-demo          # optional

Exit codes: 0 success, 2 configuration error, 3 numerical or solver error.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .asymptotics import (_make_env, finite_difference_gradient, fit_domain, homogenization_curve,
                          panel_alpha_beta, path_second_order, shape_survey)
from .diagnostics import discretize_path, length_bound_audit, lower_bound_audit, m_growth_audit
from .environment import (Box, DomainError, EnvironmentSpec, ValidationError, cloud_to_dict,
                          sample_environment)
from .kinetics import KineticEnergy
from .solver import (BoundaryHitError, Frame, GridSpec, SnapError, UnreachableError,
                     extract_minimizer, solve)

FORMAT_VERSION = 1
OUTPUT_ENV = "SHAPELAB_OUTPUT"
EXPERIMENTS = ("env-sample", "solve", "shape", "grad", "panel", "homog", "audit")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# configuration


_EXPERIMENT_KEYS = {
    "env-sample": {"seeds", "window"},
    "solve": {"seeds", "v", "alpha", "beta", "targets", "save_stack"},
    "shape": {"seeds", "v", "T", "margin", "workers"},
    "grad": {"seeds", "v", "T", "h", "margin", "workers"},
    "panel": {"seeds", "v", "alphas", "betas"},
    "homog": {"seeds", "t", "x", "epsilons", "reference_T", "margin"},
    "audit": {"seeds", "v", "T", "delta0", "density", "margin"},
}


def _number(value, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(field, "must be finite")
    return float(value)


def _numbers(value, field: str) -> list[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(field, "expected a non-empty list of numbers")
    return [_number(v, f"{field}[{i}]") for i, v in enumerate(value)]


def _vectors(value, field: str, d: int) -> list[list[float]]:
    if not isinstance(value, list):
        value = [value]
    out = []
    for i, item in enumerate(value):
        vec = _numbers(item, f"{field}[{i}]")
        if len(vec) != d:
            raise ConfigError(f"{field}[{i}]", f"expected {d} components")
        out.append(vec)
    if not out:
        raise ConfigError(field, "expected at least one entry")
    return out


def _seeds(value, field: str = "experiment.seeds") -> list[int]:
    if isinstance(value, dict):
        try:
            start, count = int(value["start"]), int(value["count"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(field, "use a list of integers or {start, count}")
        value = list(range(start, start + count))
    if not isinstance(value, list) or not value or \
            not all(isinstance(s, int) and not isinstance(s, bool) and 0 <= s < 2**64 for s in value):
        raise ConfigError(field, "expected a non-empty list of 64-bit non-negative integers")
    if len(set(value)) != len(value):
        raise ConfigError(field, "seeds must be distinct")
    return list(value)


def _multiple_of(value: float, step: float, field: str) -> int:
    k = round(value / step)
    if k < 1 or abs(k * step - value) > 1e-9 * max(1.0, abs(value)):
        raise ConfigError(field, f"{value} is not a positive multiple of {step}")
    return k


def load_config(path, kind: str | None = None) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}")
    except yaml.YAMLError as err:
        raise ConfigError("config", f"not valid YAML: {err}")
    return normalize_config(raw, kind)


def normalize_config(raw, kind: str | None = None) -> dict:
    """Validate a raw mapping and fill defaults; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    allowed = {"format_version", "environment", "kinetic", "grid", "experiment", "output"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(str(key), "unknown section")
    if raw.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ConfigError("format_version", f"unsupported version {raw.get('format_version')!r}")
    env_raw = raw.get("environment") or {}
    if not isinstance(env_raw, dict):
        raise ConfigError("environment", "expected a mapping")
    for key in ("d", "intensity", "seed", "r_t_max", "r_x_max"):
        if key in env_raw:
            _number(env_raw[key], f"environment.{key}")
    try:
        env = EnvironmentSpec.from_dict(env_raw).validate()
        if env.intensity < 0:
            raise ValidationError("environment.intensity", "must be >= 0")
        L = KineticEnergy.from_dict(raw.get("kinetic") or {"kind": "quadratic", "scale": 1.0})
        grid = GridSpec.from_dict(raw.get("grid") or {})
    except ValidationError as err:
        raise ConfigError(err.field, str(err).split(": ", 1)[-1])
    except TypeError as err:
        raise ConfigError("grid", f"missing or malformed fields ({err})")
    if grid.d != env.d:
        raise ConfigError("grid.d", f"grid dimension {grid.d} != environment.d {env.d}")

    exp = dict(raw.get("experiment") or {})
    exp_kind = exp.pop("kind", kind)
    if kind is not None and exp_kind != kind:
        raise ConfigError("experiment.kind", f"config is for {exp_kind!r}, not {kind!r}")
    if exp_kind not in EXPERIMENTS:
        raise ConfigError("experiment.kind", f"must be one of {', '.join(EXPERIMENTS)}")
    for key in exp:
        if key not in _EXPERIMENT_KEYS[exp_kind]:
            raise ConfigError(f"experiment.{key}", f"not a parameter of {exp_kind}")
    params = _normalize_experiment(exp_kind, exp, grid, env.d)
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output", "expected a path string")
    return {"format_version": FORMAT_VERSION, "environment": env.to_dict(), "kinetic": L.to_dict(),
            "grid": grid.to_dict(), "experiment": {"kind": exp_kind, **params}, "output": output}


def _normalize_experiment(kind: str, exp: dict, grid: GridSpec, d: int) -> dict:
    p: dict = {"seeds": _seeds(exp.get("seeds", [0]))}
    v_step = grid.dx / grid.dt
    if kind == "env-sample":
        win = exp.get("window")
        if not isinstance(win, dict):
            raise ConfigError("experiment.window", "expected {t: [lo, hi], x_lo: [...], x_hi: [...]}")
        t = _numbers(win.get("t"), "experiment.window.t")
        lo = _numbers(win.get("x_lo"), "experiment.window.x_lo")
        hi = _numbers(win.get("x_hi"), "experiment.window.x_hi")
        try:
            Box(t[0], t[-1], tuple(lo), tuple(hi)).validate()
        except ValidationError as err:
            raise ConfigError("experiment.window", str(err).split(": ", 1)[-1])
        if len(lo) != d:
            raise ConfigError("experiment.window.x_lo", f"expected {d} components")
        p["window"] = {"t": [t[0], t[-1]], "x_lo": lo, "x_hi": hi}
    elif kind == "solve":
        p["v"] = _vectors(exp.get("v", [[0.0] * d]), "experiment.v", d)[0]
        p["alpha"] = _number(exp.get("alpha", 1.0), "experiment.alpha")
        p["beta"] = _number(exp.get("beta", 1.0), "experiment.beta")
        if p["alpha"] <= 0 or p["beta"] < 0:
            raise ConfigError("experiment.alpha", "need alpha > 0 and beta >= 0")
        if any(c != 0 for c in p["v"]) and not grid.commensurate(p["v"]):
            raise ConfigError("experiment.v", f"v*dt/dx must be an integer (v step {v_step})")
        p["targets"] = _vectors(exp.get("targets", [[0.0] * d]), "experiment.targets", d)
        for i, x in enumerate(p["targets"]):
            if any(abs(c / grid.dx - round(c / grid.dx)) > 1e-9 for c in x):
                raise ConfigError(f"experiment.targets[{i}]", "not on the dx grid")
        p["save_stack"] = bool(exp.get("save_stack", False))
    elif kind in ("shape", "grad"):
        p["v"] = _vectors(exp.get("v", [[0.0] * d]), "experiment.v", d)
        T = _numbers(exp.get("T", [grid.T]), "experiment.T")
        for i, val in enumerate(T):
            _multiple_of(val, grid.dt, f"experiment.T[{i}]")
        if sorted(set(T)) != T:
            raise ConfigError("experiment.T", "checkpoints must be strictly increasing")
        p["T"] = T
        p["margin"] = _number(exp.get("margin", 30.0), "experiment.margin")
        p["workers"] = int(exp.get("workers", 1))
        if kind == "grad":
            p["h"] = _number(exp.get("h", v_step), "experiment.h")
            if p["h"] <= 0:
                raise ConfigError("experiment.h", "must be > 0")
    elif kind == "panel":
        p["v"] = _vectors(exp.get("v", [[0.0] * d]), "experiment.v", d)[0]
        if not grid.commensurate(p["v"]):
            raise ConfigError("experiment.v", f"v*dt/dx must be an integer (v step {v_step})")
        p["alphas"] = _numbers(exp.get("alphas", [0.5, 0.75, 1.0, 1.25, 1.5]), "experiment.alphas")
        p["betas"] = _numbers(exp.get("betas", [0.5, 0.75, 1.0, 1.25, 1.5]), "experiment.betas")
        if min(p["alphas"]) <= 0:
            raise ConfigError("experiment.alphas", "must be > 0")
        if min(p["betas"]) <= 0:
            raise ConfigError("experiment.betas", "must be > 0")
    elif kind == "homog":
        p["t"] = _number(exp.get("t", 1.0), "experiment.t")
        p["x"] = _vectors(exp.get("x", [[0.0] * d]), "experiment.x", d)[0]
        p["epsilons"] = _numbers(exp.get("epsilons", [1.0, 0.5, 0.25, 0.125, 0.0625]), "experiment.epsilons")
        for i, eps in enumerate(p["epsilons"]):
            if eps <= 0:
                raise ConfigError(f"experiment.epsilons[{i}]", "must be > 0")
            _multiple_of(p["t"] / eps, grid.dt, f"experiment.epsilons[{i}]")
            if any(abs(c / eps / grid.dx - round(c / eps / grid.dx)) > 1e-9 for c in p["x"]):
                raise ConfigError(f"experiment.epsilons[{i}]", "x/eps is not on the dx grid")
        p["reference_T"] = _number(exp.get("reference_T", 200.0), "experiment.reference_T")
        _multiple_of(p["reference_T"], grid.dt, "experiment.reference_T")
        p["margin"] = _number(exp.get("margin", 30.0), "experiment.margin")
    elif kind == "audit":
        p["v"] = _vectors(exp.get("v", [[0.0] * d]), "experiment.v", d)[0]
        T = _numbers(exp.get("T", [grid.T]), "experiment.T")
        for i, val in enumerate(T):
            _multiple_of(val, grid.dt, f"experiment.T[{i}]")
        p["T"] = T
        p["delta0"] = _number(exp.get("delta0", 0.5), "experiment.delta0")
        if not 0 < p["delta0"] < 1:
            raise ConfigError("experiment.delta0", "must lie in (0, 1)")
        p["density"] = int(exp.get("density", 5))
        p["margin"] = _number(exp.get("margin", 30.0), "experiment.margin")
    return p


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


def compat_hash(cfg: dict) -> str:
    """Hash of everything except seeds and output location; runs sharing it may be pooled."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    body = json.loads(_canonical(body))
    body["experiment"].pop("seeds", None)
    body["experiment"].pop("workers", None)
    body["environment"].pop("seed", None)
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


# ---------------------------------------------------------------------------
# experiments


def _objects(cfg: dict):
    env = EnvironmentSpec.from_dict(cfg["environment"])
    L = KineticEnergy.from_dict(cfg["kinetic"])
    grid = GridSpec.from_dict(cfg["grid"])
    return env, L, grid


def _run_env_sample(cfg, out: Path) -> tuple[dict, dict]:
    env, _, _ = _objects(cfg)
    p = cfg["experiment"]
    w = p["window"]
    box = Box(w["t"][0], w["t"][1], tuple(w["x_lo"]), tuple(w["x_hi"]))
    rows, files = [], {}
    for seed in p["seeds"]:
        cloud = sample_environment(env.with_seed(seed), box)
        name = f"cloud_seed{seed}.json"
        (out / name).write_text(json.dumps(cloud_to_dict(cloud)))
        rows.append([seed, len(cloud), cloud.digest()])
    files["counts.csv"] = (["seed", "points", "digest"], rows)
    return {"counts": {str(r[0]): r[1] for r in rows}}, files


def _run_solve(cfg, out: Path) -> tuple[dict, dict]:
    env_spec, L, grid = _objects(cfg)
    p = cfg["experiment"]
    frame = Frame(v=tuple(p["v"]), alpha=p["alpha"], beta=p["beta"])
    results, files = {}, {}
    for seed in p["seeds"]:
        env = _make_env(env_spec, grid, seed, frame)
        try:
            stack = solve(env, L, grid, frame)
            entries = []
            for x in p["targets"]:
                node = stack.node_of(x)
                value = stack.value(node)
                entry = {"target": x, "value": value}
                if math.isfinite(value):
                    path = extract_minimizer(stack, node)
                    entry["minimizer_nodes"] = path.nodes.tolist()
                entries.append(entry)
        except BoundaryHitError as err:
            raise BoundaryHitError(f"seed {seed}: {err}", step=err.step) from err
        results[str(seed)] = entries
        coords = stack.coordinates()
        vals = stack.values[-1].ravel()
        rows = [[repr(float(c)) for c in row] + [repr(float(v))] for row, v in zip(coords, vals)]
        files[f"slice_seed{seed}.csv"] = ([f"x{j + 1}" for j in range(grid.d)] + ["value"], rows)
        if p["save_stack"]:
            stack.save(out / f"stack_seed{seed}.npz", code_version=__version__)
    return {"targets": results, "frame": {"v": p["v"], "alpha": p["alpha"], "beta": p["beta"]}}, files


def _run_shape(cfg, out: Path, with_gradient: bool = False) -> tuple[dict, dict]:
    env, L, grid = _objects(cfg)
    p = cfg["experiment"]
    vs = [tuple(v) for v in p["v"]]
    extra = []
    if with_gradient:
        if grid.d != 1:
            raise ConfigError("experiment.v", "finite-difference comparison is implemented for d = 1")
        h = p["h"]
        extra = [(v[0] + s * h,) for v in vs for s in (-1, 1)]
    all_vs = list(dict.fromkeys(vs + extra))
    ests = shape_survey(env, L, grid, all_vs, p["T"], p["seeds"], with_gradient=with_gradient,
                        workers=p["workers"], margin=p["margin"])
    by_v = dict(zip(all_vs, ests))
    per_seed = []
    for v in all_vs:
        est = by_v[v]
        for s_i, seed in enumerate(est.seeds):
            for T, val in zip(est.T_checkpoints, est.lambda_series[s_i]):
                per_seed.append([seed, *v, T, repr(float(val))])
    conv = [[*v, T, repr(m), repr(e)] for v in vs for T, m, e in by_v[v].convergence_table()]
    vcols = [f"v{j + 1}" for j in range(grid.d)]
    files = {"per_seed.csv": (["seed", *vcols, "T", "A_over_T"], per_seed),
             "convergence.csv": ([*vcols, "T", "mean", "stderr"], conv)}
    report = {"estimates": [by_v[v].to_dict() for v in vs]}
    if with_gradient:
        rows, grads = [], []
        for v in vs:
            est = by_v[v]
            fd, fd_se = finite_difference_gradient({k[0]: e for k, e in by_v.items()}, v[0], p["h"])
            g, g_se = float(est.grad_hat[0]), float(est.grad_stderr[0])
            combined = math.sqrt(g_se ** 2 + fd_se ** 2)
            grads.append({"v": list(v), "grad_hat": g, "grad_stderr": g_se, "fd": fd, "fd_stderr": fd_se,
                          "gap": abs(g - fd), "tolerance": max(0.05, 3 * combined)})
            rows.append([*v, repr(g), repr(g_se), repr(fd), repr(fd_se), repr(abs(g - fd))])
        files["gradient.csv"] = ([*vcols, "grad_hat", "grad_stderr", "fd", "fd_stderr", "gap"], rows)
        report["gradient"] = grads
        report["neighbours"] = [by_v[v].to_dict() for v in extra if v not in vs]
    return report, files


def _run_panel(cfg, out: Path) -> tuple[dict, dict]:
    env, L, grid = _objects(cfg)
    p = cfg["experiment"]
    panel = panel_alpha_beta(env, L, grid, p["v"], p["alphas"], p["betas"], p["seeds"])
    rows = []
    for i, a in enumerate(panel.alphas):
        for j, b in enumerate(panel.betas):
            rows.append([a, b, repr(float(panel.lambda_hat[i, j])), repr(float(panel.Lbar[:, i, j].mean())),
                         repr(float(panel.Fbar[:, i, j].mean()))])
    report = panel.to_dict()
    report["concavity_violations"] = len(panel.concavity_violations())
    report["envelope_violations"] = len(panel.envelope_violations())
    return report, {"panel.csv": (["alpha", "beta", "B_over_T", "Lbar", "Fbar"], rows)}


def _run_homog(cfg, out: Path) -> tuple[dict, dict]:
    env, L, grid = _objects(cfg)
    p = cfg["experiment"]
    curve = homogenization_curve(env, L, grid, p["t"], p["x"], p["epsilons"], p["seeds"],
                                 reference_T=p["reference_T"], margin=p["margin"])
    rows = [[e, repr(g), repr(b)] for e, g, b in curve.table()]
    return curve.to_dict(), {"homogenization.csv": (["epsilon", "mean_gap", "bias"], rows)}


def _run_audit(cfg, out: Path) -> tuple[dict, dict]:
    env_spec, L, grid = _objects(cfg)
    p = cfg["experiment"]
    v = np.asarray(p["v"], dtype=float)
    rows, per_seed, paths_by_T, corpus, lower = [], {}, {}, [], []
    steps = [round(T / grid.dt) for T in p["T"]]
    run = fit_domain(grid.with_(steps=max(steps)), np.array([k * grid.dt * v for k in steps]), p["margin"])
    for seed in p["seeds"]:
        env = _make_env(env_spec, run, seed)
        stack = solve(env, L, run)
        series = {"T": [], "M": [], "N": []}
        for k in steps:
            T = k * grid.dt
            node = np.rint(T * v / grid.dx).astype(np.int64)
            path = extract_minimizer(stack, node, k)
            M, N = path_second_order(env, L, path, p["delta0"])
            paths_by_T.setdefault(T, []).append(path)
            corpus.append(path)
            m = discretize_path(path).m
            rows.append([seed, T, repr(M), repr(N), repr(m / T)])
            for key, val in (("T", T), ("M", M), ("N", N)):
                series[key].append(val)
        lower.append(lower_bound_audit(env, L, run, corpus[-1], density=p["density"]))
        per_seed[str(seed)] = series
    report = {"second_order": per_seed, "m_growth": m_growth_audit(paths_by_T),
              "length_bound": {k: val for k, val in length_bound_audit(corpus).items()
                               if k in ("c_theory", "C_theory", "holds_theory", "c_fit", "C_fit")},
              "lower_bound": lower}
    return report, {"audit.csv": (["seed", "T", "M", "N", "m_over_T"], rows)}


RUNNERS = {"env-sample": _run_env_sample, "solve": _run_solve, "shape": _run_shape,
           "grad": lambda cfg, out: _run_shape(cfg, out, with_gradient=True),
           "panel": _run_panel, "homog": _run_homog, "audit": _run_audit}


def _write_csv(path: Path, header: list, rows: list, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION} config_hash={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _default_output(cfg: dict, digest: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ENV, "shapelab-runs"))
    return root / f"{cfg['experiment']['kind']}-{digest[:12]}"


def run_experiment(cfg: dict, out: Path | None = None) -> Path:
    """Run a normalized config; returns the output directory."""
    digest = config_hash(cfg)
    out = Path(out or cfg.get("output") or _default_output(cfg, digest))
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    results, files = RUNNERS[cfg["experiment"]["kind"]](cfg, out)
    wall = time.perf_counter() - start
    for name, (header, rows) in files.items():
        _write_csv(out / name, header, rows, digest)
    report = {"format_version": FORMAT_VERSION, "config_hash": digest, "compat_hash": compat_hash(cfg),
              "experiment": cfg["experiment"]["kind"], "config": cfg, "results": results}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    manifest = {"format_version": FORMAT_VERSION, "config_hash": digest, "compat_hash": compat_hash(cfg),
                "experiment": cfg["experiment"]["kind"], "seeds": cfg["experiment"]["seeds"],
                "versions": {"shapelab": __version__, "numpy": np.__version__,
                             "python": platform.python_version()},
                "wall_time_s": wall, "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "files": sorted(list(files) + ["report.json"])}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


# ---------------------------------------------------------------------------
# report merging


class ReportConflict(ValueError):
    pass


def merge_reports(directory) -> dict:
    """Pool every run under ``directory`` into one summary.

    Runs of one experiment kind must share a compatibility hash; shape and
    grad runs are pooled over seeds.
    """
    directory = Path(directory)
    manifests = sorted(directory.rglob("manifest.json"))
    if not manifests:
        raise ReportConflict(f"no manifest.json under {directory}")
    runs: dict[str, list] = {}
    for m in manifests:
        meta = json.loads(m.read_text())
        report = json.loads((m.parent / "report.json").read_text())
        runs.setdefault(meta["experiment"], []).append((m.parent, meta, report))
    conflicts = []
    for kind, items in runs.items():
        hashes = {meta["compat_hash"] for _, meta, _ in items}
        if len(hashes) > 1:
            details = ", ".join(f"{p.name}:{meta['compat_hash'][:12]}" for p, meta, _ in items)
            conflicts.append(f"{kind}: incompatible configs ({details})")
    if conflicts:
        raise ReportConflict("; ".join(conflicts))
    summary = {"format_version": FORMAT_VERSION, "runs": [str(p) for p, _, _ in
                                                          (x for items in runs.values() for x in items)],
               "table": []}
    for kind, items in sorted(runs.items()):
        if kind in ("shape", "grad"):
            summary["table"].extend(_pool_shape(kind, items))
        else:
            for path, meta, report in items:
                summary["table"].append({"experiment": kind, "run": path.name, "results": report["results"]})
    return summary


def _pool_shape(kind: str, items) -> list[dict]:
    pooled: dict[tuple, dict] = {}
    grads: dict[tuple, dict] = {}
    for _, _, report in items:
        res = report["results"]
        ests = res["estimates"] + res.get("neighbours", [])
        for est in ests:
            for s_i, seed in enumerate(est["seeds"]):
                for t_i, T in enumerate(est["T_checkpoints"]):
                    key = (tuple(est["v"]), T)
                    val = est["lambda_series"][s_i][t_i]
                    seen = pooled.setdefault(key, {})
                    if seed in seen and seen[seed] != val:
                        raise ReportConflict(f"seed {seed} disagrees at v={key[0]}, T={T}")
                    seen[seed] = val
                    if "grad_series" in est and t_i == len(est["T_checkpoints"]) - 1:
                        grads.setdefault(tuple(est["v"]), {})[seed] = est["grad_series"][s_i][t_i]
    rows = []
    for (v, T), by_seed in sorted(pooled.items()):
        vals = np.array([by_seed[s] for s in sorted(by_seed)])
        row = {"experiment": kind, "v": list(v), "T": T, "n_seeds": len(vals), "mean": float(vals.mean()),
               "stderr": float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None}
        if v in grads and T == max(t for (vv, t) in pooled if vv == v):
            g = np.array([grads[v][s] for s in sorted(grads[v])])
            row["grad_hat"] = g.mean(axis=0).tolist()
            row["grad_stderr"] = (g.std(axis=0, ddof=1) / math.sqrt(len(g))).tolist() if len(g) > 1 else None
        rows.append(row)
    return rows


def write_summary(summary: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    rows = [r for r in summary["table"] if "mean" in r]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["experiment", "v", "T", "n_seeds", "mean", "stderr"])
        for r in rows:
            writer.writerow([r["experiment"], " ".join(repr(c) for c in r["v"]), r["T"], r["n_seeds"],
                             repr(r["mean"]), "" if r["stderr"] is None else repr(r["stderr"])])


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapelab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENTS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("config", help="YAML configuration file")
        sp.add_argument("--out", help="output directory (overrides config and $" + OUTPUT_ENV + ")")
    rp = sub.add_parser("report", help="merge runs under a directory")
    rp.add_argument("directory")
    rp.add_argument("--out", help="where to write summary.json/summary.csv (default: the directory)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            summary = merge_reports(args.directory)
            write_summary(summary, Path(args.out or args.directory))
            print(f"merged {len(summary['runs'])} run(s)")
            return EXIT_OK
        cfg = load_config(args.config, kind=args.command)
        out = run_experiment(cfg, Path(args.out) if args.out else None)
        print(str(out))
        return EXIT_OK
    except (ConfigError, ReportConflict) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (BoundaryHitError, DomainError, SnapError, UnreachableError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
