"""Config-driven experiment runner and the ``conecraft`` CLI.

Configs are plain text: top-level ``key = value`` lines followed by
``[section]`` blocks (``[cone]``, ``[model]`` and one block named after the
experiment kind).  Vectors are bracketed comma lists; ``#`` starts a
comment.  Every run requires an explicit seed, all outputs are written with
17 significant digits, and the manifest records a digest of every emitted
file, so identical configs reproduce byte-identical outputs.

Exit status: 0 complete/PASS, 2 statistically inconclusive, 1 error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import density, geometry, leveling, models, simulate, skorokhod
from .errors import ConecraftError, ConfigError
from .rng import seed_stream

__all__ = ["parse_config", "run", "seed_stream", "main", "ExperimentConfig",
           "RunManifest"]

KINDS = ("validate", "sp_solve", "simulate", "flow", "minorization",
         "killed_floor", "leveling", "psi_gap", "scaling_check")

_TOP_SCHEMA = {"kind": "str", "seed": "int", "title": "str"}

_CONE_SCHEMA = {"preset": "str", "k": "int"}

_MODEL_SCHEMA = {"preset": "str", "drift_scale": "float", "drift": "vector",
                 "epsilon": "float", "epsilon_grid": "vector",
                 "gamma1": "float", "gamma2": "float", "sigma_lb": "float"}

_KIND_SCHEMA = {
    "validate": {"model_pairs": "int"},
    "sp_solve": {"path_csv": "str", "refine": "float"},
    "simulate": {"x0": "vector", "horizon": "float", "dt": "float",
                 "replicas": "int", "dump_path": "bool",
                 "dump_increments": "bool"},
    "flow": {"x0": "vector", "horizon": "float", "dt": "float"},
    "minorization": {"x0": "vector", "r0": "float", "r1": "float",
                     "r2": "float", "m": "float", "m1": "float",
                     "t1": "float", "t2": "float", "replicas": "int",
                     "dt": "float", "bins": "int",
                     "start_points_per_axis": "int", "e_radius": "str"},
    "killed_floor": {"center": "vector", "radius": "float", "gamma": "float",
                     "t": "float", "replicas": "int", "dt": "float",
                     "bins": "int", "start_points_per_axis": "int"},
    "leveling": {"radius": "float", "x": "vector", "y": "vector", "f": "str",
                 "f_bound": "float", "replicas": "int", "dt": "float",
                 "horizon": "float", "certify_t_max": "float",
                 "max_doublings": "int"},
    "psi_gap": {"radius": "float", "x": "vector", "y": "vector", "psi": "str",
                "q": "float", "m_exponent": "float", "replicas": "int",
                "dt": "float", "horizon": "float", "certify_t_max": "float",
                "max_doublings": "int"},
    "scaling_check": {"x_bar": "vector", "horizon": "float",
                      "dt_grid": "vector", "n_paths": "int",
                      "bound_scale": "float"},
}

_DEFAULTS = {
    "validate": {"model_pairs": 10_000},
    "sp_solve": {"refine": 1e-3},
    "simulate": {"dt": 1e-3, "replicas": 1, "dump_path": True,
                 "dump_increments": False},
    "flow": {"dt": 1e-3},
    "minorization": {"t1": 1.0, "replicas": 10_000, "dt": 1e-3, "bins": 3,
                     "start_points_per_axis": 3, "e_radius": "r0"},
    "killed_floor": {"radius": 1.0, "replicas": 10_000, "dt": 1e-3,
                     "bins": 5, "start_points_per_axis": 3},
    "leveling": {"f_bound": 1.0, "replicas": 10_000, "dt": 1e-3,
                 "max_doublings": 3},
    "psi_gap": {"psi": "sqrt_log", "q": 0.5, "m_exponent": 1.0,
                "replicas": 10_000, "dt": 1e-3, "max_doublings": 3},
    "scaling_check": {"horizon": 1.0, "dt_grid": [1e-3], "n_paths": 100,
                      "bound_scale": 5.0},
}

# experiment kinds driven by an epsilon grid rather than a single epsilon
_GRID_KINDS = {"minorization", "killed_floor", "leveling", "psi_gap",
               "scaling_check"}

F_FUNCTIONALS = {
    "indicator_first_gt_second": lambda z: 1.0 if z[0] > z[1] else 0.0,
    "first_coordinate": lambda z: float(z[0]),
    "norm": lambda z: float(np.linalg.norm(z)),
    "one": lambda z: 1.0,
}

PSI_FUNCTIONS = {
    "sqrt_log": lambda t: float(np.sqrt(1.0 + max(np.log(t), 0.0))) if t > 0 else 1.0,
    "constant": lambda t: 1.0,
}


def _parse_value(raw, typ, line):
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ == "vector":
            if not (raw.startswith("[") and raw.endswith("]")):
                raise ValueError("expected a bracketed comma list")
            inner = raw[1:-1].strip()
            if not inner:
                return []
            return [float(tok) for tok in inner.split(",")]
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value '{raw}' as {typ}: {exc}",
                          line=line) from None


def _indexed_key(key, prefix):
    if key.startswith(prefix):
        tail = key[len(prefix):]
        if tail.isdigit() and int(tail) >= 1:
            return int(tail)
    return None


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description (defaults filled)."""

    kind: str
    seed: int
    cone: object
    model: object                 # base model; eps applied per experiment
    epsilon: float | None
    eps_grid: list | None
    params: dict
    echo: dict = field(default_factory=dict)


def _tokenize(text):
    entries = {}
    section = None
    order = []
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("cone", "model") + KINDS:
                raise ConfigError(f"unknown section '[{section}]'", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, raw = line.partition("=")
        key = key.strip().lower()
        if (section, key) in entries:
            raise ConfigError(f"duplicate key '{key}'", line=lineno)
        entries[(section, key)] = (raw.strip(), lineno)
        order.append((section, key))
    return entries


def _schema_for(section, kind):
    if section is None:
        return _TOP_SCHEMA
    if section == "cone":
        return _CONE_SCHEMA
    if section == "model":
        return _MODEL_SCHEMA
    return _KIND_SCHEMA[section]


def _build_cone(entries):
    keys = {k: v for (s, k), v in entries.items() if s == "cone"}
    if not keys:
        raise ConfigError("missing [cone] section", kind="VALIDATE")
    if "preset" in keys:
        name, line = keys["preset"][0], keys["preset"][1]
        k = int(keys["k"][0]) if "k" in keys else (1 if name == "halfline" else 2)
        if name == "orthant":
            return geometry.orthant(k)
        if name == "halfline":
            return geometry.halfline()
        raise ConfigError(f"unknown cone preset '{name}'", line=line,
                          kind="VALIDATE")
    if "k" not in keys:
        raise ConfigError("cone needs 'k' with explicit faces", kind="VALIDATE")
    k = int(keys["k"][0])
    normals, directions = [], []
    i = 1
    while f"normal_{i}" in keys:
        normals.append(_parse_value(keys[f"normal_{i}"][0], "vector",
                                    keys[f"normal_{i}"][1]))
        if f"direction_{i}" not in keys:
            raise ConfigError(f"face {i} has a normal but no direction",
                              kind="VALIDATE")
        directions.append(_parse_value(keys[f"direction_{i}"][0], "vector",
                                       keys[f"direction_{i}"][1]))
        i += 1
    if not normals:
        raise ConfigError("explicit cone needs normal_1/direction_1, ...",
                          kind="VALIDATE")
    arr_n, arr_d = np.asarray(normals), np.asarray(directions)
    if arr_n.shape[1] != k:
        raise ConfigError(f"face vectors have length {arr_n.shape[1]}, k = {k}",
                          kind="VALIDATE")
    return geometry.PolyhedralCone(arr_n, arr_d)


def _build_model(entries, kind, cone):
    keys = {k: v for (s, k), v in entries.items() if s == "model"}
    if not keys:
        if kind in ("sp_solve", "validate"):
            return None, None, None
        raise ConfigError("missing [model] section", kind="VALIDATE")
    epsilon = None
    eps_grid = None
    if "epsilon" in keys:
        epsilon = _parse_value(keys["epsilon"][0], "float", keys["epsilon"][1])
    if "epsilon_grid" in keys:
        eps_grid = _parse_value(keys["epsilon_grid"][0], "vector",
                                keys["epsilon_grid"][1])
    if kind in _GRID_KINDS:
        if eps_grid is None:
            raise ConfigError(f"kind '{kind}' requires epsilon_grid",
                              kind="VALIDATE")
        if any(e <= 0 for e in eps_grid):
            raise ConfigError("epsilon_grid values must be positive",
                              kind="VALIDATE")
    elif kind in ("simulate", "flow") and epsilon is None:
        raise ConfigError(f"kind '{kind}' requires epsilon", kind="VALIDATE")
    base_eps = epsilon if epsilon is not None else 1.0

    if "preset" in keys:
        name, line = keys["preset"]
        kwargs = {}
        if "drift_scale" in keys:
            kwargs["drift_scale"] = _parse_value(keys["drift_scale"][0], "float",
                                                 keys["drift_scale"][1])
        try:
            model = models.make_model(name, base_eps, **kwargs)
        except KeyError as exc:
            raise ConfigError(str(exc), line=line, kind="VALIDATE") from None
        return model, epsilon, eps_grid
    if "drift" in keys:
        drift = _parse_value(keys["drift"][0], "vector", keys["drift"][1])
        rows = []
        i = 1
        while f"sigma_{i}" in keys:
            rows.append(_parse_value(keys[f"sigma_{i}"][0], "vector",
                                     keys[f"sigma_{i}"][1]))
            i += 1
        sigma = np.asarray(rows) if rows else np.eye(len(drift))
        model = models.constant_model(drift, sigma, base_eps)
        return model, epsilon, eps_grid
    raise ConfigError("model needs 'preset' or constant 'drift'/'sigma_i'",
                      kind="VALIDATE")


def parse_config(text):
    """Parse and validate a config; returns :class:`ExperimentConfig`.

    Malformed text raises PARSE errors with 1-based line numbers; semantic
    violations raise VALIDATE errors naming the broken precondition.
    """
    entries = _tokenize(text)

    dynamic_prefixes = {"cone": ("normal_", "direction_"),
                        "model": ("sigma_",),
                        "minorization": ("start_",)}
    for (section, key), (_raw, line) in entries.items():
        schema = None
        if section in (None, "cone", "model"):
            schema = _schema_for(section, None)
        elif section in KINDS:
            schema = _KIND_SCHEMA[section]
        if key in (schema or {}):
            continue
        prefixes = dynamic_prefixes.get(section, ())
        if any(_indexed_key(key, p) is not None for p in prefixes):
            continue
        raise ConfigError(f"unknown key '{key}'"
                          + (f" in section [{section}]" if section else ""),
                          line=line)

    top = {k: v for (s, k), v in entries.items() if s is None}
    if "kind" not in top:
        raise ConfigError("missing required top-level key 'kind'",
                          kind="VALIDATE")
    kind = top["kind"][0].strip()
    if kind not in KINDS:
        raise ConfigError(f"unknown kind '{kind}' (known: {', '.join(KINDS)})",
                          line=top["kind"][1], kind="VALIDATE")
    if "seed" not in top:
        raise ConfigError("missing required top-level key 'seed' "
                          "(runs are always seeded)", kind="VALIDATE")
    seed = _parse_value(top["seed"][0], "int", top["seed"][1])

    present_kind_sections = {s for (s, _k) in entries if s in KINDS}
    if present_kind_sections - {kind}:
        bad = sorted(present_kind_sections - {kind})[0]
        raise ConfigError(f"section [{bad}] does not match kind '{kind}'",
                          kind="VALIDATE")

    cone = _build_cone(entries)
    model, epsilon, eps_grid = _build_model(entries, kind, cone)

    schema = _KIND_SCHEMA[kind]
    params = dict(_DEFAULTS.get(kind, {}))
    starts = {}
    for (section, key), (raw, line) in entries.items():
        if section != kind:
            continue
        idx = _indexed_key(key, "start_")
        if section == "minorization" and idx is not None:
            starts[idx] = _parse_value(raw, "vector", line)
            continue
        params[key] = _parse_value(raw, schema[key], line)
    if starts:
        params["start_grid"] = [starts[i] for i in sorted(starts)]
    _validate_params(kind, params, cone, model)

    echo = {
        "kind": kind, "seed": seed,
        "cone": {"k": cone.dimension,
                 "normals": cone.normals.tolist(),
                 "directions": cone.directions.tolist()},
        "model": ({"epsilon": epsilon, "epsilon_grid": eps_grid}
                  if model is not None else None),
        kind: {k: v for k, v in sorted(params.items())},
    }
    return ExperimentConfig(kind=kind, seed=seed, cone=cone, model=model,
                            epsilon=epsilon, eps_grid=eps_grid, params=params,
                            echo=echo)


def _require(params, kind, *names):
    for name in names:
        if name not in params:
            raise ConfigError(f"kind '{kind}' requires '{name}'",
                              kind="VALIDATE")


def _validate_params(kind, params, cone, model):
    if kind == "sp_solve":
        _require(params, kind, "path_csv")
        if params["refine"] <= 0:
            raise ConfigError("refine must be positive", kind="VALIDATE")
    elif kind in ("simulate", "flow"):
        _require(params, kind, "x0", "horizon")
        if params["dt"] > params["horizon"]:
            raise ConfigError("dt must not exceed the horizon", kind="VALIDATE")
    elif kind == "minorization":
        _require(params, kind, "x0", "r0", "r1", "r2", "m", "m1")
        if not (0 < params["r0"] < params["r1"] < params["r2"]):
            raise ConfigError(
                "radius rule violated: need 0 < r0 < r1 < r2, got "
                f"r0={params['r0']}, r1={params['r1']}, r2={params['r2']}",
                kind="VALIDATE")
        if not (0 < params["m1"] < params["m"]):
            raise ConfigError("need 0 < m1 < m", kind="VALIDATE")
        params.setdefault("t2", params["t1"] / 2.0)
        if not (0 < params["t2"] < params["t1"]):
            raise ConfigError("need 0 < t2 < t1", kind="VALIDATE")
        if params["e_radius"] not in ("r0", "r1"):
            raise ConfigError("e_radius must be 'r0' or 'r1'", kind="VALIDATE")
    elif kind == "killed_floor":
        _require(params, kind, "center", "gamma", "t")
        if not (0 < params["gamma"] < 1):
            raise ConfigError("gamma must be in (0, 1)", kind="VALIDATE")
    elif kind in ("leveling", "psi_gap"):
        _require(params, kind, "radius", "x", "y", "horizon")
        if kind == "leveling":
            _require(params, kind, "f")
            if params["f"] not in F_FUNCTIONALS:
                raise ConfigError(
                    f"unknown functional '{params['f']}' "
                    f"(known: {sorted(F_FUNCTIONALS)})", kind="VALIDATE")
        else:
            if params["psi"] not in PSI_FUNCTIONS:
                raise ConfigError(
                    f"unknown psi '{params['psi']}' "
                    f"(known: {sorted(PSI_FUNCTIONS)})", kind="VALIDATE")
            if not (0 < params["q"] < 1):
                raise ConfigError("q must be in (0, 1)", kind="VALIDATE")
            if params["m_exponent"] < 1:
                raise ConfigError("m_exponent must be >= 1", kind="VALIDATE")
        for name in ("x", "y"):
            if np.linalg.norm(params[name]) >= params["radius"]:
                raise ConfigError(f"start '{name}' must lie inside the ball",
                                  kind="VALIDATE")
    elif kind == "scaling_check":
        _require(params, kind, "x_bar")
        if any(d <= 0 for d in params["dt_grid"]):
            raise ConfigError("dt_grid values must be positive", kind="VALIDATE")


_FLOAT_FMT = "%.17g"


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return _FLOAT_FMT % value
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_clock_seconds: float
    stage_seconds: dict
    files: dict
    exit_status: int

    def to_dict(self):
        return {"config": self.config, "version": self.version,
                "wall_clock_seconds": self.wall_clock_seconds,
                "stage_seconds": self.stage_seconds, "files": self.files,
                "exit_status": self.exit_status}


def _read_path_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def run(config, out_dir, threads=1):
    """Execute a parsed config, emit outputs + manifest into ``out_dir``.

    Returns the :class:`RunManifest`; its ``exit_status`` follows the
    0 / 2 / 1 convention (complete / inconclusive / error).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    stages = {}
    emitted = []
    status = 0
    cfg = config

    def stage(name, fn):
        t0 = time.perf_counter()
        result = fn()
        stages[name] = time.perf_counter() - t0
        return result

    kind = cfg.kind
    if kind == "validate":
        report = stage("validate_cone", lambda: geometry.validate_cone(cfg.cone))
        rm = skorokhod.reflection_matrix(cfg.cone)
        payload = {
            "checks": [{"name": c.name, "passed": bool(c.passed),
                        "margin": float(c.margin), "detail": c.detail}
                       for c in report.checks],
            "passed": bool(report.passed),
            "interior_point": [float(v) for v in report.interior_point],
            "spectral_summary": report.spectral_summary,
            "reflection_matrix": rm.matrix.tolist(),
            "completely_s": rm.completely_s,
        }
        if cfg.model is not None:
            mv = stage("validate_model", lambda: simulate.validate_model(
                cfg.cone, cfg.model, n_pairs=cfg.params["model_pairs"],
                seed=cfg.seed))
            payload["model_checks"] = [
                {"name": c.name, "passed": bool(c.passed),
                 "margin": float(c.margin), "detail": c.detail}
                for c in mv.checks]
            payload["model_passed"] = bool(mv.passed)
            if not mv.passed:
                status = 1
        if not report.passed:
            status = 1
        _write_json(out / "validation.json", payload)
        emitted.append("validation.json")

    elif kind == "sp_solve":
        times, values = _read_path_csv(cfg.params["path_csv"])
        psi = skorokhod.PiecewisePath(times, values)
        rp = stage("solve_sp", lambda: skorokhod.solve_sp(
            cfg.cone, psi, refine=cfg.params["refine"]))
        k, n_faces = cfg.cone.dimension, cfg.cone.n_faces
        header = (["t"] + [f"phi_{i+1}" for i in range(k)]
                  + [f"eta_{i+1}" for i in range(k)]
                  + [f"alpha_{i+1}" for i in range(n_faces)] + ["tv"])
        pushes = np.vstack([np.zeros((1, n_faces)), rp.pushes])
        rows = [np.concatenate([[rp.times[j]], rp.values[j], rp.pushing[j],
                                pushes[j], [rp.total_variation[j]]])
                for j in range(len(rp.times))]
        _write_csv(out / "reflected.csv", header, rows)
        emitted.append("reflected.csv")

    elif kind in ("simulate", "flow"):
        model = cfg.model.with_eps(cfg.epsilon if kind == "simulate" else 0.0)
        p = cfg.params
        if kind == "flow" or p.get("replicas", 1) == 1:
            rng = seed_stream(cfg.seed, 0)
            path = stage("simulate", lambda: simulate.simulate_path(
                cfg.cone, model, p["x0"], p["horizon"], p["dt"], rng=rng)
                if kind == "simulate" else simulate.flow_ode(
                    cfg.cone, model, p["x0"], p["horizon"], p["dt"]))
            _emit_path(out, cfg.cone, path, emitted)
            if kind == "simulate" and p.get("dump_increments"):
                simulate.write_increments(out / "increments.bin", path.increments)
                emitted.append("increments.bin")
        else:
            def batch_run():
                t_all = []
                done, bi = 0, 0
                while done < p["replicas"]:
                    nb = min(25_000, p["replicas"] - done)
                    rng = seed_stream(cfg.seed, bi)
                    x0b = np.repeat(np.atleast_2d(np.asarray(p["x0"], float)),
                                    nb, axis=0)
                    z, _ = simulate.terminal_batch(cfg.cone, model, x0b,
                                                   p["horizon"], p["dt"], rng)
                    t_all.append(z)
                    done += nb
                    bi += 1
                return np.vstack(t_all)
            terminal = stage("simulate", batch_run)
            header = ["replica"] + [f"z_{i+1}" for i in range(cfg.cone.dimension)]
            rows = [np.concatenate([[i], terminal[i]])
                    for i in range(terminal.shape[0])]
            _write_csv(out / "terminal.csv", header, rows)
            emitted.append("terminal.csv")

    elif kind == "minorization":
        p = cfg.params
        geom = density.MinorizationGeometry(
            x0=p["x0"], r0=p["r0"], r1=p["r1"], r2=p["r2"], big_m=p["m"],
            m1=p["m1"], t1=p["t1"], t2=p["t2"])
        start_grid = p.get("start_grid")
        if start_grid is None:
            start_grid = density.default_start_grid(
                cfg.cone, p["m"], per_axis=p["start_points_per_axis"])
        report = stage("minorization", lambda: density.minorization_check(
            cfg.cone, cfg.model, geom, cfg.eps_grid, p["replicas"], p["dt"],
            cfg.seed, start_grid=start_grid, bins=p["bins"],
            e_radius=p["e_radius"], threads=threads))
        _emit_floor(out, report, emitted)
        status = 0 if report.verdict == "PASS" else 2

    elif kind == "killed_floor":
        p = cfg.params
        report = stage("killed_floor", lambda: density.killed_kernel_floor(
            cfg.model, p["center"], p["radius"], p["gamma"], p["t"],
            cfg.eps_grid, p["replicas"], p["dt"], cfg.seed,
            bins=p["bins"], threads=threads))
        _emit_floor(out, report, emitted)
        status = 0 if report.verdict == "PASS" else 2

    elif kind == "leveling":
        p = cfg.params
        domain = simulate.BallDomain(p["radius"], np.zeros(cfg.cone.dimension))
        curve = stage("leveling", lambda: leveling.leveling_gap(
            cfg.cone, cfg.model, domain, F_FUNCTIONALS[p["f"]],
            np.asarray(p["x"]), np.asarray(p["y"]), cfg.eps_grid,
            p["replicas"], p["dt"], p["horizon"], cfg.seed,
            f_bound=p["f_bound"], certify_t_max=p.get("certify_t_max"),
            max_doublings=p["max_doublings"], threads=threads))
        _emit_gaps(out, curve, "gaps", emitted)
        status = 2 if curve.censoring else 0

    elif kind == "psi_gap":
        p = cfg.params
        domain = simulate.BallDomain(p["radius"], np.zeros(cfg.cone.dimension))
        curve = stage("psi_gap", lambda: leveling.psi_gap(
            cfg.cone, cfg.model, domain, PSI_FUNCTIONS[p["psi"]], p["q"],
            p["m_exponent"], np.asarray(p["x"]), np.asarray(p["y"]),
            cfg.eps_grid, p["replicas"], p["dt"], p["horizon"], cfg.seed,
            certify_t_max=p.get("certify_t_max"),
            max_doublings=p["max_doublings"], threads=threads))
        _emit_gaps(out, curve, "psi_gaps", emitted)
        status = {"PASS": 0, "INCONCLUSIVE": 2}.get(curve.verdict, 1)

    elif kind == "scaling_check":
        p = cfg.params
        rows = []
        worst_ok = True
        def scaling():
            nonlocal worst_ok
            for ei, eps in enumerate(cfg.eps_grid):
                for di, dt in enumerate(p["dt_grid"]):
                    rng = seed_stream(cfg.seed, ei * 1000 + di)
                    gaps = simulate.coupled_scaling_gap(
                        cfg.cone, cfg.model.with_eps(eps), p["x_bar"],
                        p["horizon"], dt, p["n_paths"], rng)
                    bound = p["bound_scale"] * np.sqrt(dt)
                    ok = bool(np.max(gaps) <= bound)
                    worst_ok = worst_ok and ok
                    rows.append([eps, dt, p["n_paths"], float(np.max(gaps)),
                                 bound, int(ok)])
        stage("scaling_check", scaling)
        _write_csv(out / "scaling.csv",
                   ["epsilon", "dt", "n_paths", "max_gap", "bound", "pass"],
                   rows)
        emitted.append("scaling.csv")
        _write_json(out / "scaling.json",
                    {"all_within_bound": worst_ok,
                     "rows": [[float(v) for v in r] for r in rows]})
        emitted.append("scaling.json")
        status = 0 if worst_ok else 1

    else:
        raise ConfigError(f"kind '{kind}' is not runnable", kind="VALIDATE")

    wall = time.perf_counter() - t_start
    manifest = RunManifest(
        config=cfg.echo, version=_version(),
        wall_clock_seconds=wall,
        stage_seconds={k: float(v) for k, v in stages.items()},
        files={name: _digest(out / name) for name in emitted},
        exit_status=status)
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def _version():
    from . import __version__
    return __version__


def _emit_path(out, cone, path, emitted):
    k, n_faces = cone.dimension, cone.n_faces
    header = (["t"] + [f"z_{i+1}" for i in range(k)]
              + [f"y_{i+1}" for i in range(n_faces)])
    rows = [np.concatenate([[path.times[j]], path.states[j], path.face_pushes[j]])
            for j in range(len(path.times))]
    _write_csv(out / "path.csv", header, rows)
    emitted.append("path.csv")


def _emit_floor(out, report, emitted):
    _write_json(out / "floor.json", report.to_dict())
    emitted.append("floor.json")
    k = np.atleast_2d(report.starts).shape[1]
    header = (["epsilon"] + [f"start_{i+1}" for i in range(k)]
              + ["floor", "lcb99", "stderr", "min_count", "outside_fraction",
                 "stage1"])
    rows = [np.concatenate([[r.eps], r.start,
                            [r.floor, r.lcb, r.se, r.min_count,
                             r.outside_fraction, r.stage1]])
            for r in report.rows]
    _write_csv(out / "floor.csv", header, rows)
    emitted.append("floor.csv")


def _emit_gaps(out, curve, stem, emitted):
    header = ["epsilon", "gap", "stderr", "censor_rate"]
    rows = [[curve.epsilons[i], curve.gaps[i], curve.stderrs[i],
             curve.censor_rates[i]] for i in range(len(curve.epsilons))]
    _write_csv(out / f"{stem}.csv", header, rows)
    emitted.append(f"{stem}.csv")
    _write_json(out / f"{stem}.json", curve.to_dict())
    emitted.append(f"{stem}.json")


def _cmd_run(args):
    text = Path(args.config).read_text(encoding="utf-8")
    if args.seed is not None:
        # CLI seed overrides the config's seed line
        cfg = parse_config(_override_seed(text, args.seed))
    else:
        cfg = parse_config(text)
    manifest = run(cfg, args.out, threads=args.threads)
    print(f"{cfg.kind}: status {manifest.exit_status}, "
          f"{len(manifest.files)} file(s) in {args.out} "
          f"({manifest.wall_clock_seconds:.2f}s)")
    return manifest.exit_status


def _override_seed(text, seed):
    lines = []
    replaced = False
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if not replaced and stripped.startswith("seed") and "=" in stripped \
                and not stripped.startswith("["):
            lines.append(f"seed = {seed}")
            replaced = True
        else:
            lines.append(line)
    if not replaced:
        lines.insert(0, f"seed = {seed}")
    return "\n".join(lines)


def _cmd_validate(args):
    text = Path(args.config).read_text(encoding="utf-8")
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        print(f"invalid: {exc}")
        return 1
    print(f"ok: kind={cfg.kind}, seed={cfg.seed}")
    return 0


def _cmd_oracle_sp1d(args):
    times, values = _read_path_csv(args.path_csv)
    if values.shape[1] != 1:
        print("sp1d oracle expects a single value column", file=sys.stderr)
        return 1
    phi = skorokhod.reflect_halfline(values[:, 0])
    print("t,psi,phi,eta")
    for j in range(len(times)):
        print(",".join(_fmt(v) for v in
                       (times[j], values[j, 0], phi[j], phi[j] - values[j, 0])))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="conecraft",
        description="Reflected-diffusion experiments in polyhedral cones")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="conecraft_out")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="parse and validate a config")
    p_val.add_argument("config")
    p_val.set_defaults(func=_cmd_validate)

    p_oracle = sub.add_parser("oracle", help="closed-form cross-checks")
    oracle_sub = p_oracle.add_subparsers(dest="oracle_kind", required=True)
    p_sp1d = oracle_sub.add_parser("sp1d", help="1-D reflection map oracle")
    p_sp1d.add_argument("path_csv")
    p_sp1d.set_defaults(func=_cmd_oracle_sp1d)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConecraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
