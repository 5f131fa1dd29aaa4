"""Command-line driver: strict YAML/JSON configuration, subcommands, CSV/JSON output.

Usage::

    diracsc <subcommand> --config run.yaml --out results/ [--workers N] [--seed S]

Exit codes: 0 success, 2 configuration error, 3 integration failure,
4 caustic, 5 orbit-search failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import IntegrationError, ParticleParams, PhaseState, integrate_flow, linearized_flow
from .fields import FieldConfig, FieldDomainError, verify_field_consistency
from .orbits import OrbitError, OrbitSearch, find_periodic_orbits
from .propagator import CausticError, SearchGrid, semiclassical_kernel
from .spin import phase_decomposition, su2_from_angles, transport_spin
from .trace import (OracleQuadrature, build_test_function, build_window, direct_trace_oracle,
                    evaluate_trace, weyl_term)

SUBCOMMANDS = ("fields-check", "propagate", "spin", "kernel", "orbits", "trace", "oracle")
EXIT_OK, EXIT_CONFIG, EXIT_INTEGRATION, EXIT_CAUSTIC, EXIT_ORBIT = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# schema: key -> (type, default); REQUIRED marks mandatory keys

REQUIRED = object()

_VEC = "vec3"
_VEC2 = "vec2"
_NUM = "number"
_INT = "int"
_STR = "str"
_LIST = "numlist"
_BRANCHES = "branches"
_POINTS = "points"

SCHEMA = {
    "particle": {"m": (_NUM, 1.0), "e": (_NUM, 1.0), "c": (_NUM, 1.0), "hbar": (_NUM, REQUIRED)},
    "field": {"kind": (_STR, REQUIRED), "vector": (_VEC, [0.0, 0.0, 0.0]), "g": (_NUM, 1.0),
              "confinement": (_NUM, 0.0)},
    "mode": (_STR, "spatial"),
    "seed": (_INT, 0),
    "output": (_STR, "out"),
    "fields_check": {"points": (_POINTS, None), "h": (_NUM, 1e-4), "n_random": (_INT, 16),
                     "box": (_NUM, 2.0)},
    "propagate": {"x0": (_VEC, REQUIRED), "p0": (_VEC, REQUIRED), "branch": (_STR, "+"),
                  "t_final": (_NUM, REQUIRED), "tol": (_NUM, 1e-10), "samples": (_INT, 101),
                  "linearized": (bool, False)},
    "spin": {"x0": (_VEC, REQUIRED), "p0": (_VEC, REQUIRED), "branch": (_STR, "+"),
             "t_final": (_NUM, REQUIRED), "tol": (_NUM, 1e-12), "s0": (_VEC, [0.0, 0.0, 1.0]),
             "samples": (_INT, 101)},
    "kernel": {"x": (_VEC, REQUIRED), "y": (_VEC, REQUIRED), "t": (_NUM, REQUIRED),
               "extent": (_NUM, 3.0), "n": (_INT, 5), "branches": (_BRANCHES, ["+", "-"])},
    "orbits": {"energies": (_LIST, REQUIRED), "branch": (_STR, "+"), "T_max": (_NUM, REQUIRED),
               "n_random": (_INT, 100), "n_line": (_INT, 12), "n_dir": (_INT, 24), "box": (_NUM, 3.0)},
    "trace": {"energies": (_LIST, REQUIRED), "window": (dict, REQUIRED), "test_function": (dict, REQUIRED),
              "branches": (_BRANCHES, ["+"]), "weyl_samples": (_INT, 100_000), "weyl_box": (_NUM, 3.0),
              "n_random": (_INT, 100), "n_line": (_INT, 12), "n_dir": (_INT, 24), "box": (_NUM, 3.0)},
    "oracle": {"energies": (_LIST, REQUIRED), "window": (dict, REQUIRED), "test_function": (dict, REQUIRED),
               "quadrature": (dict, {})},
}

WINDOW_SCHEMA = {"Ea": (_NUM, REQUIRED), "Eb": (_NUM, REQUIRED), "w": (_NUM, REQUIRED), "kind": (_STR, "c2")}
TEST_SCHEMA = {"T_max": (_NUM, REQUIRED), "shape": (_STR, "smooth_bump"), "T_flat": (_NUM, 0.0)}
QUAD_SCHEMA = {k: (_INT if isinstance(v, int) else _NUM, v)
               for k, v in OracleQuadrature().__dict__.items()}


@dataclass
class RunConfig:
    params: ParticleParams
    field: FieldConfig
    mode: str
    seed: int
    output: str
    blocks: dict = field(default_factory=dict)


def _coerce(path, kind, value):
    if kind == _NUM:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind in (_VEC, _VEC2, _LIST):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of numbers, got {value!r}")
        n = {_VEC: 3, _VEC2: 2}.get(kind)
        if n is not None and len(value) != n:
            raise ConfigError(path, f"expected {n} components")
        if kind == _LIST and not value:
            raise ConfigError(path, "list must be nonempty")
        return [float(v) for v in value]
    if kind == _POINTS:
        if value is None:
            return None
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list of 3-vectors")
        return [_coerce(f"{path}[{i}]", _VEC, v) for i, v in enumerate(value)]
    if kind == _BRANCHES:
        if not isinstance(value, list) or not value or any(b not in ("+", "-") for b in value):
            raise ConfigError(path, "expected a list drawn from '+' and '-'")
        return list(value)
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        return value
    raise AssertionError(kind)


def _fill(path, schema, doc):
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    unknown = sorted(set(doc) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = {}
    for key, spec in schema.items():
        p = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            if key in doc:
                out[key] = _fill(p, spec, doc[key])
            continue
        kind, default = spec
        if key not in doc:
            if default is REQUIRED:
                raise ConfigError(p, "missing required key")
            out[key] = default
        else:
            out[key] = _coerce(p, kind, doc[key])
    return out


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML (or JSON) run configuration.

    Raises
    ------
    ConfigError
        With the dotted key path of the offending entry.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"malformed: {exc}") from None
    if doc is None:
        doc = {}
    for req in ("particle", "field"):
        if not isinstance(doc, dict) or req not in doc:
            raise ConfigError(req, "missing required key")
    cfg = _fill("", SCHEMA, doc)
    pa = cfg["particle"]
    for name in ("m", "c", "hbar"):
        if pa[name] <= 0:
            raise ConfigError(f"particle.{name}", f"{name} must be positive")
    params = ParticleParams(**pa)
    fd = cfg["field"]
    try:
        fconf = FieldConfig(fd["kind"], np.array(fd["vector"]), fd["g"], fd["confinement"])
    except ValueError as exc:
        raise ConfigError("field.kind", str(exc)) from None
    mode = cfg["mode"]
    if mode not in ("planar", "spatial"):
        raise ConfigError("mode", "must be 'planar' or 'spatial'")
    if mode == "planar" and not fconf.planar_compatible():
        raise ConfigError("field.vector", "planar mode needs B perpendicular to the plane and E in the plane")
    blocks = {k: v for k, v in cfg.items() if k not in ("particle", "field", "mode", "seed", "output")}
    for name in ("trace", "oracle"):
        if name in blocks:
            b = blocks[name]
            b["window"] = _fill(f"{name}.window", WINDOW_SCHEMA, b["window"])
            b["test_function"] = _fill(f"{name}.test_function", TEST_SCHEMA, b["test_function"])
            if "quadrature" in b:
                b["quadrature"] = _fill(f"{name}.quadrature", QUAD_SCHEMA, b["quadrature"])
            try:
                build_window((b["window"]["Ea"], b["window"]["Eb"]), b["window"]["w"], b["window"]["kind"])
                build_test_function(**b["test_function"])
            except ValueError as exc:
                raise ConfigError(f"{name}", str(exc)) from None
    for name in ("propagate", "spin", "kernel"):
        if name in blocks:
            if name == "kernel" and blocks[name]["t"] <= 0:
                raise ConfigError("kernel.t", "must be positive")
            if name != "kernel" and blocks[name].get("branch") not in ("+", "-"):
                raise ConfigError(f"{name}.branch", "must be '+' or '-'")
    if "orbits" in blocks and blocks["orbits"]["T_max"] <= 0:
        raise ConfigError("orbits.T_max", "must be positive")
    return RunConfig(params=params, field=fconf, mode=mode, seed=cfg["seed"], output=cfg["output"],
                     blocks=blocks)


# ---------------------------------------------------------------------------
# output helpers: floats always with 17 significant digits


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def to_json(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}"{k}": {to_json(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(to_json(v, indent + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if obj is None:
        return "null"
    if isinstance(obj, (complex, np.complexfloating)):
        return to_json({"re": obj.real, "im": obj.imag}, indent)
    return fmt(obj)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def write_json(path: Path, obj):
    path.write_text(to_json(obj) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _state(block):
    return PhaseState(block["x0"], block["p0"])


def run_fields_check(cfg: RunConfig, out: Path, rng) -> list:
    b = cfg.blocks.get("fields_check") or _fill("fields_check", SCHEMA["fields_check"], {})
    pts = b["points"]
    if pts is None:
        pts = rng.uniform(-b["box"], b["box"], size=(b["n_random"], 3))
    rep = verify_field_consistency(cfg.field, np.asarray(pts, float), b["h"])
    write_json(out / "fields_check.json", {"kind": cfg.field.kind.value, "div_A": rep.div_A,
                                           "E_residual": rep.E_residual, "B_residual": rep.B_residual,
                                           "max": rep.max(), "n_points": len(pts)})
    return []


def run_propagate(cfg: RunConfig, out: Path, rng) -> list:
    b = _block(cfg, "propagate")
    t_eval = np.linspace(0.0, b["t_final"], b["samples"])
    traj = integrate_flow(_state(b), b["branch"], cfg.field, cfg.params, b["t_final"], b["tol"], t_eval=t_eval)
    E = traj.energies()
    rows = [[t, *z, R, H] for t, z, R, H in zip(traj.t, traj.z, traj.R, E)]
    write_csv(out / "trajectory.csv", ["t", "x", "y", "z", "px", "py", "pz", "R", "H"], rows)
    summary = {"branch": b["branch"], "t_final": b["t_final"], "energy_drift": float(np.abs(E - E[0]).max()),
               "final_x": traj.z[-1, :3], "final_p": traj.z[-1, 3:6], "R": traj.R[-1]}
    if b["linearized"]:
        J = linearized_flow(traj).jacobians[-1]
        summary["det_J"] = float(np.linalg.det(J))
        summary["jacobian"] = J
    write_json(out / "propagate.json", summary)
    return []


def run_spin(cfg: RunConfig, out: Path, rng) -> list:
    b = _block(cfg, "spin")
    traj = integrate_flow(_state(b), b["branch"], cfg.field, cfg.params, b["t_final"], b["tol"])
    s0 = np.asarray(b["s0"])
    s0 = s0 / np.linalg.norm(s0)
    th, ph = np.arccos(np.clip(s0[2], -1, 1)), np.arctan2(s0[1], s0[0])
    d0 = su2_from_angles(th, 0.0, ph)
    hist = transport_spin(traj, d0=d0)
    idx = np.unique(np.linspace(0, len(hist.t) - 1, b["samples"]).astype(int))
    rows = [[hist.t[k], *hist.s[k], hist.eta[k], hist.gauge[k]] for k in idx]
    write_csv(out / "spin.csv", ["t", "sx", "sy", "sz", "eta", "gauge"], rows)
    dyn, geo = phase_decomposition(hist)
    dT = hist.d[-1]
    write_json(out / "spin.json", {"eta_dyn": dyn, "eta_geo": geo, "eta_total": hist.eta[-1] - hist.eta[0],
                                   "trace_factor": float(np.real(np.trace(dT))),
                                   "d_final_re": dT.real, "d_final_im": dT.imag,
                                   "gauge_switches": len(hist.switches)})
    return []


def run_kernel(cfg: RunConfig, out: Path, rng) -> list:
    b = _block(cfg, "kernel")
    grid = SearchGrid(extent=b["extent"], n=b["n"], planar=cfg.mode == "planar")
    K = semiclassical_kernel(b["x"], b["y"], b["t"], cfg.field, cfg.params, grid,
                             branches=tuple(b["branches"]))
    rows = []
    for orb, _ in K.contributions:
        s = orb.d_holonomy
        th = float(2 * np.arctan2(abs(s[1, 0]), abs(s[0, 0])))
        rows.append(["+" if orb.branch > 0 else "-", *orb.p0, orb.R, orb.D, orb.nu, th,
                     float(np.angle(s[0, 0]))])
    write_csv(out / "kernel_orbits.csv", ["branch", "p0x", "p0y", "p0z", "R", "D", "nu", "theta", "eta"], rows)
    write_json(out / "kernel.json", {"re": K.matrix.real, "im": K.matrix.imag, "n_orbits": len(rows)})
    return []


def _orbit_search(cfg, b, seed):
    return OrbitSearch(T_max=b["T_max"], n_random=b["n_random"], n_line=b["n_line"], n_dir=b["n_dir"],
                       box=b["box"], seed=seed, planar=cfg.mode == "planar")


def _orbits_at(args):
    E, branch, cfg, search = args
    return find_periodic_orbits(E, branch, cfg.field, cfg.params, search)


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _orbit_rows(orbs):
    return [["+" if o.branch > 0 else "-", o.E, o.T, o.T_prim, o.r, o.S, abs(o.det_M1), o.mu, o.theta,
             o.eta, o.spin_factor, o.label] for o in orbs]


ORBIT_HEADER = ["branch", "E", "T", "T_prim", "r", "S", "abs_det_M1", "mu", "theta", "eta", "factor", "label"]


def run_orbits(cfg: RunConfig, out: Path, rng, workers=1) -> list:
    b = _block(cfg, "orbits")
    search = _orbit_search(cfg, b, cfg.seed)
    res = _map(_orbits_at, [(E, b["branch"], cfg, search) for E in b["energies"]], workers)
    rows = [r for orbs in res for r in _orbit_rows(orbs)]
    write_csv(out / "orbits.csv", ORBIT_HEADER, rows)
    notices = []
    for E, orbs in zip(b["energies"], res):
        bad = [o.label for o in orbs if not o.isolated]
        if bad:
            notices.append(f"E={E:.6g}: non-isolated orbits excluded from trace sums: {', '.join(bad)}")
    return notices


def run_trace(cfg: RunConfig, out: Path, rng, workers=1) -> list:
    b = _block(cfg, "trace")
    tf = build_test_function(**b["test_function"])
    search = OrbitSearch(T_max=tf.T_max, n_random=b["n_random"], n_line=b["n_line"], n_dir=b["n_dir"],
                         box=b["box"], seed=cfg.seed, planar=cfg.mode == "planar")
    dim = 2 if cfg.mode == "planar" else 3
    res = _map(_orbits_at, [(E, "+", cfg, search) for E in b["energies"]], workers)
    if "-" in b["branches"]:
        res_m = _map(_orbits_at, [(E, "-", cfg, search) for E in b["energies"]], workers)
        res = [a + m for a, m in zip(res, res_m)]
    notices, results, rows = [], [], []
    for E, orbs in zip(b["energies"], res):
        iso = [o for o in orbs if o.isolated]
        if len(iso) < len(orbs):
            notices.append(f"E={E:.6g}: {len(orbs) - len(iso)} non-isolated orbits excluded")
        w = weyl_term(E, cfg.field, cfg.params, tf, b["weyl_samples"], cfg.seed, b["weyl_box"], dim,
                      tuple(b["branches"]))
        tr = evaluate_trace(E, iso, tf, cfg.params, w.value)
        if tr.notice:
            notices.append(f"E={E:.6g}: {tr.notice}")
        results.append({"E": E, "weyl": tr.weyl, "weyl_stderr": w.stderr, "total": tr.total,
                        "notice": tr.notice,
                        "orbits": [{"id": k, "re": c.real, "im": c.imag} for k, c in tr.orbit_contributions]})
        rows.append([E, tr.weyl, tr.total - tr.weyl, tr.total, len(iso)])
    write_json(out / "trace.json", {"results": results})
    write_csv(out / "trace.csv", ["E", "weyl", "oscillatory", "total", "n_orbits"], rows)
    return notices


def run_oracle(cfg: RunConfig, out: Path, rng) -> list:
    b = _block(cfg, "oracle")
    if cfg.mode != "planar":
        raise ConfigError("mode", "the oracle needs planar mode")
    tf = build_test_function(**b["test_function"])
    win = build_window((b["window"]["Ea"], b["window"]["Eb"]), b["window"]["w"], b["window"]["kind"])
    q = OracleQuadrature(**b.get("quadrature", {}))
    res = direct_trace_oracle(b["energies"], cfg.field, cfg.params, win, tf, q)
    rows = [[E, v, c.real, c.imag, err] for E, v, c, err in
            zip(res.E, res.value, res.one_sided, res.error_estimate)]
    write_csv(out / "oracle.csv", ["E", "oscillatory", "one_sided_re", "one_sided_im", "error_estimate"], rows)
    write_json(out / "oracle.json", {"n_loops": len(res.loops.p0), "n_cells": len(res.loops.X),
                                     "n_times": len(res.loops.tgrid), "h": res.loops.h, "dt": res.loops.dt})
    return []


def _block(cfg: RunConfig, name: str) -> dict:
    if name not in cfg.blocks:
        raise ConfigError(name, "missing block for this subcommand")
    return cfg.blocks[name]


RUNNERS = {"fields-check": run_fields_check, "propagate": run_propagate, "spin": run_spin,
           "kernel": run_kernel, "orbits": run_orbits, "trace": run_trace, "oracle": run_oracle}


def execute(cfg: RunConfig, subcommand: str, out: Path | None = None, workers: int = 1) -> int:
    """Run one subcommand; returns the process exit status."""
    out = Path(out if out is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    runner = RUNNERS[subcommand]
    try:
        if subcommand in ("orbits", "trace"):
            notices = runner(cfg, out, rng, workers=workers)
        else:
            notices = runner(cfg, out, rng)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CausticError as exc:
        print(f"caustic: {exc}", file=sys.stderr)
        return EXIT_CAUSTIC
    except (IntegrationError, FieldDomainError) as exc:
        print(f"integration failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except OrbitError as exc:
        print(f"orbit search failure: {exc}", file=sys.stderr)
        return EXIT_ORBIT
    for n in notices:
        print(f"notice: {n}")
    if notices:
        (out / "notices.txt").write_text("\n".join(notices) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="diracsc", description="Semiclassical Dirac dynamics and trace formula.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML or JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (overrides 'output')")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None, help="override the configured rng seed")
    args = ap.parse_args(argv)
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(Path(args.config).read_text())
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_CONFIG
        cfg.seed = args.seed
    return execute(cfg, args.subcommand, args.out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
