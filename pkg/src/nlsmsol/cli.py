"""Command-line runner: nls-msol {ground-state, spectrum, evolve, construct, diagnose}.

Configs are strict, versioned JSON.  Every JSON/CSV output carries the
config hash and the run's measured constants (e0, eta0, sigma0, gamma).
Exit codes: 0 success, 2 validation error, 3 numerical failure; errors are
printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import construct as C
from . import diagnostics as D
from .evolve import BlowUpError, IntegratorConfig, Trajectory, conservation_drift, evolve
from .grid import Field, Grid, h1_norm_array, read_field_dump, write_field_dump
from .linspec import EigenSolverError, ModeBank, compute_eigenmode, scaled_mode
from .solitons import conserved, ground_state, ground_state_residual, make_family, soliton_sum

log = logging.getLogger("nlsmsol.cli")

CONFIG_VERSION = 1
_pos = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "p": {"type": "number", "exclusiveMinimum": 1},
        "solitons": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False, "required": ["c"],
                "properties": {"c": _pos, "v": {"type": "number"}, "gamma": {"type": "number"},
                               "x0": {"type": "number"}},
            },
        },
        "amplitudes": {"type": "array", "items": {"type": "number"}},
        "grid": {
            "type": "object", "additionalProperties": False, "required": ["L", "M"],
            "properties": {"L": _pos, "M": {"type": "integer", "minimum": 16}},
        },
        "times": {
            "type": "object", "additionalProperties": False, "required": ["t0", "Sn"],
            "properties": {"t0": _pos, "Sn": _pos,
                           "Sn_schedule": {"type": "array", "items": _pos}},
        },
        "integrator": {
            "type": "object", "additionalProperties": False,
            "properties": {"dt": _pos, "scheme": {"enum": ["strang", "fourth-order"]},
                           "max_gradient": {"anyOf": [_pos, {"type": "null"}]},
                           "dealias": {"type": "boolean"},
                           "stride": {"type": "integer", "minimum": 1}},
        },
        "shooting": {
            "type": "object", "additionalProperties": False,
            "properties": {"newton_tol": _pos, "max_iter": {"type": "integer", "minimum": 1},
                           "fd_increment": _pos,
                           "probes": {"type": "integer", "minimum": 1}},
        },
        "output_dir": {"type": "string"},
        "seed": {"type": "integer"},
    },
}

DEFAULTS = {
    "version": CONFIG_VERSION,
    "p": 7,
    "solitons": [{"c": 1.0}],
    "integrator": {"dt": 1e-3, "scheme": "fourth-order", "stride": 50},
    "shooting": {"newton_tol": 1e-6, "max_iter": 40, "fd_increment": 1e-3},
    "output_dir": "out",
    "seed": 0,
}


class ValidationFailure(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    """Validate a config file (or the defaults when path is None) and fill defaults."""
    raw = {"version": CONFIG_VERSION}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationFailure(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(s) for s in exc.absolute_path) or "<root>"
        raise ValidationFailure(f"config invalid at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, raw)
    if "times" in cfg and not cfg["times"]["Sn"] > cfg["times"]["t0"]:
        raise ValidationFailure("times.Sn must exceed times.t0")
    if "amplitudes" in cfg and len(cfg["amplitudes"]) != len(cfg["solitons"]):
        raise ValidationFailure("amplitudes must have one entry per soliton")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ValidationFailure(f"config is missing required section(s): {', '.join(missing)}")


def _grid(cfg: dict) -> Grid:
    _require(cfg, "grid")
    return Grid(float(cfg["grid"]["L"]), int(cfg["grid"]["M"]))


def _family(cfg: dict):
    return make_family(cfg["p"], [dict(c=s["c"], v=s.get("v", 0.0), gamma=s.get("gamma", 0.0),
                                       x0=s.get("x0", 0.0)) for s in cfg["solitons"]])


def _integrator(cfg: dict) -> IntegratorConfig:
    return IntegratorConfig(**cfg["integrator"])


class Run:
    """Output directory bound to one config: hash, constants and writers."""

    def __init__(self, cfg: dict, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.hash = config_hash(cfg)
        self._spec = None
        out.mkdir(parents=True, exist_ok=True)

    @property
    def spec(self):
        if self._spec is None:
            self._spec = compute_eigenmode(self.cfg["p"])
        return self._spec

    def constants(self) -> dict:
        fam = _family(self.cfg)
        sc = C.interaction_scales(fam, self.spec)
        return {"e0": self.spec.e0, "eta0": self.spec.eta0, "sigma0": sc.sigma0, "gamma": sc.gamma}

    def write_json(self, name: str, payload: dict) -> Path:
        body = {"config_hash": self.hash, "constants": self.constants(), **payload}
        path = self.out / name
        path.write_text(json.dumps(_plain(body), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out / name
        consts = self.constants()
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header + ["config_hash"] + sorted(consts))
            tail = [self.hash] + [_fmt(consts[k]) for k in sorted(consts)]
            for row in rows:
                w.writerow([_fmt(v) for v in row] + tail)
        return path

    def write_trajectory(self, name: str, traj: Trajectory) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, (t, f) in enumerate(zip(traj.times, traj.snapshots)):
            stem = f"snap_{i:05d}"
            write_field_dump(d / stem, f, float(t))
            files.append(stem)
        (d / "trajectory.json").write_text(json.dumps(
            {"config_hash": self.hash, "times": [float(t) for t in traj.times], "files": files},
            sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return d


def read_trajectory(path: str | Path) -> Trajectory:
    d = Path(path)
    meta = json.loads((d / "trajectory.json").read_text())
    snaps = []
    for stem, t in zip(meta["files"], meta["times"]):
        f, t_file = read_field_dump(d / stem)
        if t_file != t:
            raise ValidationFailure(f"{d / stem}: time {t_file} does not match manifest {t}")
        snaps.append(f)
    return Trajectory(np.array(meta["times"]), snaps)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# subcommands

def cmd_ground_state(run: Run) -> None:
    cfg = run.cfg
    p = cfg["p"]
    grid = Grid(float(cfg["grid"]["L"]), int(cfg["grid"]["M"])) if "grid" in cfg else Grid(100, 2048)
    rows = {}
    for c in sorted({float(s["c"]) for s in cfg["solitons"]}):
        Q = ground_state(p, c, grid)
        write_field_dump(run.out / f"ground_state_c{c:g}", Q, 0.0)
        rows[f"{c:g}"] = {"c": c, "peak": float(np.max(np.abs(Q.values))),
                          "mass": float(np.sum(np.abs(Q.values) ** 2) * grid.dx),
                          "ode_residual": ground_state_residual(Q, p, c)}
    run.write_json("ground_state.json", {"p": p, "grid": {"L": grid.length, "M": grid.points},
                                         "profiles": rows})


def cmd_spectrum(run: Run) -> None:
    cfg = run.cfg
    grid = _grid(cfg)
    p = cfg["p"]
    spec = compute_eigenmode(p, grid)
    run._spec = spec
    write_field_dump(run.out / "Y_plus", Field(grid, spec.Y1 + 1j * spec.Y2), 0.0)
    cs = sorted({1.0} | {float(s["c"]) for s in cfg["solitons"]})
    rows = []
    for c in cs:
        e_meas = spec.e0 if c == 1.0 else compute_eigenmode(p, grid, c=c).e0
        rows.append([c, e_meas, scaled_mode(spec, c, grid).e_c, e_meas / (c * spec.e0),
                     e_meas / (c ** 1.5 * spec.e0)])
    run.write_csv("scaling.csv", ["c", "e_c_measured", "e_c_scaled", "ratio_linear",
                                  "ratio_three_halves"], rows)
    run.write_json("spectrum.json", {"p": p, "e0": spec.e0, "eta0": spec.eta0,
                                     "grid": {"L": grid.length, "M": grid.points}})


def cmd_evolve(run: Run) -> None:
    cfg = run.cfg
    _require(cfg, "times")
    grid = _grid(cfg)
    fam = _family(cfg)
    icfg = _integrator(cfg)
    t0, Sn = cfg["times"]["t0"], cfg["times"]["Sn"]
    traj = evolve(soliton_sum(t0, fam, grid), t0, Sn, cfg["p"], icfg, record_conserved=True)
    run.write_trajectory("trajectory", traj)
    rows = [[t, q.mass, q.momentum, q.energy] for t, q in zip(traj.times, traj.conserved_series)]
    run.write_csv("conserved.csv", ["t", "mass", "momentum", "energy"], rows)
    dm, de, dq = conservation_drift(traj)
    run.write_json("evolve.json", {"t0": t0, "Sn": Sn, "drift": {"mass_rel": dm, "energy_rel": de,
                                                                 "momentum_abs": dq}})


def _options(run: Run) -> C.ShootingOptions:
    return C.ShootingOptions(threads=run.threads, **run.cfg["shooting"])


def _schedule(cfg: dict):
    s = cfg["times"].get("Sn_schedule")
    return tuple(s) if s else None


def cmd_construct(run: Run) -> None:
    cfg = run.cfg
    _require(cfg, "times", "grid")
    grid = _grid(cfg)
    fam = _family(cfg)
    icfg = _integrator(cfg)
    t0, Sn = cfg["times"]["t0"], cfg["times"]["Sn"]
    spec = run.spec
    modes = ModeBank(spec, fam, grid)
    options = _options(run)
    sched = _schedule(cfg)
    base = C.build_base_multisoliton(fam, cfg["p"], t0, Sn, grid, icfg, spec, sched, options, modes)
    run.write_trajectory("base", base.trajectory)
    _write_result(run, "base", base, C.sum_trajectory(fam, grid, base.trajectory.times))
    amps = cfg.get("amplitudes", [0.0] * fam.N)
    stages = C.build_family(fam, cfg["p"], amps, t0, Sn, grid, icfg, spec, sched, options,
                            base, modes)
    prev = base.trajectory
    summary = []
    for st in stages:
        name = f"stage_{st.stage + 1}"
        entry = {"stage": st.stage + 1, "soliton": st.soliton + 1, "A": st.A, "anchor": st.anchor}
        if st.result is not None:
            run.write_trajectory(name, st.trajectory)
            _write_result(run, name, st.result, prev)
            try:
                A, rate, resid = C.recover_amplitude(st.trajectory, prev, st.soliton, modes,
                                                     (t0 + 0.25 * (st.anchor - t0), st.anchor))
                entry["recovered"] = {"A": A, "rate": rate, "fit_residual": resid}
            except ValueError as exc:
                entry["recovered"] = {"error": str(exc)}
        summary.append(entry)
        prev = st.trajectory
    run.write_json("construct.json", {"stages": summary, "base": base.summary(),
                                      "stage_order": [k + 1 for k in C.stage_order(fam.c)]})


def _write_result(run: Run, name: str, res: C.ShootingResult, phi_prev: Trajectory) -> None:
    tr = res.trajectory
    rows = [[t, r, float(res.residual_series[i])] for i, (t, r) in
            enumerate(zip(tr.times, [h1_norm_array(u.values - phi_prev.at(t).values, tr.grid)
                                     for t, u in zip(tr.times, tr.snapshots)]))]
    run.write_csv(f"{name}_residuals.csv", ["t", "distance_to_previous_h1", "z_h1"], rows)
    run.write_json(f"{name}.json", {"result": res.summary()})


def cmd_diagnose(run: Run, u_path: str, phi_path: str, soliton: int | None) -> None:
    cfg = run.cfg
    _require(cfg, "times", "grid")
    u = read_trajectory(u_path)
    phi = read_trajectory(phi_path)
    if u.grid.length != phi.grid.length or u.grid.points != phi.grid.points:
        raise ValidationFailure("trajectories are on different grids")
    if u.times.shape != phi.times.shape or np.max(np.abs(u.times - phi.times)) > 1e-9:
        raise ValidationFailure("trajectories have different snapshot times")
    fam = _family(cfg)
    grid = u.grid
    modes = ModeBank(run.spec, fam, grid)
    j = None if soliton is None else soliton - 1
    A = 0.0 if j is None else float(cfg.get("amplitudes", [0.0] * fam.N)[j])
    t0, Sn = float(u.times.min()), float(u.times.max())
    icfg = _integrator(cfg)
    prob = C.ShootingProblem(fam, cfg["p"], j, A, t0, Sn, phi,
                             C.interaction_scales(fam, run.spec), modes, icfg)
    series = D.projections(u, phi, prob)
    zs = [D.perturbation(s.values, phi.at(t).values, t, modes, j, A)
          for t, s in zip(u.times, u.snapshots)]
    zn = np.array([h1_norm_array(z, grid) for z in zs])
    mod = D.modulation_residual(series, prob, zn)
    en = D.dHdt_check(u, prob)
    rows = []
    for i, t in enumerate(u.times):
        cut = D.cutoffs(float(t), fam, grid)
        om = D.omega_source(float(t), phi.snapshots[i], prob).omega_h1 if j is not None and A else 0.0
        rows.append([t, zn[i], *series.alpha_plus[:, i], *series.alpha_minus[:, i], en.H[i],
                     en.dHdt[i], om, D.transport_residual(phi.snapshots[i], cut, cfg["p"])])
    N = fam.N
    header = (["t", "z_h1"] + [f"alpha_plus_{k + 1}" for k in range(N)]
              + [f"alpha_minus_{k + 1}" for k in range(N)] + ["H", "dHdt", "omega_h1", "transport_hm1"])
    run.write_csv("diagnostics.csv", header, rows)
    table = {}
    for name, col in (("z_h1", zn), ("omega_h1", np.array([r[-2] for r in rows]))):
        table[name] = _rate_entry(u.times, col)
    for k in range(N):
        table[f"alpha_plus_{k + 1}"] = _rate_entry(u.times, series.alpha_plus[k])
        table[f"alpha_minus_{k + 1}"] = _rate_entry(u.times, series.alpha_minus[k])
    table["H"] = _rate_entry(u.times, en.H)
    run.write_json("diagnostics.json", {
        "rates": table, "modulation": {"constants": mod.constants, "max_ratio": mod.max_ratio},
        "dHdt": {"constants": en.constants, "max_ratio": en.max_ratio},
        "soliton": soliton, "A": A})


def _rate_entry(times, values) -> dict:
    v = np.abs(np.asarray(values, dtype=float))
    if not np.any(v > 0):
        return {"rate": None, "amplitude": 0.0, "fit_residual": 0.0}
    rate, amp, resid = D.fit_rate(times, v)
    return {"rate": rate, "amplitude": amp, "fit_residual": resid}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nls-msol", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("ground-state", "spectrum", "evolve", "construct", "diagnose"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config (defaults are used when omitted)")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
        sp.add_argument("--threads", type=int, help="worker threads (env NLS_MSOL_THREADS)")
        sp.add_argument("--verbose", action="store_true")
        if name == "diagnose":
            sp.add_argument("trajectories", nargs=2, metavar=("U_DIR", "PHI_DIR"))
            sp.add_argument("--soliton", type=int, help="1-based perturbed soliton (base run if omitted)")
    return ap


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("NLS_MSOL_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise ValidationFailure(f"NLS_MSOL_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ValidationFailure("thread count must be >= 1")
    return n


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        run = Run(cfg, Path(args.output or cfg["output_dir"]), _threads(args.threads))
        if args.command == "ground-state":
            cmd_ground_state(run)
        elif args.command == "spectrum":
            cmd_spectrum(run)
        elif args.command == "evolve":
            cmd_evolve(run)
        elif args.command == "construct":
            cmd_construct(run)
        else:
            cmd_diagnose(run, *args.trajectories, args.soliton)
    except C.StageError as exc:
        code = 2 if isinstance(exc.__cause__, (ValidationFailure, C.ConditioningError)) else 3
        return _fail(code, exc)
    except (BlowUpError, C.ShootingError, EigenSolverError, FloatingPointError) as exc:
        return _fail(3, exc)
    except (ValidationFailure, ValueError) as exc:
        return _fail(2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
