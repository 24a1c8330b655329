"""Batch front-end: ``halfspace-rg <subcommand> --config run.ini --out DIR``.

Config files are INI with sections [physical], [numerical], [task], [output].
Any key can be overridden from the environment as HSRG_<SECTION>_<KEY>,
e.g. ``HSRG_PHYSICAL_C=2.0``.  Lists are comma separated.

Exit codes: 0 success, 2 config error, 3 numerical error, 4 bound violation
(only with --strict).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import flow as fl
from . import heatkernel as hk
from . import propagator as pg
from . import sampler as sm
from . import testfn as tf
from . import trees as tr

ENV_PREFIX = "HSRG_"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BOUND = 0, 2, 3, 4
SUBCOMMANDS = ("propagator", "flow", "trees", "bounds", "converge", "sample")

DEFAULTS = {
    "physical": {"m": "1.0", "coupling": "1.0", "c": "0.0", "bc": "robin"},
    "numerical": {
        "lam": "0.1", "lam0": "10.0", "lam_min_factor": "0.125", "knots_per_decade": "80",
        "n_grid": "96", "grid_ratio": "1.08", "zmax_factor": "12.0", "rows": "",
        "step_tol": "1e-6", "delta": "0.25", "tol": "1e-8",
    },
    "task": {
        "momenta": "0.0", "z": "0.0,0.5,1.0", "zp": "0.0,0.5,1.0",
        "taus": "0.5", "anchors": "1.0", "s": "2", "l": "1", "n": "4",
        "ladder": "10,20,40,80,160", "lams": "0.5,2.0", "z_rows": "0",
        "count": "100000", "n_nodes": "32", "seed": "0",
    },
    "output": {"formats": "csv,json"},
}


class ConfigError(ValueError):
    pass


class BoundViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

class RunConfig:
    def __init__(self, parser: configparser.ConfigParser, raw_text: str, env: dict):
        self.cp = parser
        self.raw_text = raw_text
        self.env = env

    @classmethod
    def load(cls, path=None, environ=None):
        cp = configparser.ConfigParser()
        cp.read_dict(DEFAULTS)
        raw = ""
        if path:
            try:
                raw = Path(path).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from e
            try:
                cp.read_string(raw)
            except configparser.Error as e:
                raise ConfigError(str(e)) from e
        environ = os.environ if environ is None else environ
        env = {}
        for k in sorted(environ):
            if not k.startswith(ENV_PREFIX):
                continue
            rest = k[len(ENV_PREFIX):].lower()
            sec, _, key = rest.partition("_")
            if sec not in DEFAULTS or not key:
                raise ConfigError(f"unknown override {k}")
            cp.set(sec, key, environ[k])
            env[k] = environ[k]
        return cls(cp, raw, env)

    def get(self, sec, key):
        try:
            return self.cp.get(sec, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as e:
            raise ConfigError(str(e)) from e

    def num(self, sec, key, positive=False, allow_inf=False):
        v = self.get(sec, key).strip().lower()
        try:
            x = math.inf if v in ("inf", "infinity") else float(v)
        except ValueError as e:
            raise ConfigError(f"[{sec}] {key}: not a number: {v!r}") from e
        if math.isnan(x) or (math.isinf(x) and not allow_inf):
            raise ConfigError(f"[{sec}] {key}: must be finite")
        if positive and not x > 0:
            raise ConfigError(f"[{sec}] {key}: must be > 0")
        return x

    def integer(self, sec, key, minimum=None):
        try:
            x = int(self.get(sec, key))
        except ValueError as e:
            raise ConfigError(f"[{sec}] {key}: not an integer") from e
        if minimum is not None and x < minimum:
            raise ConfigError(f"[{sec}] {key}: must be >= {minimum}")
        return x

    def floats(self, sec, key):
        v = self.get(sec, key).strip()
        if not v:
            return []
        try:
            return [float(x) for x in v.split(",") if x.strip()]
        except ValueError as e:
            raise ConfigError(f"[{sec}] {key}: bad list {v!r}") from e

    def ints(self, sec, key):
        return [int(x) for x in self.floats(sec, key)]

    def echo(self):
        eff = {s: dict(self.cp.items(s)) for s in self.cp.sections()}
        return {"file": self.raw_text, "env": self.env, "effective": eff}

    # physical block
    def bc(self):
        kind = self.get("physical", "bc").strip().lower()
        c = self.num("physical", "c", allow_inf=True)
        if c < 0:
            raise ConfigError("[physical] c: must be >= 0")
        try:
            if kind == "robin":
                return pg.BoundaryCondition.robin(c)
            return pg.BoundaryCondition(kind)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def flow_config(self, lam0=None):
        rows = self.get("numerical", "rows").strip()
        if rows in ("", "all"):
            rows_t = None
        elif rows == "none":
            rows_t = ()
        else:
            rows_t = tuple(self.ints("numerical", "rows"))
        n_grid = self.integer("numerical", "n_grid", 4)
        if rows_t and (min(rows_t) < 0 or max(rows_t) >= n_grid):
            raise ConfigError("[numerical] rows out of range")
        return fl.FlowConfig(
            m=self.num("physical", "m", True),
            coupling=self.num("physical", "coupling"),
            c=self.bc().c,
            Lam0=self.num("numerical", "lam0", True) if lam0 is None else lam0,
            lam_min_factor=self.num("numerical", "lam_min_factor", True),
            knots_per_decade=self.integer("numerical", "knots_per_decade", 4),
            n_grid=n_grid,
            grid_ratio=self.num("numerical", "grid_ratio", True),
            zmax_factor=self.num("numerical", "zmax_factor", True),
            rows=rows_t,
            step_tol=self.num("numerical", "step_tol", True),
        )


# ---------------------------------------------------------------------------
# output helpers (deterministic: no timestamps, fixed float formatting)

def _fmt(x):
    return repr(float(x))


def csv_text(schema, columns, rows, cfg: RunConfig):
    buf = io.StringIO()
    buf.write(f"#schema={schema}\n")
    buf.write(f"#version={__version__}\n")
    buf.write("#config=" + json.dumps(cfg.echo(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating, int)) and not isinstance(v, bool)
                    else v for v in r])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def json_text(payload):
    return json.dumps(payload, sort_keys=True, indent=1, default=_json_default) + "\n"


class Outputs:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def write(self, name, text):
        data = text.encode() if isinstance(text, str) else text
        (self.dir / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def manifest(self, cfg, command, extra=None):
        payload = {"command": command, "version": __version__, "config": cfg.echo(),
                   "checksums": dict(sorted(self.files.items()))}
        if extra:
            payload.update(extra)
        (self.dir / "manifest.json").write_text(json_text(payload))


# ---------------------------------------------------------------------------
# subcommands

def cmd_propagator(cfg: RunConfig, out: Outputs, args):
    m = cfg.num("physical", "m", True)
    bc = cfg.bc()
    lam, lam0 = cfg.num("numerical", "lam", True), cfg.num("numerical", "lam0", True)
    if lam >= lam0:
        raise ConfigError("need lam < lam0")
    spec = pg.PropagatorSpec(m, bc, lam, lam0)
    dspec = pg.PropagatorSpec(m, pg.BoundaryCondition(pg.DIRICHLET), lam, lam0)
    ps, zs, zps = cfg.floats("task", "momenta"), cfg.floats("task", "z"), cfg.floats("task", "zp")
    if any(z < 0 for z in zs + zps):
        raise ConfigError("coordinates must be >= 0")
    rows = []
    for p in ps:
        for z in zs:
            for zp in zps:
                rows.append((p, z, zp, float(pg.C_pz(bc, m, p, z, zp)),
                             pg.C_reg(spec, p, z, zp), float(pg.Cdot(spec, p, z, zp)),
                             float(pg.reg_bc_residual(spec, p, zp)),
                             pg.C_reg(dspec, p, z, zp)))
    cols = ["p", "z", "zp", "C_pz", "C_reg", "Cdot", "bc_residual", "C_reg_dirichlet"]
    out.write("propagator.csv", csv_text("propagator/1", cols, rows, cfg))
    return EXIT_OK


def _counterterm_rows(ct):
    return ct.rows()


def cmd_flow(cfg: RunConfig, out: Outputs, args):
    snap = args.from_snapshot
    if snap:
        manifest = json.loads(Path(snap + ".json").read_text())
        state = fl.load_snapshot(snap, manifest)
    else:
        state = fl.integrate_flow(cfg.flow_config(), workers=args.workers)
    ct = fl.extract_counterterms(state, 1, 0.0)
    cols = ["z", "a", "s", "d", "b", "c"]
    out.write("counterterms.csv", csv_text("counterterms/1", cols, ct.rows(), cfg))
    ct0 = fl.extract_counterterms(state, 0, 0.0)
    out.write("counterterms_tree.csv", csv_text("counterterms/1", cols, ct0.rows(), cfg))
    if not snap:
        man = fl.save_snapshot(state, out.dir / "state.bin")
        data = (out.dir / "state.bin").read_bytes()
        out.files["state.bin"] = hashlib.sha256(data).hexdigest()
        out.write("state.bin.json", json_text(man))
    tol = cfg.num("numerical", "tol", True)
    worst = max(v for k, v in ct.max_abs().items() if not math.isnan(v)) if ct.z.size else 0.0
    step = fl.step_halving_error(state)
    report = {"bphz_max_abs": worst, "bphz_tol": tol, "step_halving": step,
              "violation": bool(worst > tol)}
    out.write("flow_report.json", json_text(report))
    out.manifest(cfg, "flow")
    if report["violation"] and args.strict:
        return EXIT_BOUND
    return EXIT_OK


def cmd_trees(cfg: RunConfig, out: Outputs, args):
    s = cfg.integer("task", "s", 1)
    l = cfg.integer("task", "l", 0)
    taus_l = cfg.floats("task", "taus")
    anchors_l = cfg.floats("task", "anchors")
    if len(taus_l) != s - 1 or len(anchors_l) != s - 1:
        raise ConfigError("[task] taus and anchors need s-1 entries")
    trees = tr.enumerate_trees(s, l)
    listing = "".join(f"{t}\tv2={t.v2}\tc1={t.c1}\n" for t in trees)
    out.write("trees.txt", listing)
    m = cfg.num("physical", "m", True)
    delta = cfg.num("numerical", "delta", True)
    lam, lam0 = cfg.num("numerical", "lam", True), cfg.num("numerical", "lam0", True)
    taus = {i + 2: t for i, t in enumerate(taus_l)}
    anchors = {i + 2: y for i, y in enumerate(anchors_l)}
    rows = []
    for z1 in cfg.floats("task", "z"):
        for t in trees:
            rows.append((str(t), z1, tr.integrated_weight(lam, lam0, taus, t, z1, anchors,
                                                            m=m, delta=delta)))
    out.write("tree_weights.csv", csv_text("tree_weights/1", ["tree", "z1", "weight"], rows, cfg))
    out.manifest(cfg, "trees", {"count": len(trees)})
    return EXIT_OK


def _ladder(cfg, minimum):
    ladder = cfg.floats("task", "ladder")
    if len(ladder) < minimum:
        raise ConfigError(f"[task] ladder needs at least {minimum} entries")
    if any(x <= 0 for x in ladder) or sorted(ladder) != ladder:
        raise ConfigError("[task] ladder must be positive and increasing")
    return ladder


def _spec_from_task(cfg, n):
    taus, anchors = cfg.floats("task", "taus"), cfg.floats("task", "anchors")
    try:
        return tf.TestFunctionSpec.plain(n, tuple(taus), tuple(anchors), c=cfg.bc().c,
                                         m=cfg.num("physical", "m", True))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_bounds(cfg: RunConfig, out: Outputs, args):
    ladder = _ladder(cfg, 1)
    l = cfg.integer("task", "l", 0)
    n = cfg.integer("task", "n", 2)
    if (l, n) not in ((0, 4), (1, 2), (1, 4)):
        raise ConfigError("bounds supports (l, n) in {(0,4), (1,2), (1,4)}")
    spec = _spec_from_task(cfg, n)
    lams = cfg.floats("task", "lams")
    zrows = cfg.ints("task", "z_rows")
    base = cfg.flow_config()
    states = []
    for L0 in ladder:
        fc = replace(base, Lam0=L0, rows=(() if n == 2 else tuple(sorted(set(zrows)))))
        states.append(fl.integrate_flow(fc, workers=args.workers))
    if n != 2:
        zrows = list(range(len(set(zrows))))
    delta = cfg.num("numerical", "delta", True)
    rep = fl.bound_check(states, "one", l=l, n=n, spec=spec, lams=lams, z_indices=zrows,
                         delta=delta)
    out.write("bounds.json", json_text({"report": rep, "config": cfg.echo(),
                                        "version": __version__}))
    out.manifest(cfg, "bounds")
    if not rep["bounded"] and args.strict:
        return EXIT_BOUND
    return EXIT_OK


def cmd_converge(cfg: RunConfig, out: Outputs, args):
    ladder = _ladder(cfg, 2)
    base = cfg.flow_config()
    rows = base.rows if base.rows is not None else (0, base.n_grid - 10)
    states = [fl.integrate_flow(replace(base, Lam0=L0, rows=tuple(rows)), workers=args.workers)
              for L0 in ladder]
    rep = fl.convergence_report(states)
    target = {k: v for k, v in rep.items() if isinstance(v, dict)}
    ok = all(abs(target[k]["slope"] + 1) <= 0.15 for k in ("c1_at_0", "a1_bulk_at_0", "folded_L12_at_0")
             if not math.isnan(target[k]["slope"]))
    out.write("converge.json", json_text({"report": rep, "config": cfg.echo(),
                                          "version": __version__}))
    out.manifest(cfg, "converge")
    if args.strict and not ok:
        return EXIT_BOUND
    return EXIT_OK


def cmd_sample(cfg: RunConfig, out: Outputs, args):
    m = cfg.num("physical", "m", True)
    bc = cfg.bc()
    lam, lam0 = cfg.num("numerical", "lam", True), cfg.num("numerical", "lam0", True)
    spec = pg.PropagatorSpec(m, bc, lam, lam0)
    seed = args.seed if args.seed is not None else cfg.integer("task", "seed", 0)
    count = cfg.integer("task", "count", 0)
    from .kernels import GridHalfLine
    grid = GridHalfLine.geometric(cfg.integer("task", "n_nodes", 2), 1.15,
                                  cfg.num("numerical", "zmax_factor", True) / m)
    ps = cfg.floats("task", "momenta") or [0.0]
    stats = []
    for p in ps:
        cov = sm.build_covariance(spec, grid, p)
        X = sm.sample_fields(cov, count, seed, workers=args.workers)
        entry = {"p": p, "eigen": cov.report()}
        if count > 1:
            entry["empirical"] = sm.empirical_checks(X, cov.raw)
        if not math.isinf(bc.c) and count > 1:
            entry["robin_regression"] = sm.robin_regression(spec, p, min(count, 20000), seed)
        stats.append(entry)
    out.write("sample.json", json_text({"seed": seed, "rng": "Philox", "stats": stats,
                                        "config": cfg.echo(), "version": __version__}))
    out.manifest(cfg, "sample")
    return EXIT_OK


COMMANDS = {"propagator": cmd_propagator, "flow": cmd_flow, "trees": cmd_trees,
            "bounds": cmd_bounds, "converge": cmd_converge, "sample": cmd_sample}


def build_parser():
    ap = argparse.ArgumentParser(prog="halfspace-rg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", metavar="PATH")
    ap.add_argument("--out", metavar="DIR", default="out")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--strict", action="store_true")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--from-snapshot", metavar="PATH",
                    help="flow only: reload a saved state instead of integrating")
    return ap


def main(argv=None, environ=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = RunConfig.load(args.config, environ)
        out = Outputs(args.out)
        code = COMMANDS[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (hk.DomainError, hk.UnsupportedOrder, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (fl.AccuracyError, fl.ConsistencyError, pg.QuadratureError, sm.PositivityError,
            ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command == "propagator":
        out.manifest(cfg, "propagator")
    return code


if __name__ == "__main__":
    sys.exit(main())
