"""Command-line entry point: ``lrsng <command> --spec FILE --out DIR``.

Every command writes its artifacts into ``--out`` and exits 0 when all checks
pass, 1 when any check fails, and 2 on an error (message printed as raised).
"""

import argparse
import csv
import io
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import evaluate, openloop, riccati, verify
from ._linalg import PD_TOL, PSD_TOL
from .evaluate import Check, CostReport, PolicySequence
from .model import GameSpec, validate

KEYS = ("n", "m1", "m2", "N", "p", "mu", "A", "BL", "BR", "QL", "QR", "SL", "SR",
        "ML", "MR", "PL_term", "PR_term", "Sigma_x0", "Sigma_w")
INT_KEYS = ("n", "m1", "m2", "N")
COMMANDS = ("solve", "simulate", "evaluate", "verify-closed-loop", "verify-open-loop", "example-sec5")
SEED_ENV = "LRSNG_SEED"
CONV_TOL = 1e-6
CONV_TARGET = 35


class SpecParseError(ValueError):
    pass


class SpecValidationError(ValueError):
    def __init__(self, violations, lines):
        self.violations = violations
        parts = []
        for v in violations:
            key = v.split(" ", 1)[0]
            where = f"line {lines[key]}: " if key in lines else ""
            parts.append(where + v)
        super().__init__("invalid game spec:\n  " + "\n  ".join(parts))


def _key_lines(text):
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        for m in re.finditer(r'"([A-Za-z_0-9]+)"\s*:', line):
            out.setdefault(m.group(1), i)
    return out


def _number(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SpecParseError(f"{key}: expected a number, got {v!r}")
    return v


def _matrix(v, key):
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise SpecParseError(f"{key}: expected a non-empty array of rows")
    rows = [[float(_number(x, key)) for x in r] for r in v]
    if len({len(r) for r in rows}) != 1:
        raise SpecParseError(f"{key}: rows have different lengths")
    return np.array(rows)


def parse_spec(text, source="<string>"):
    """GameSpec from config text; raises SpecParseError / SpecValidationError."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise SpecParseError(f"{source}: top level must be an object")
    missing = [k for k in KEYS if k not in raw]
    extra = sorted(k for k in raw if k not in KEYS)
    if missing:
        raise SpecParseError(f"{source}: missing field(s) " + ", ".join(missing))
    if extra:
        raise SpecParseError(f"{source}: unknown field(s) " + ", ".join(extra))
    vals = {}
    for k in INT_KEYS:
        v = _number(raw[k], k)
        if v != int(v):
            raise SpecParseError(f"{k}: expected an integer, got {v!r}")
        vals[k] = int(v)
    vals["p"] = float(_number(raw["p"], "p"))
    mu = raw["mu"]
    if not isinstance(mu, list):
        raise SpecParseError("mu: expected an array")
    vals["mu"] = np.array([float(_number(x, "mu")) for x in mu])
    for k in KEYS:
        if k not in vals:
            vals[k] = _matrix(raw[k], k)
    return GameSpec(**vals)


def load_spec(path, pd_tol=PD_TOL, psd_tol=PSD_TOL):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"spec file not found: {path}")
    text = path.read_text()
    spec = parse_spec(text, str(path))
    bad = validate(spec, pd_tol, psd_tol)
    if bad:
        raise SpecValidationError(bad, _key_lines(text))
    return spec


def _fmt(v):
    # repr of a Python float round-trips exactly
    return repr(float(v))


def dump_spec(spec):
    d = spec.to_dict()
    lines = []
    for k in KEYS:
        v = d[k]
        if k in INT_KEYS:
            s = str(int(v))
        elif k == "p":
            s = _fmt(v)
        elif k == "mu":
            s = "[" + ", ".join(_fmt(x) for x in v) + "]"
        else:
            s = "[" + ", ".join("[" + ", ".join(_fmt(x) for x in r) + "]" for r in v) + "]"
        lines.append(f'  "{k}": {s}')
    return "{\n" + ",\n".join(lines) + "\n}\n"


def sec5_text():
    return resources.files("lrsng").joinpath("data/sec5.json").read_text()


@dataclass
class RunConfig:
    command: str
    spec_path: str = ""
    out_dir: str = "out"
    seed: int = 0
    trajectories: int = 100_000
    workers: int = 1
    fd_step: float = 1e-4
    fd_tol: float = 1e-5
    deviation_count: int = 100
    deviation_magnitude: tuple = verify.MAGNITUDES
    tree_horizon: int = None
    node_cap: int = openloop.NODE_CAP
    pd_tol: float = PD_TOL
    psd_tol: float = PSD_TOL
    policy_path: str = None
    extra: dict = field(default_factory=dict)

    def problems(self):
        out = []
        if self.command not in COMMANDS:
            out.append(f"unknown command {self.command!r}")
        if self.command != "example-sec5" and not self.spec_path:
            out.append("--spec is required")
        if not self.out_dir:
            out.append("--out must be nonempty")
        if not 0 <= self.seed < 2 ** 64:
            out.append("seed must be a 64-bit unsigned integer")
        for name in ("trajectories", "workers", "fd_step", "fd_tol", "deviation_count", "node_cap",
                     "pd_tol", "psd_tol"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if self.trajectories < 2:
            out.append("trajectories must be at least 2")
        if not all(m > 0 for m in self.deviation_magnitude):
            out.append("deviation magnitudes must be positive")
        if self.tree_horizon is not None and self.tree_horizon < 0:
            out.append("tree_horizon must be nonnegative")
        return out


# ---- artifact writers -------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _clean(o):
    # non-finite floats are not valid JSON
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_json(path, obj):
    text = json.dumps(_clean(obj), indent=2, default=_json_default, allow_nan=False) + "\n"
    Path(path).write_text(text)


def gains_csv(sol):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "matrix", "row", "col", "value"])
    for k in range(sol.N + 1):
        for name, K in (("KL", sol.KL[k]), ("KR", sol.KR[k])):
            for i in range(K.shape[0]):
                for j in range(K.shape[1]):
                    w.writerow([k, name, i, j, _fmt(K[i, j])])
    return buf.getvalue()


def read_gains_csv(path, spec):
    KL = np.full((spec.N + 1, spec.m1 + spec.m2, spec.n), np.nan)
    KR = np.full((spec.N + 1, spec.m1, spec.n), np.nan)
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        if rows.fieldnames != ["k", "matrix", "row", "col", "value"]:
            raise SpecParseError(f"{path}: header must be k,matrix,row,col,value")
        for line, r in enumerate(rows, 2):
            try:
                target = {"KL": KL, "KR": KR}[r["matrix"]]
                target[int(r["k"]), int(r["row"]), int(r["col"])] = float(r["value"])
            except (KeyError, ValueError, IndexError) as exc:
                raise SpecParseError(f"{path}: line {line}: bad row ({exc})") from None
    if np.isnan(KL).any() or np.isnan(KR).any():
        raise SpecParseError(f"{path}: gain entries missing")
    return PolicySequence(KL, KR)


def convergence_block(sol, tol=CONV_TOL):
    d = np.maximum(np.max(np.abs(np.diff(sol.KL, axis=0)), axis=(1, 2)),
                   np.max(np.abs(np.diff(sol.KR, axis=0)), axis=(1, 2)))
    return {"tol": tol, "k_star": riccati.gain_convergence(sol, tol) if sol.N >= 1 else None,
            "max_step_change": d.tolist()}


def riccati_doc(spec, sol):
    JL, JR = riccati.analytic_costs(spec, sol)
    doc = {"N": spec.N, "jl": JL, "jr": JR}
    for name in ("PL", "PR", "OmegaL", "OmegaR", "KL", "KR", "GL", "GR"):
        doc[name] = getattr(sol, name)
    if spec.N >= 1:
        doc["convergence"] = convergence_block(sol)
    return doc


# ---- commands ---------------------------------------------------------------

def _policy(cfg, spec):
    if cfg.policy_path:
        pol = read_gains_csv(cfg.policy_path, spec)
        pol.check(spec)
        return pol
    return PolicySequence.from_solution(riccati.solve(spec))


def cmd_solve(cfg, spec, out):
    sol = riccati.solve(spec)
    (out / "gains.csv").write_text(gains_csv(sol))
    doc = riccati_doc(spec, sol)
    write_json(out / "riccati.json", doc)
    checks = verify.riccati_checks(spec, sol)
    JL, JR = doc["jl"], doc["jr"]
    write_json(out / "report.json", CostReport(JL, JR, seed=cfg.seed, checks=checks).to_dict())
    return checks


def cmd_simulate(cfg, spec, out):
    rep = evaluate.monte_carlo(spec, _policy(cfg, spec), cfg.trajectories, seed=cfg.seed,
                               workers=cfg.workers)
    write_json(out / "report.json", rep.to_dict())
    return rep.checks


def cmd_evaluate(cfg, spec, out):
    JL, JR, _ = evaluate.propagate_moments(spec, _policy(cfg, spec))
    rep = CostReport(JL, JR, seed=cfg.seed)
    write_json(out / "report.json", rep.to_dict())
    return rep.checks


def _closed_loop(cfg, spec):
    return verify.closed_loop_suite(spec, seed=cfg.seed, trajectories=cfg.trajectories,
                                    workers=cfg.workers, fd_step=cfg.fd_step, fd_tol=cfg.fd_tol,
                                    deviations=cfg.deviation_count,
                                    magnitudes=cfg.deviation_magnitude)


def cmd_verify_closed_loop(cfg, spec, out):
    rep = _closed_loop(cfg, spec)
    write_json(out / "report.json", rep.to_dict())
    return rep.checks


def cmd_verify_open_loop(cfg, spec, out):
    rep = verify.open_loop_suite(spec, seed=cfg.seed, tree_horizon=cfg.tree_horizon,
                                 node_cap=cfg.node_cap, perturbations=cfg.deviation_count)
    write_json(out / "report.json", rep.to_dict())
    return rep.checks


def cmd_example_sec5(cfg, spec, out):
    sol = riccati.solve(spec)
    (out / "gains.csv").write_text(gains_csv(sol))
    write_json(out / "riccati.json", riccati_doc(spec, sol))
    rep = _closed_loop(cfg, spec)
    k_star = riccati.gain_convergence(sol, CONV_TOL)
    rep.checks.append(Check("gain_convergence", k_star >= CONV_TARGET,
                            f"k* = {k_star} at tol {CONV_TOL:g} (target >= {CONV_TARGET})"))
    write_json(out / "report.json", rep.to_dict())
    return rep.checks


HANDLERS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "verify-closed-loop": cmd_verify_closed_loop,
    "verify-open-loop": cmd_verify_open_loop,
    "example-sec5": cmd_example_sec5,
}


def run(cfg):
    """Execute one command; returns the exit status."""
    bad = cfg.problems()
    if bad:
        raise ValueError("; ".join(bad))
    if cfg.command == "example-sec5" and not cfg.spec_path:
        spec = parse_spec(sec5_text(), "sec5.json")
    else:
        spec = load_spec(cfg.spec_path, cfg.pd_tol, cfg.psd_tol)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checks = HANDLERS[cfg.command](cfg, spec, out)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return 0 if all(c.passed for c in checks) else 1


def _default_seed():
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else 0


def build_parser():
    ap = argparse.ArgumentParser(prog="lrsng", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--spec", default="", help="game spec (JSON)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help=f"U64 seed (default ${SEED_ENV} or 0)")
    ap.add_argument("--trajectories", type=int, default=100_000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--fd-step", type=float, default=1e-4)
    ap.add_argument("--fd-tol", type=float, default=1e-5)
    ap.add_argument("--deviations", type=int, default=100)
    ap.add_argument("--magnitude", type=float, action="append", default=None,
                    help="deviation magnitude (repeatable)")
    ap.add_argument("--tree-horizon", type=int, default=None)
    ap.add_argument("--node-cap", type=int, default=openloop.NODE_CAP)
    ap.add_argument("--pd-tol", type=float, default=PD_TOL)
    ap.add_argument("--psd-tol", type=float, default=PSD_TOL)
    ap.add_argument("--policy", default=None, help="gains CSV to evaluate instead of the equilibrium")
    return ap


def config_from_args(argv=None):
    a = build_parser().parse_args(argv)
    return RunConfig(
        command=a.command, spec_path=a.spec, out_dir=a.out,
        seed=_default_seed() if a.seed is None else a.seed,
        trajectories=a.trajectories, workers=a.workers, fd_step=a.fd_step, fd_tol=a.fd_tol,
        deviation_count=a.deviations,
        deviation_magnitude=tuple(a.magnitude) if a.magnitude else verify.MAGNITUDES,
        tree_horizon=a.tree_horizon, node_cap=a.node_cap, pd_tol=a.pd_tol, psd_tol=a.psd_tol,
        policy_path=a.policy,
    )


def main(argv=None):
    try:
        cfg = config_from_args(argv)
        return run(cfg)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    except Exception as exc:  # any module error: report verbatim, exit 2
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
