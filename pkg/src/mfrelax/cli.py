"""Batch runner: ``mfrelax <verb> --config run.cfg``.

Config grammar: one ``key = value`` per line; ``#`` starts a comment; blank
lines are ignored; keys are case-sensitive; a key may appear once.  Unknown
keys, malformed values and out-of-range values are reported as
``<file>:<line>: <key>: <message>`` and the run exits with status 2.

Exit status: 0 when every check requested by the verb passed, 1 when a check
failed, 2 on a config error, 3 on a runtime failure (outputs written so far
are kept and ``summary.txt`` says ``status = failed``).
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, _kernels, export
from .adjoint import RegressionBasis, RegressionError, solve_first_order, solve_second_order
from .controls import (StateBinning, TimeGrid, constant_control, constant_relaxed, control_from_text,
                       control_to_text, RelaxedControl)
from .cost import estimate_cost, simulate, value_gap_experiment
from .lq_oracle import LqRiccatiOracle
from .optimizer import OptimizerConfig, minimizing_sequence_report, optimize
from .problems import LqParams, make_chattering_problem, make_lq_meanfield, validate_problem
from .simulate import SimConfig, SimulationError
from .smp import near_optimality_check, smp_residual

log = logging.getLogger("mfrelax")

VERBS = ("simulate", "cost", "adjoint", "check-smp", "optimize", "chatter-gap", "validate")
SUBSTREAMS = ("simulation", "optimizer", "validation")


class ConfigError(ValueError):
    def __init__(self, key, message, line=None, source="config"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(f"{where}{key}: {message}")
        self.key, self.line = key, line


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def _int(lo=None, hi=None):
    def parse(s):
        v = int(s, 0)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _float(lo=None, hi=None, strict_lo=False):
    def parse(s):
        v = float(s)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        if lo is not None and (v <= lo if strict_lo else v < lo):
            raise ValueError(f"must be {'>' if strict_lo else '>='} {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _optional(parse, word):
    def p(s):
        return None if s == word else parse(s)
    return p


def _int_list(s):
    vals = [int(v) for v in s.replace(",", " ").split()]
    if not vals or any(v < 1 for v in vals):
        raise ValueError("must be a list of positive integers")
    return vals


def _text(s):
    if not s:
        raise ValueError("must not be empty")
    return s


_LQ = LqParams()

# key -> (parser, default, description).  A default of None means "derived"
SCHEMA = {
    "experiment": (_choice(*VERBS), None, "must match the verb when given"),
    "output": (_text, "out", "output directory"),
    "problem": (_choice("lq", "chattering"), "lq", "built-in problem"),
    "steps": (_int(1, 10**6), 200, "time steps K"),
    "particles": (_int(2, 10**8), 10000, "particles N"),
    "seed": (_int(0, 2**64 - 1), 0, "master seed"),
    "workers": (_int(1, 1024), 1, "threads for the forward simulation"),
    "clamp": (_optional(_float(0.0, strict_lo=True), "none"), None, "|state| clamp or none"),
    "n_actions": (_int(2, 10**4), 41, "LQ action grid size"),
    **{k: (_float(), getattr(_LQ, k), f"LQ parameter {k}") for k in ("a1", "a2", "b0", "s0", "qy", "gy", "x0")},
    "qx": (_float(0.0), _LQ.qx, "LQ parameter qx"),
    "gx": (_float(0.0), _LQ.gx, "LQ parameter gx"),
    "r": (_float(0.0, strict_lo=True), _LQ.r, "LQ parameter r"),
    "u_max": (_float(0.0, strict_lo=True), _LQ.u_max, "LQ action bound"),
    "T": (_float(0.0, strict_lo=True), _LQ.T, "LQ horizon"),
    "sigma0": (_float(0.0), 0.0, "chattering noise level"),
    "kappa": (_float(0.0), 0.0, "chattering mean-penalty weight"),
    "control": (_text, None, "oracle | oracle-mixture | uniform | constant:<i> | weights:<w,...> | file:<path>"),
    "gain_scale": (_float(), 1.0, "multiplier on the oracle feedback gains"),
    "basis_degree": (_int(1, 12), 2, "regression polynomial degree"),
    "ridge": (_optional(_float(0.0), "auto"), None, "ridge penalty or auto (1e-8 N)"),
    "max_condition": (_float(1.0, strict_lo=True), 1e10, "largest accepted condition number"),
    "dump_particles": (_optional(_int(0), "all"), 100, "particles written to path/adjoint dumps"),
    "epsilon": (_optional(_float(0.0), "auto"), None, "cost gap for the near-optimality check"),
    "init": (_text, None, "optimizer initial control, same syntax as control"),
    "max_iters": (_int(1, 10**5), 30, "optimizer iterations"),
    "damping": (_float(0.0, 1.0, strict_lo=True), 0.5, "optimizer step rho in (0, 1]"),
    "tol": (_float(0.0, strict_lo=True), 1e-4, "optimizer residual tolerance"),
    "seed_policy": (_choice("fixed", "refresh"), "fixed", "optimizer noise policy"),
    "patience": (_int(1), 20, "non-improving iterations before early stop"),
    "bins": (_int(1, 10**6), 64, "state bins of tabular controls"),
    "state_half_width": (_float(0.0, strict_lo=True), 4.0, "tabular state range half width"),
    "m_list": (_int_list, [8, 16, 32, 64], "chattering block counts"),
    "samples": (_int(1), 100, "derivative-check sample points"),
    "fd_step": (_float(0.0, strict_lo=True), 1e-4, "finite-difference step"),
    "fd_tol": (_float(0.0, strict_lo=True), 1e-5, "derivative-check tolerance"),
}


# spelling of a None default for keys where None is a literal choice
NONE_WORDS = {"clamp": "none", "ridge": "auto", "epsilon": "auto"}


def parse_config(text: str, source: str = "config") -> dict:
    """Parse the flat format; values are validated against SCHEMA."""
    out, seen = {}, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], "expected 'key = value'", n, source)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key", n, source)
        if key in seen:
            raise ConfigError(key, f"duplicate key (first set on line {seen[key]})", n, source)
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {value!r}: {exc}", n, source) from None
        seen[key] = n
    return out


@dataclass
class RunConfig:
    verb: str
    values: dict          # fully resolved, every schema key present

    def __getitem__(self, key):
        return self.values[key]


def resolve(verb: str, given: dict, source="config") -> RunConfig:
    if "experiment" in given and given["experiment"] != verb:
        raise ConfigError("experiment", f"config is for {given['experiment']!r}, not {verb!r}", None, source)
    vals = {k: d for k, (_, d, _) in SCHEMA.items()}
    vals.update(given)
    vals["experiment"] = verb
    lq = vals["problem"] == "lq"
    if vals["control"] is None:
        vals["control"] = "oracle-mixture" if (lq and verb == "chatter-gap") else ("oracle" if lq else "uniform")
    if vals["init"] is None:
        vals["init"] = f"constant:{vals['n_actions'] // 2}" if lq else "constant:1"
    if verb == "chatter-gap":
        bad = [m for m in vals["m_list"] if vals["steps"] % m]
        if bad:
            raise ConfigError("steps", f"{vals['steps']} is not divisible by m = {bad}", None, source)
        if any(b <= a for a, b in zip(vals["m_list"], vals["m_list"][1:])):
            raise ConfigError("m_list", "must be strictly increasing", None, source)
    return RunConfig(verb, vals)


def substream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Context:
    def __init__(self, cfg: RunConfig, source: str = "config"):
        self.cfg = cfg
        self.source = source
        v = cfg.values
        if v["problem"] == "lq":
            self.params = LqParams(**{k: v[k] for k in ("a1", "a2", "b0", "s0", "qx", "qy", "r", "gx",
                                                        "gy", "u_max", "x0", "T")})
            self.spec = make_lq_meanfield(self.params, v["n_actions"])
        else:
            self.params = None
            self.spec = make_chattering_problem(v["sigma0"], v["kappa"])
        self.grid = TimeGrid(self.spec.T, v["steps"])
        self.seeds = {name: substream_seed(v["seed"], name) for name in SUBSTREAMS}
        self.sim = SimConfig(v["particles"], self.grid, self.seeds["simulation"], v["workers"], v["clamp"])
        self.basis = RegressionBasis(v["basis_degree"], v["ridge"], v["max_condition"])
        self.binning = StateBinning.centered(v["state_half_width"], v["bins"])
        self._oracle = None

    @property
    def oracle(self):
        if self.params is None:
            raise ConfigError("control", "the Riccati oracle exists only for problem = lq", source=self.source)
        if self._oracle is None:
            self._oracle = LqRiccatiOracle(self.params, self.grid)
        return self._oracle

    def control(self, key="control"):
        text = self.cfg[key]
        n = len(self.spec.action_grid)
        kind, _, arg = text.partition(":")
        try:
            if kind == "oracle" and not arg:
                return self.oracle.control(self.spec.action_grid, self.cfg["gain_scale"])
            if kind == "oracle-mixture" and not arg:
                return self.oracle.mixture(self.spec.action_grid)
            if kind == "uniform" and not arg:
                return constant_relaxed(self.grid, np.ones(n))
            if kind == "constant":
                i = int(arg)
                if not 0 <= i < n:
                    raise ValueError(f"action index must lie in [0, {n - 1}]")
                return constant_control(self.grid, n, i)
            if kind == "weights":
                w = np.array([float(s) for s in arg.split(",")])
                if w.size != n:
                    raise ValueError(f"expected {n} weights, got {w.size}")
                return constant_relaxed(self.grid, w)
            if kind == "file":
                mu = control_from_text(Path(arg).read_text())
                if mu.grid != self.grid or mu.n_actions != n:
                    raise ValueError("control file does not match the configured grid/actions")
                return mu
        except (ValueError, OSError) as exc:
            raise ConfigError(key, str(exc), source=self.source) from None
        raise ConfigError(key, f"unrecognized control {text!r}", source=self.source)


# ---------------------------------------------------------------------------
# verbs: each returns (summary dict, passed)
# ---------------------------------------------------------------------------

def _simulate_with_cost(ctx):
    u = ctx.control()
    paths = simulate(ctx.spec, u, ctx.sim)
    return u, paths, estimate_cost(ctx.spec, paths, u)


def run_simulate(ctx, out):
    u = ctx.control()
    paths = simulate(ctx.spec, u, ctx.sim)
    export.write_paths(out / "paths.csv", paths, ctx.cfg["dump_particles"])
    final = paths.states[:, -1]
    return {"control": repr(u), "kind": paths.kind, "mean_T": paths.means[-1],
            "std_T": float(final.std(ddof=1)), "min_T": float(final.min()), "max_T": float(final.max())}, True


def run_cost(ctx, out):
    u, paths, c = _simulate_with_cost(ctx)
    export.write_csv(out / "cost.csv", ("J", "stderr", "particles", "steps"),
                     [(c.value, c.stderr, c.particles, c.steps)])
    summary = {"control": repr(u), "J": c.value, "stderr": c.stderr}
    if ctx.params is not None:
        summary["oracle_value"] = ctx.oracle.value
    return summary, True


def _adjoints(ctx, u, paths):
    a1 = solve_first_order(ctx.spec, paths, u, ctx.basis)
    a2 = solve_second_order(ctx.spec, paths, u, a1, ctx.basis)
    return a1, a2


def run_adjoint(ctx, out):
    u = ctx.control()
    paths = simulate(ctx.spec, u, ctx.sim)
    a1, a2 = _adjoints(ctx, u, paths)
    export.write_adjoint(out / "adjoint.csv", a1, a2, ctx.cfg["dump_particles"])
    summary = {"control": repr(u), **export.adjoint_summary(a1, a2)}
    ok = a1.diagnostics.martingale_ok() and a2.diagnostics.martingale_ok()
    return summary, ok


def _reference_control(ctx):
    if ctx.params is not None:
        return ctx.oracle.control(ctx.spec.action_grid)
    return constant_relaxed(ctx.grid, np.ones(len(ctx.spec.action_grid)))


def run_check_smp(ctx, out):
    u, paths, c = _simulate_with_cost(ctx)
    a1, a2 = _adjoints(ctx, u, paths)
    report = smp_residual(ctx.spec, paths, u, a1, a2)
    eps = ctx.cfg["epsilon"]
    summary = {"control": repr(u), "J": c.value, "stderr": c.stderr}
    if eps is None:
        ref = _reference_control(ctx)
        j_ref = estimate_cost(ctx.spec, simulate(ctx.spec, ref, ctx.sim), ref).value
        best = min(c.value, j_ref)
        if ctx.params is not None:
            best = min(best, ctx.oracle.value)
        eps = max(0.0, c.value - best)
        summary["reference_J"] = best
    check = near_optimality_check(report, eps)
    export.write_smp(out / "smp.csv", report)
    summary.update(export.smp_summary(report))
    return summary, check.passed


def run_optimize(ctx, out):
    v = ctx.cfg.values
    ocfg = OptimizerConfig(v["max_iters"], v["damping"], v["tol"], ctx.basis, v["seed_policy"],
                           ctx.binning, v["patience"])
    init = ctx.control("init")
    sim = ctx.sim if v["seed_policy"] == "fixed" else ctx.sim.with_seed(ctx.seeds["optimizer"])
    best, trace = optimize(ctx.spec, init, ocfg, sim)
    if len(trace):
        export.write_trace(out / "trace.csv", trace)
    (out / "control.txt").write_text(control_to_text(best))
    summary = {"init": repr(init), "iterations": len(trace), "stop_reason": trace.stop_reason,
               "early_stopped": trace.early_stopped, "best_iter": trace.best_iter}
    if len(trace):
        ref = ctx.oracle.value if ctx.params is not None else None
        seq = minimizing_sequence_report(trace, ref)
        summary.update({"best_J": float(seq.best_so_far[-1]), "final_J": seq.final_J,
                        "final_residual": seq.final_residual,
                        "final_near_opt_pass": bool(seq.near_opt[-1])})
        if ref is not None:
            summary["oracle_value"] = ref
    if trace.error:
        summary["error"] = trace.error
    return summary, trace.error is None and len(trace) > 0


def run_chatter_gap(ctx, out):
    mu = ctx.control()
    if not isinstance(mu, RelaxedControl):
        raise ConfigError("control", "chatter-gap needs a relaxed control")
    rows = value_gap_experiment(ctx.spec, mu, ctx.cfg["m_list"], ctx.sim)
    export.write_gap(out / "gap.csv", rows)
    ok = all(b.gap < a.gap + 3.0 * np.hypot(a.gap_stderr, b.gap_stderr) for a, b in zip(rows, rows[1:]))
    summary = {"control": repr(mu), "J_relaxed": rows[0].j_relaxed, "stderr_relaxed": rows[0].se_relaxed}
    for r in rows:
        summary[f"gap[m={r.m}]"] = r.gap
    summary["gaps_decreasing"] = ok
    return summary, ok


def run_validate(ctx, out):
    v = ctx.cfg.values
    rep = validate_problem(ctx.spec, samples=v["samples"], step=v["fd_step"], tol=v["fd_tol"],
                           seed=ctx.seeds["validation"])
    (out / "validation.txt").write_text(rep.summary() + "\n")
    export.write_validation(out / "validation.csv", rep)
    return {"valid": rep.valid, "failures": ",".join(rep.failures) or "none"}, rep.valid


RUNNERS = {
    "simulate": run_simulate, "cost": run_cost, "adjoint": run_adjoint, "check-smp": run_check_smp,
    "optimize": run_optimize, "chatter-gap": run_chatter_gap, "validate": run_validate,
}


# ---------------------------------------------------------------------------
# manifest and entry point
# ---------------------------------------------------------------------------

def _manifest(cfg: RunConfig, ctx: Context | None, out: Path, source: str, status: str) -> str:
    lines = ["# mfrelax run manifest", f"verb = {cfg.verb}", f"status = {status}",
             f"config_file = {source}", f"version = {__version__}", f"backend = {_kernels.BACKEND}",
             f"numpy = {np.__version__}", f"python = {platform.python_version()}", "", "[config]"]
    for k in SCHEMA:
        v = cfg.values[k]
        if isinstance(v, list):
            v = ",".join(map(str, v))
        lines.append(f"{k} = {NONE_WORDS.get(k, 'none') if v is None else export.fmt(v)}")
    if ctx is not None:
        lines += ["", "[seeds]"] + [f"{k} = {s}" for k, s in ctx.seeds.items()]
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.txt")
    lines += ["", "[files]"] + [f"{p.name} = sha256:{hashlib.sha256(p.read_bytes()).hexdigest()}"
                                for p in files]
    return "\n".join(lines) + "\n"


def run(verb: str, config_path, out_dir=None) -> int:
    config_path = Path(config_path)
    try:
        text = config_path.read_text()
    except OSError as exc:
        print(f"error: cannot read config {config_path}: {exc}", file=sys.stderr)
        return 2
    ctx = None
    try:
        cfg = resolve(verb, parse_config(text, str(config_path)), str(config_path))
        if out_dir is not None:
            cfg.values["output"] = str(out_dir)
        ctx = Context(cfg, str(config_path))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {config_path}: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    status, code = "ok", 0
    try:
        summary, passed = RUNNERS[verb](ctx, out)
        if not passed:
            status, code = "check failed", 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        summary, status, code = {"error": str(exc)}, "failed", 2
    except (SimulationError, RegressionError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        summary, status, code = {"error": str(exc)}, "failed", 3
    head = {"verb": verb, "status": status, "problem": cfg["problem"], "seed": cfg["seed"]}
    (out / "summary.txt").write_text(export.format_block({**head, **summary}))
    (out / "manifest.txt").write_text(_manifest(cfg, ctx, out, str(config_path), status))
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mfrelax", description="Relaxed mean-field control experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", help="output directory (overrides the config's output key)")
    sub.add_parser("keys", help="list the config keys with defaults")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "keys":
        for k, (_, d, desc) in SCHEMA.items():
            d = ",".join(map(str, d)) if isinstance(d, list) else d
            if d is None:
                d = NONE_WORDS.get(k, "derived")
            print(f"{k:18s} default={d!s:12s} {desc}")
        return 0
    return run(args.verb, args.config, args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
