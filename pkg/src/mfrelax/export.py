"""CSV and text writers.  Every float is written with 17 significant digits,
so a file read back with ``float`` reproduces the in-memory values exactly."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .adjoint import AdjointFirst, AdjointSecond
from .cost import GAP_COLUMNS
from .optimizer import TRACE_COLUMNS
from .simulate import PathBundle
from .smp import SmpReport


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return "%.17g" % v
    return str(v)


def write_csv(path, columns, rows, comments=()):
    """Header comment lines start with '#', then one header row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path):
    """(comments, columns, float array) from a file written by ``write_csv``."""
    comments, lines = [], []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.empty((0, len(rows[0])))
    return comments, rows[0], data


def _dump_range(n, limit):
    return range(n if limit is None else min(n, limit))


def write_paths(path, paths: PathBundle, limit=None):
    """Rows (particle, step, state), plus the empirical mean path as particle -1."""
    K = paths.grid.steps
    comments = [f"seed = {paths.seed}", f"particles = {paths.particles}", f"steps = {K}",
                f"problem = {paths.problem}", f"kind = {paths.kind}",
                "particle -1 holds the empirical mean"]

    def rows():
        for k in range(K + 1):
            yield (-1, k, paths.means[k])
        for i in _dump_range(paths.particles, limit):
            for k in range(K + 1):
                yield (i, k, paths.states[i, k])

    return write_csv(path, ("particle", "step", "state"), rows(), comments)


def write_adjoint(path, a1: AdjointFirst, a2: AdjointSecond, limit=None):
    """Rows (step, particle, p, q, P, Q); q and Q are nan at the terminal step."""
    n, K1 = a1.p.shape

    def rows():
        for i in _dump_range(n, limit):
            for k in range(K1):
                last = k == K1 - 1
                yield (k, i, a1.p[i, k], np.nan if last else a1.q[i, k],
                       a2.P[i, k], np.nan if last else a2.Q[i, k])

    return write_csv(path, ("step", "particle", "p", "q", "P", "Q"), rows())


def adjoint_summary(a1: AdjointFirst, a2: AdjointSecond) -> dict:
    out = {}
    for tag, sol in (("first", a1), ("second", a2)):
        d = sol.diagnostics
        out.update({
            f"{tag}.residual_qv": sol.residual_qv,
            f"{tag}.sup_norm": d.sup_norm,
            f"{tag}.integrand_energy": d.q_energy,
            f"{tag}.max_condition": float(np.max(d.conditions)),
            f"{tag}.max_abs_residual_mean": float(np.max(np.abs(d.residual_mean))),
            f"{tag}.martingale_ok": d.martingale_ok(),
        })
    return out


def write_smp(path, report: SmpReport):
    return write_csv(path, ("k", "violation"), enumerate(report.per_time_violation))


def smp_summary(report: SmpReport) -> dict:
    out = {
        "global_residual": report.global_residual,
        "global_stderr": report.global_stderr,
        "normalized_residual": report.normalized,
        "range_scale": report.range_scale,
        "constant_action_residual": report.constant_action_residual,
        "constant_action_stderr": report.constant_action_stderr,
        "best_constant_action": report.best_constant_action,
    }
    if report.near_opt is not None:
        c = report.near_opt
        out.update({"epsilon": c.epsilon, "near_opt_bound": c.bound,
                    "near_opt_threshold": c.threshold, "near_opt_pass": c.passed})
    return out


def write_trace(path, trace):
    return write_csv(path, TRACE_COLUMNS, trace.rows())


def write_gap(path, rows):
    return write_csv(path, GAP_COLUMNS,
                     ((r.m, r.j_chatter, r.se_chatter, r.j_relaxed, r.se_relaxed, r.gap, r.gap_stderr)
                      for r in rows))


def write_validation(path, report):
    def rows():
        for name, err in report.worst.items():
            t, x, y, a = report.worst_at[name]
            yield (name, err, t, x, y, a, name not in report.failures)

    return write_csv(path, ("derivative", "worst_rel_err", "t", "x", "y", "a", "ok"), rows())


def format_block(values: dict) -> str:
    """``key = value`` lines in insertion order."""
    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())
