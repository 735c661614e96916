"""Run metrics: step compression, acceptance statistics, token-change
trajectories, distribution distances, and machine-readable reports.

Reports serialize with a fixed field order; floats go through repr so a
written report parses back to exactly the same numbers. Wall time covers
model forwards only and is the single field allowed to differ between
otherwise identical runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError

REPORT_VERSION = 1

_CSV_FIELDS = ("mode", "n_tokens", "forwards", "s", "wall_time_ms",
               "config_hash", "seed")


def step_compression(n_tokens: int, forwards: int) -> float:
    """Generated tokens per model forward pass; 1.0 for sequential decoding."""
    if forwards < 1:
        raise ContractViolation(f"forwards must be >= 1, got {forwards}")
    return n_tokens / forwards


def tv_distance(p, q) -> float:
    """Total-variation distance (1/2) sum |p - q| over a shared support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractViolation(f"support mismatch: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if abs(float(d.sum()) - 1.0) > 1e-6 or np.any(d < 0):
            raise ContractViolation(f"{name} is not a normalized distribution")
    return 0.5 * float(np.abs(p - q).sum())


def empirical_distribution(samples, vocab_size: int) -> np.ndarray:
    counts = np.bincount(np.asarray(samples, dtype=np.int64), minlength=vocab_size)
    return counts / counts.sum()


def token_change_trajectory(trace, slots):
    """Per-position counts of token changes between adjacent iterations.

    `slots` are offsets from the first iteration's window start (i.e. the
    first generated positions). A position contributes while it stays inside
    the window; a change is counted when its draft differs from the previous
    iteration's draft at the same absolute position. Returns
    (changes: {offset: int}, cumulative: {offset: [int per iteration]}).
    """
    if len(trace) < 2:
        raise ContractViolation("token-change analysis needs >= 2 iterations")
    base = trace[0].window_start
    changes = {}
    cumulative = {}
    for off in slots:
        pos = base + off
        count = 0
        series = []
        prev = None
        for rec in trace:
            idx = pos - rec.window_start
            cur = rec.slot_tokens[idx] if 0 <= idx < len(rec.slot_tokens) else None
            if prev is not None and cur is not None and cur != prev:
                count += 1
            series.append(count)
            prev = cur
        changes[int(off)] = count
        cumulative[int(off)] = series
    return changes, cumulative


def acceptance_histogram(trace) -> dict:
    """Acceptance-length counts per iteration; mass equals iteration count."""
    hist = {}
    for rec in trace:
        hist[rec.n_accept] = hist.get(rec.n_accept, 0) + 1
    return dict(sorted(hist.items()))


@dataclass
class RunReport:
    mode: str
    n_tokens: int
    forwards: int
    s: float
    wall_time_ms: float
    acceptance_hist: dict
    token_changes: dict
    config_hash: str
    seed: int
    report_version: int = REPORT_VERSION


def make_report(result, config_hash: str, seed: int,
                tracked_slots=range(5)) -> RunReport:
    hist = acceptance_histogram(result.trace)
    if len(result.trace) >= 2 and result.trace[0].slot_tokens:
        changes, _ = token_change_trajectory(result.trace, tracked_slots)
    else:
        changes = {}
    return RunReport(
        mode=result.mode,
        n_tokens=len(result.tokens),
        forwards=result.forwards,
        s=step_compression(len(result.tokens), result.forwards),
        wall_time_ms=result.wall_forward_ms,
        acceptance_hist=hist,
        token_changes=changes,
        config_hash=config_hash,
        seed=seed,
    )


def report_to_dict(report: RunReport) -> dict:
    return {
        "report_version": report.report_version,
        "mode": report.mode,
        "n_tokens": report.n_tokens,
        "forwards": report.forwards,
        "s": report.s,
        "wall_time_ms": report.wall_time_ms,
        "acceptance_hist": {str(k): v for k, v in report.acceptance_hist.items()},
        "token_changes": {str(k): v for k, v in report.token_changes.items()},
        "config_hash": report.config_hash,
        "seed": report.seed,
    }


def write_report(report: RunReport, fmt: str, path: str):
    """Write a single-run report as json or csv (fixed header/field order)."""
    if fmt == "json":
        with open(path, "w") as f:
            json.dump(report_to_dict(report), f, indent=2)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w") as f:
            f.write(",".join(_CSV_FIELDS) + "\n")
            vals = [report.mode, report.n_tokens, report.forwards,
                    repr(report.s), repr(report.wall_time_ms),
                    report.config_hash, report.seed]
            f.write(",".join(str(v) for v in vals) + "\n")
    else:
        raise ContractViolation(f"unknown report format {fmt!r}")


def read_report(path: str) -> RunReport:
    with open(path) as f:
        head = f.read(1)
        f.seek(0)
        if head == "{":
            d = json.load(f)
            return RunReport(
                mode=d["mode"], n_tokens=d["n_tokens"], forwards=d["forwards"],
                s=d["s"], wall_time_ms=d["wall_time_ms"],
                acceptance_hist={int(k): v for k, v in d["acceptance_hist"].items()},
                token_changes={int(k): v for k, v in d["token_changes"].items()},
                config_hash=d["config_hash"], seed=d["seed"],
                report_version=d["report_version"],
            )
        header = f.readline().strip().split(",")
        if tuple(header) != _CSV_FIELDS:
            raise FormatError(f"{path}: unexpected csv header {header}")
        row = f.readline().strip().split(",")
        d = dict(zip(header, row))
        return RunReport(
            mode=d["mode"], n_tokens=int(d["n_tokens"]),
            forwards=int(d["forwards"]), s=float(d["s"]),
            wall_time_ms=float(d["wall_time_ms"]),
            acceptance_hist={}, token_changes={},
            config_hash=d["config_hash"], seed=int(d["seed"]),
        )


def write_sweep_csv(rows, path: str):
    """Sweep output: one row per (window, steps) pair."""
    with open(path, "w") as f:
        f.write("L,T,S,forwards,wall_time_ms\n")
        for r in rows:
            f.write(f"{r['L']},{r['T']},{r['S']!r},{r['forwards']},"
                    f"{r['wall_time_ms']!r}\n")


def write_trajectory_csv(cumulative: dict, path: str):
    """Token-change cumulative series, one column per tracked slot."""
    slots = sorted(cumulative)
    n_iter = max(len(v) for v in cumulative.values()) if slots else 0
    with open(path, "w") as f:
        f.write("iteration," + ",".join(f"slot_{s}_cum_changes" for s in slots) + "\n")
        for i in range(n_iter):
            vals = [str(cumulative[s][i]) if i < len(cumulative[s]) else ""
                    for s in slots]
            f.write(f"{i}," + ",".join(vals) + "\n")
