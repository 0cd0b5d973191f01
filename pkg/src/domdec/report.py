"""Solve reports: iteration traces, timings, sparsity counters, serialization.

Reports round-trip through JSON bit-exactly on every non-timing field: floats
are serialized with Python's shortest-repr rule, which parses back to the
identical bits. Timing fields round-trip the same way; they are merely
excluded from equality expectations because reruns never reproduce them.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

__all__ = [
    "TraceRow",
    "SolveReport",
    "report_to_json",
    "report_from_json",
    "trace_to_csv",
    "trace_from_csv",
]


@dataclass
class TraceRow:
    """One iteration of a solve: score breakdown, optimality proxies, timing."""

    k: int
    label: str  # partition label; multiscale rows prefix the layer ("3:A")
    action: str  # what the weight strategy did (greedy / safe / fallback counts)
    transport: float
    entropy: float
    d1: float
    d2: float
    total: float
    gap: float  # stopping certificate E(state) - D(stitched alpha, optimal beta)
    x_err: float  # L1 deviation from the X-side scaling optimality condition
    y_err: float  # L1 deviation from the Y-side condition, summed over cells
    wall_time: float


@dataclass
class SolveReport:
    """Outcome of one solve: final scores, trace, timings, diagnostics."""

    converged: bool
    iterations: int
    final_score: dict
    rel_pd_gap: float
    x_err: float
    y_err: float
    trace: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    sparsity: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = [row.k for row in self.trace]
        if any(b < a for a, b in zip(ks, ks[1:])):
            raise ValueError("trace rows must be monotone in k")


def report_to_json(report: SolveReport) -> str:
    return json.dumps(asdict(report), indent=1)


def report_from_json(text: str) -> SolveReport:
    data = json.loads(text)
    data["trace"] = [TraceRow(**row) for row in data["trace"]]
    return SolveReport(**data)


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def trace_to_csv(report: SolveReport) -> str:
    """Render the iteration trace as CSV with round-trip-exact floats."""
    names = [f.name for f in fields(TraceRow)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in report.trace:
        writer.writerow([_format(getattr(row, n)) for n in names])
    return buf.getvalue()


def trace_from_csv(text: str) -> list:
    """Parse trace rows written by :func:`trace_to_csv`."""
    spec = {f.name: f.type for f in fields(TraceRow)}
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != list(spec):
        raise ValueError(f"unexpected trace header {header}")
    rows = []
    for rec in reader:
        kw = {}
        for name, raw in zip(header, rec):
            kind = spec[name]
            kw[name] = int(raw) if kind == "int" else raw if kind == "str" else float(raw)
        rows.append(TraceRow(**kw))
    return rows
