"""Strategy sweeps over synthetic graph families, emitted as CSV rows."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from .allocator import allocate
from .errors import DomainError, NotAChain
from .generators import GENERATORS
from .gradient import build_mirrored, build_plain_gradient, count_extra_forward
from .planner import chain_order, make_recursive_plan, plan_drop_cheap, search_budget

STRATEGIES = ("no_opt", "inplace", "sharing", "drop_cheap", "sublinear", "recursive")
CSV_HEADER = "strategy,n,feature_map_bytes,extra_forward_ops,wall_time_ms"
DEFAULT_CAP_BYTES = 1 << 30


class BenchRefused(DomainError):
    """A requested size would exceed the no-optimization memory cap."""


@dataclass(frozen=True)
class BenchmarkRow:
    strategy: str
    n: int
    feature_map_bytes: int
    extra_forward_ops: int
    wall_time_ms: float


def no_opt_estimate(graph) -> int:
    """Bytes of the plain gradient graph with one buffer per value: forward plus one gradient each."""
    return 2 * graph.total_bytes


def measure(graph, strategy: str) -> tuple[int, int]:
    """(feature-map bytes, extra forward ops) of ``strategy`` on ``graph``."""
    if strategy in ("no_opt", "inplace", "sharing"):
        gg = build_plain_gradient(graph)
        plan = allocate(gg.graph, gg.order, inplace=strategy != "no_opt",
                        sharing=strategy == "sharing")
        return plan.peak_bytes, 0
    if strategy == "drop_cheap":
        m = plan_drop_cheap(graph)
    elif strategy == "sublinear":
        m = search_budget(graph).best.m
    elif strategy == "recursive":
        m = make_recursive_plan(graph, 1)
    else:
        raise DomainError(f"unknown strategy {strategy!r}")
    gg = build_mirrored(graph, m)
    return allocate(gg.graph, gg.order).peak_bytes, count_extra_forward(gg)


def _is_chain(graph) -> bool:
    try:
        chain_order(graph)
    except NotAChain:
        return False
    return True


def run_bench(generator: str, sizes, strategies=STRATEGIES, *,
              cap_bytes: int = DEFAULT_CAP_BYTES, **gen_kwargs) -> list[BenchmarkRow]:
    """One row per (strategy, size), sorted by (strategy, n).

    ``recursive`` only applies to chains and is silently skipped elsewhere.
    """
    if generator not in GENERATORS:
        raise DomainError(f"unknown generator {generator!r}; choose from {sorted(GENERATORS)}")
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise DomainError(f"unknown strategies {sorted(unknown)}")
    make = GENERATORS[generator]
    graphs = {}
    for n in sizes:
        try:
            graphs[n] = make(n, **gen_kwargs)
        except ValueError as exc:
            raise DomainError(str(exc)) from None
        if no_opt_estimate(graphs[n]) > cap_bytes:
            raise BenchRefused(
                f"size {n}: no_opt needs about {no_opt_estimate(graphs[n])} bytes, cap is {cap_bytes}")
    rows = []
    for n, graph in graphs.items():
        chain = _is_chain(graph)
        for strategy in strategies:
            if strategy == "recursive" and not chain:
                continue
            start = time.perf_counter()
            peak, extra = measure(graph, strategy)
            elapsed = (time.perf_counter() - start) * 1000.0
            rows.append(BenchmarkRow(strategy, n, peak, extra, round(elapsed, 3)))
    rows.sort(key=lambda r: (r.strategy, r.n))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f.name for f in fields(BenchmarkRow)])
    for row in rows:
        writer.writerow(astuple(row))
    return buf.getvalue()


def rows_from_csv(text: str) -> list[BenchmarkRow]:
    reader = csv.DictReader(io.StringIO(text))
    if ",".join(reader.fieldnames or []) != CSV_HEADER:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    return [
        BenchmarkRow(r["strategy"], int(r["n"]), int(r["feature_map_bytes"]),
                     int(r["extra_forward_ops"]), float(r["wall_time_ms"]))
        for r in reader
    ]


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    if len(ns) < 2:
        raise DomainError("a slope needs at least two sizes")
    slope, _ = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)
    return float(slope)


def strategy_slope(rows, strategy: str) -> float | None:
    picked = [r for r in rows if r.strategy == strategy]
    if len({r.n for r in picked}) < 2:
        return None
    return loglog_slope([r.n for r in picked], [r.feature_map_bytes for r in picked])
