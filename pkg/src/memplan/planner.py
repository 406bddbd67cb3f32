"""Mirror-plan producers: budget segmentation, budget search, cheap-op dropping, recursion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .allocator import allocate
from .errors import DegenerateGraph, DomainError, NotAChain, ParseError
from .gradient import GradientGraph, build_mirrored
from .graph import Graph, _dump, check, parse_json, topological_order

GRID_POINTS = 6


@dataclass
class BudgetPlanResult:
    x: int  # bytes kept between stages
    y: int  # largest running sum at which a stage was closed
    m: dict[int, int]
    B: float
    splits: list[int] = field(default_factory=list)
    tail: int = 0  # running sum of the last stage, which the loop never closes
    exact_peak: int | None = None

    @property
    def max_stage(self) -> int:
        """Largest stage cost including the unclosed last stage."""
        return max(self.y, self.tail)

    def to_dict(self) -> dict:
        doc = {
            "m": {str(k): v for k, v in sorted(self.m.items())},
            "x": self.x,
            "y": self.y,
            "tail": self.tail,
            "B": self.B,
            "splits": list(self.splits),
        }
        if self.exact_peak is not None:
            doc["exact_peak"] = self.exact_peak
        return doc


@dataclass
class SearchResult:
    best: BudgetPlanResult
    exact_peak: int
    trace: list[tuple[float, int]]


@dataclass(frozen=True)
class RecursionEstimate:
    n: int
    k: int
    depth: int
    memory_units: int
    extra_forward_factor: int

    @property
    def closed_form(self) -> float:
        """k * log_{k+1}(n), the continuous solution of the recursion."""
        return self.k * math.log(self.n, self.k + 1) if self.n > 1 else 0.0


def default_candidates(graph: Graph) -> set[int]:
    return {n.id for n in graph.nodes if n.op != "Input"}


def plan_with_budget(graph: Graph, order: list[int], candidates, B: float) -> BudgetPlanResult:
    """Greedy segmentation: close a stage at the first candidate where the running sum exceeds B.

    Every node of ``order`` adds its output size to the running sum, Inputs
    included; Inputs are kept (m=0) whatever the loop decides.  ``y`` only
    sees closed stages; the running sum left over at the end is ``tail``.
    """
    if B < 0:
        raise DomainError(f"budget must be non-negative, got {B}")
    candidates = set(candidates)
    temp = x = y = 0
    m: dict[int, int] = {}
    splits = []
    for v in order:
        size = graph[v].out_size
        temp += size
        if v in candidates and temp > B:
            x += size
            y = max(y, temp)
            m[v] = 0
            temp = 0
            splits.append(v)
        else:
            m[v] = 1
    for v in order:
        if graph[v].op == "Input":
            m[v] = 0
    return BudgetPlanResult(x=x, y=y, m=m, B=B, splits=splits, tail=temp)


def evaluate_plan(graph: Graph, m) -> tuple[int, GradientGraph]:
    """Exact feature-map bytes of the gradient graph built from ``m``."""
    gg = build_mirrored(graph, m)
    return allocate(gg.graph, gg.order).peak_bytes, gg


def grid(pivot: float, points: int = GRID_POINTS) -> list[float]:
    """``points`` geometrically spaced budgets spanning [pivot/sqrt2, sqrt2*pivot]."""
    lo = pivot / math.sqrt(2)
    return [lo * 2.0 ** (j / (points - 1)) for j in range(points)]


def search_budget(graph: Graph, candidates=None) -> SearchResult:
    """Two bootstrap runs of :func:`plan_with_budget` then a six-point grid around sqrt(x*y).

    Every candidate plan is ranked by the allocator's exact cost; the first
    plan reaching the minimum wins.
    """
    check(graph)
    if graph.total_bytes == 0:
        raise DegenerateGraph("graph has no feature-map bytes")
    order = topological_order(graph)
    if candidates is None:
        candidates = default_candidates(graph)
    trace: list[tuple[float, int]] = []
    best: BudgetPlanResult | None = None

    def run(B: float) -> BudgetPlanResult:
        nonlocal best
        r = plan_with_budget(graph, order, candidates, B)
        r.exact_peak, _ = evaluate_plan(graph, r.m)
        trace.append((B, r.exact_peak))
        if best is None or r.exact_peak < best.exact_peak:
            best = r
        return r

    first = run(0.0)
    second = run(math.sqrt(first.x * first.y))
    for B in grid(math.sqrt(second.x * second.y)):
        run(B)
    return SearchResult(best=best, exact_peak=best.exact_peak, trace=trace)


def plan_drop_cheap(graph: Graph) -> dict[int, int]:
    """Recompute every low-cost operator's output unless it is a graph output."""
    outputs = set(graph.outputs)
    return {n.id: int(n.low_cost and n.id not in outputs) for n in graph.nodes}


def recursion_estimate(n: int, k: int) -> RecursionEstimate:
    """Iterate g(n) = k + g(ceil(n / (k + 1))) down to g(1) = 0."""
    if n < 1 or k < 1:
        raise DomainError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    units = depth = 0
    rest = n
    while rest > 1:
        units += k
        rest = -(-rest // (k + 1))
        depth += 1
    return RecursionEstimate(n=n, k=k, depth=depth, memory_units=units, extra_forward_factor=depth)


def chain_order(graph: Graph) -> list[int]:
    """Node ids from the Input to the output of a linear chain, or NotAChain."""
    check(graph)
    consumers = graph.consumers
    heads = [n.id for n in graph.nodes if not n.preds]
    if len(heads) != 1 or len(graph.outputs) != 1:
        raise NotAChain("a chain has exactly one input and one output")
    order = [heads[0]]
    while consumers[order[-1]]:
        nxt = consumers[order[-1]]
        if len(nxt) != 1 or len(set(graph[nxt[0]].preds)) != 1:
            raise NotAChain(f"node {order[-1]} fans out or {nxt} fans in")
        order.append(nxt[0])
    if len(order) != len(graph) or order[-1] != graph.outputs[0]:
        raise NotAChain("graph is not a single path")
    return order


def make_recursive_plan(graph: Graph, k: int) -> dict[int, int]:
    """Mirror counts for recursive segmentation of a chain.

    The chain positions 0..n (0 is the Input, n the loss) form the segment
    (0, n].  A segment longer than one node keeps ``k`` evenly spaced
    interior results at its own level and recurses into the pieces at the
    next level.  Each node's mirror count is the level that keeps it.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    path = chain_order(graph)
    m = {v: 0 for v in path}
    stack = [(0, len(path) - 1, 0)]
    while stack:
        lo, hi, lvl = stack.pop()
        span = hi - lo
        if span < 2:
            continue
        cuts = sorted({lo + span * t // (k + 1) for t in range(1, k + 1)} - {lo, hi})
        for c in cuts:
            m[path[c]] = lvl
        bounds = [lo, *cuts, hi]
        for a, b in zip(bounds, bounds[1:]):
            stack.append((a, b, lvl + 1))
    return m


# ---------------------------------------------------------------------------
# plan files


def save_plan(m, strategy: str, result: BudgetPlanResult | None = None, trace=None) -> bytes:
    doc = {"strategy": strategy}
    if result is not None:
        doc.update(result.to_dict())
    doc["m"] = {str(k): v for k, v in sorted(m.items())}
    if trace is not None:
        doc["trace"] = [[B, peak] for B, peak in trace]
    return _dump(doc)


def load_plan(text: bytes | str) -> dict[int, int]:
    """The ``m`` map of a plan file.  Counts are checked later, by the gradient builder."""
    obj = parse_json(text)
    raw = obj.get("m") if isinstance(obj, dict) else None
    if not isinstance(raw, dict):
        raise ParseError("plan: expected an object with an 'm' map")
    m = {}
    for k, v in raw.items():
        try:
            node = int(k)
        except ValueError:
            raise ParseError(f"plan: m key {k!r} is not a node id") from None
        if not isinstance(v, int) or isinstance(v, bool):
            raise ParseError(f"plan: m[{k}] must be an integer")
        m[node] = v
    return m
