"""Static storage-tag allocation driven by per-node liveness counters.

The graph is walked once in execution order.  Every node carries a counter
of pending consumers.  When a node runs it may

* take over the tag of an input whose counter is down to this last use
  (inplace), when its kernel can overwrite its input and sizes agree;
* otherwise reuse the smallest free tag that is large enough (sharing);
* otherwise open a fresh tag.

After the node is placed its inputs' counters are decremented; a tag whose
owner reaches zero goes back to the free pool unless the owner is pinned.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .errors import OrderMismatch, ParseError
from .graph import Graph, ancestors


@dataclass(frozen=True)
class StorageTag:
    tag: int
    size: int


@dataclass
class AllocationPlan:
    assignment: dict[int, int]
    tags: dict[int, int]  # tag id -> size in bytes
    inplace_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def peak_bytes(self) -> int:
        return sum(self.tags.values())

    def storage(self, node: int) -> StorageTag:
        t = self.assignment[node]
        return StorageTag(t, self.tags[t])

    def to_dict(self) -> dict:
        return {
            "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
            "tags": {str(k): v for k, v in sorted(self.tags.items())},
            "peak_bytes": self.peak_bytes,
            "inplace_pairs": [list(p) for p in self.inplace_pairs],
        }

    @classmethod
    def from_dict(cls, obj) -> "AllocationPlan":
        try:
            plan = cls(
                assignment={int(k): int(v) for k, v in obj["assignment"].items()},
                tags={int(k): int(v) for k, v in obj["tags"].items()},
                inplace_pairs=[(int(a), int(b)) for a, b in obj.get("inplace_pairs", [])],
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"allocation plan: {exc}") from None
        if "peak_bytes" in obj and obj["peak_bytes"] != plan.peak_bytes:
            raise ParseError("allocation plan: peak_bytes disagrees with tag sizes")
        return plan


def check_order(graph: Graph, order: list[int]) -> None:
    """Raise OrderMismatch unless ``order`` runs every node needed by an output, preds first."""
    needed = ancestors(graph, graph.outputs)
    if len(order) != len(set(order)) or set(order) != needed:
        raise OrderMismatch("order is not a permutation of the nodes reachable from the outputs")
    pos = {v: i for i, v in enumerate(order)}
    for v in order:
        for p in graph.nodes[v].preds:
            if pos[p] > pos[v]:
                raise OrderMismatch(f"node {v} runs before its predecessor {p}")


def allocate(graph: Graph, order: list[int], *, inplace: bool = True, sharing: bool = True,
             pinned=None) -> AllocationPlan:
    """Assign a storage tag to every node of ``order``.

    ``pinned`` nodes (default: the graph outputs) never give their tag back.
    Disabling both ``inplace`` and ``sharing`` gives one fresh tag per node.
    """
    check_order(graph, order)
    nodes = graph.nodes
    keep = set(graph.outputs) if pinned is None else set(pinned) | set(graph.outputs)
    scheduled = set(order)
    counter = {v: sum(1 for c in graph.consumers[v] if c in scheduled) for v in order}

    assignment: dict[int, int] = {}
    tags: dict[int, int] = {}
    pairs: list[tuple[int, int]] = []
    free: list[tuple[int, int]] = []  # sorted (size, tag)

    for v in order:
        node = nodes[v]
        size = node.out_size
        distinct_preds = list(dict.fromkeys(node.preds))
        donor = None
        if inplace and node.inplace_capable:
            for u in distinct_preds:
                if counter[u] == 1 and u not in keep and nodes[u].out_size == size:
                    donor = u
                    break
        if donor is not None:
            tag = assignment[donor]
            pairs.append((donor, v))
        else:
            i = bisect.bisect_left(free, (size, -1)) if sharing else len(free)
            if i < len(free):
                _, tag = free.pop(i)
            else:
                tag = len(tags)
                tags[tag] = size
        assignment[v] = tag

        for u in distinct_preds:
            counter[u] -= 1
            if counter[u] == 0 and u != donor and u not in keep and sharing:
                bisect.insort(free, (tags[assignment[u]], assignment[u]))
        if counter[v] == 0 and v not in keep and sharing:
            bisect.insort(free, (tags[tag], tag))

    return AllocationPlan(assignment, tags, pairs)


def exact_cost(graph: Graph, order: list[int], **kwargs) -> int:
    """Feature-map bytes of the allocation plan for ``order``."""
    return allocate(graph, order, **kwargs).peak_bytes


@dataclass(frozen=True)
class Clobber:
    reader: int
    expected: int
    found: int | None
    tag: int


def check_interference(graph: Graph, order: list[int], plan: AllocationPlan) -> list[Clobber]:
    """Replay ``order`` against the tag plan and report every stale read.

    Each tag remembers which node last wrote it.  A read of node ``u`` from a
    tag whose last writer is not ``u`` means ``u`` was overwritten while still
    needed.  Pinned outputs are read back once more at the end.
    """
    owner: dict[int, int] = {}
    problems = []
    for v in order:
        for u in graph.nodes[v].preds:
            t = plan.assignment[u]
            if owner.get(t) != u:
                problems.append(Clobber(v, u, owner.get(t), t))
        t = plan.assignment[v]
        if plan.tags[t] < graph.nodes[v].out_size:
            problems.append(Clobber(v, v, None, t))
        owner[t] = v
    for out in graph.outputs:
        t = plan.assignment[out]
        if owner.get(t) != out:
            problems.append(Clobber(-1, out, owner.get(t), t))
    return problems
