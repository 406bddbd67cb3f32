"""Gradient-graph construction with mirrored (recomputed) forward nodes.

A mirror plan maps every forward node to the number of times its output is
recomputed.  Nodes with count 0 are kept from the forward pass; a node with
count k gets mirror copies at levels 1..k, and gradient nodes read the
deepest copy.  The copy at level k reads, for each predecessor, the deepest
copy that exists at or below level k.

The execution order starts with the whole forward pass.  Walking the
forward nodes in reverse topological order, each new gradient node is
appended together with every not-yet-scheduled node it depends on.  Mirror
copies that no gradient node depends on are never scheduled and are left
out of the result.

Gradient nodes are single-output: one ``Grad`` node per (forward node,
input slot) computes that input's gradient contribution.  Contributions
meeting at a fan-out are summed by explicit ``Add`` nodes in successor
order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Mapping

from .errors import GradientError, InvalidPlan, MultipleRoots, ParseError
from .graph import (
    GRAD_OP,
    OP_TABLE,
    Graph,
    Node,
    check,
    graph_from_dict,
    graph_to_dict,
    parse_json,
    topological_order,
    _dump,
)

MirrorPlan = Mapping[int, int]


@dataclass(frozen=True)
class GradientGraph:
    graph: Graph
    order: list[int]
    fwd_of: dict[int, int]
    mirror_of: dict[int, int]
    grad_outputs: dict[int, int]
    mirror_level: dict[int, int] = field(default_factory=dict)
    n_forward: int = 0

    @property
    def loss(self) -> int:
        return self.graph.outputs[0]

    def original(self, node: int) -> int:
        """Forward node whose computation ``node`` repeats (itself if not a mirror)."""
        return self.mirror_of.get(node, node)

    def is_forward_value(self, node: int) -> bool:
        return node < self.n_forward or node in self.mirror_of

    @property
    def gradient_nodes(self) -> list[int]:
        return sorted(self.fwd_of)


def normalize_plan(graph: Graph, plan: MirrorPlan | None) -> dict[int, int]:
    """Complete ``plan`` with zeros and check its invariants."""
    m = {v: 0 for v in range(len(graph))}
    for v, k in (plan or {}).items():
        if not (isinstance(v, int) and 0 <= v < len(graph)):
            raise InvalidPlan(f"plan names unknown node {v!r}")
        if not isinstance(k, int) or isinstance(k, bool) or k < 0:
            raise InvalidPlan(f"mirror count for node {v} must be a non-negative integer, got {k!r}")
        m[v] = k
    for v in graph.inputs:
        if m[v]:
            raise InvalidPlan(f"Input node {v} cannot be recomputed (m={m[v]})")
    return m


def build_plain_gradient(graph: Graph, requested=None) -> GradientGraph:
    """Ordinary backward pathway: every forward value is kept."""
    return build_mirrored(graph, {}, requested)


def build_mirrored(graph: Graph, plan: MirrorPlan | None, requested=None) -> GradientGraph:
    """Build the gradient graph for ``plan``.

    ``requested`` lists the Input nodes whose gradients are returned (all
    inputs by default).  Graph outputs of the result are the loss followed by
    the requested gradients (plus any gradient node with no reader), so an
    allocator keeps them alive.
    """
    check(graph)
    if len(graph.outputs) != 1:
        raise MultipleRoots(f"expected one loss output, got {len(graph.outputs)}")
    root = graph.outputs[0]
    if graph[root].op != "SoftmaxLoss":
        raise GradientError(f"output node {root} is {graph[root].op}, not a SoftmaxLoss")
    losses = [n.id for n in graph.nodes if n.op == "SoftmaxLoss" and n.id != root]
    if losses:
        raise GradientError(f"SoftmaxLoss nodes {losses} are not the output")
    m = normalize_plan(graph, plan)
    inputs = graph.inputs
    requested = list(inputs if requested is None else requested)
    if any(graph[i].op != "Input" for i in requested):
        raise GradientError("only Input gradients can be requested")

    nodes: list[Node] = list(graph.nodes)

    def new_node(op, preds, shape, dtype_bytes, attrs) -> int:
        nid = len(nodes)
        nodes.append(Node(nid, op, tuple(preds), tuple(shape), dtype_bytes, attrs))
        return nid

    topo = topological_order(graph)
    latest = list(range(len(graph)))  # a[v]
    mirror_of: dict[int, int] = {}
    level: dict[int, int] = {}
    for k in range(1, max(m.values(), default=0) + 1):
        for v in topo:
            if m[v] >= k:
                src = graph[v]
                c = new_node(src.op, [latest[u] for u in src.preds], src.shape,
                             src.dtype_bytes, dict(src.attrs))
                mirror_of[c] = v
                level[c] = k
                latest[v] = c

    order = list(topo)
    scheduled = set(order)

    def schedule(target: int) -> None:
        fresh = []
        stack = [target]
        seen = {target}
        while stack:
            v = stack.pop()
            fresh.append(v)
            for p in nodes[v].preds:
                if p not in scheduled and p not in seen:
                    seen.add(p)
                    stack.append(p)
        if len(fresh) == 1:
            order.append(target)
        else:
            order.extend(_order_subset(nodes, fresh))
        scheduled.update(fresh)

    fwd_of: dict[int, int] = {}
    contrib: dict[int, list[int]] = {v: [] for v in range(len(graph))}
    grad_outputs: dict[int, int] = {}

    def sum_contributions(v: int) -> int | None:
        parts = contrib[v]
        if not parts:
            return None
        acc = parts[0]
        for part in parts[1:]:
            ref = graph[v]
            acc = new_node("Add", [acc, part], ref.shape, ref.dtype_bytes, {})
            fwd_of[acc] = v
            schedule(acc)
        return acc

    for v in reversed(topo):
        fwd = graph[v]
        if fwd.op == "Input":
            if v in requested:
                g = sum_contributions(v)
                if g is not None:
                    grad_outputs[v] = g
            continue
        if v == root:
            g_out = None
        else:
            g_out = sum_contributions(v)
            if g_out is None:
                continue  # output does not reach the loss
        spec = OP_TABLE[fwd.op]
        for slot, u in enumerate(fwd.preds):
            if graph[u].op == "Input" and u not in requested and fwd.op != "FullyConnected":
                continue  # nothing to compute; FullyConnected still owes weight gradients
            deps = []
            for dep in spec.backward_deps[slot]:
                deps.append(latest[v] if dep[0] == "output" else latest[fwd.preds[dep[1]]])
            preds = ([] if g_out is None else [g_out]) + deps
            ref = graph[u]
            g = new_node(GRAD_OP, preds, ref.shape, ref.dtype_bytes,
                         {"of": fwd.op, "slot": slot, "node": v})
            fwd_of[g] = v
            contrib[u].append(g)
            schedule(g)

    # Drop unscheduled mirrors and renumber densely; forward ids are unchanged.
    keep = sorted(scheduled)
    remap = {old: new for new, old in enumerate(keep)}
    final_nodes = tuple(
        Node(remap[old], nodes[old].op, tuple(remap[p] for p in nodes[old].preds),
             nodes[old].shape, nodes[old].dtype_bytes, nodes[old].attrs)
        for old in keep
    )
    # Gradient nodes nobody reads (weight-gradient side effects, or chains
    # that end at an unrequested input) become outputs so they still run.
    read = {p for v in keep for p in nodes[v].preds}
    sinks = [g for g in sorted(fwd_of) if g not in read and g not in grad_outputs.values()]
    outputs = [root] + [remap[g] for g in dict.fromkeys([*grad_outputs.values(), *sinks])]
    out_graph = Graph(final_nodes, tuple(outputs))
    return GradientGraph(
        graph=out_graph,
        order=[remap[v] for v in order],
        fwd_of={remap[g]: v for g, v in fwd_of.items()},
        mirror_of={remap[c]: v for c, v in mirror_of.items() if c in remap},
        grad_outputs={i: remap[g] for i, g in grad_outputs.items()},
        mirror_level={remap[c]: k for c, k in level.items() if c in remap},
        n_forward=len(graph),
    )


def _order_subset(nodes: list[Node], subset: list[int]) -> list[int]:
    # small standalone Kahn: the growing node list has no cached consumers
    inside = set(subset)
    indeg = {v: len(set(nodes[v].preds) & inside) for v in subset}
    users: dict[int, list[int]] = {v: [] for v in subset}
    for v in subset:
        for p in set(nodes[v].preds) & inside:
            users[p].append(v)
    ready = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        v = heapq.heappop(ready)
        out.append(v)
        for c in users[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    return out


def count_extra_forward(gg: GradientGraph) -> int:
    """Number of mirrored forward nodes, i.e. forward operators run a second time or more."""
    return len(gg.mirror_of)


def forward_graph(gg: GradientGraph) -> Graph:
    """The original forward graph embedded in ``gg`` (its first ``n_forward`` nodes)."""
    return Graph(gg.graph.nodes[: gg.n_forward], (gg.loss,))


# ---------------------------------------------------------------------------
# serialization

_EXTRA = ("order", "fwd_of", "mirror_of", "grad_outputs", "mirror_level", "n_forward")


def gradient_graph_to_dict(gg: GradientGraph) -> dict:
    doc = graph_to_dict(gg.graph)
    doc["order"] = list(gg.order)
    doc["fwd_of"] = {str(k): v for k, v in sorted(gg.fwd_of.items())}
    doc["mirror_of"] = {str(k): v for k, v in sorted(gg.mirror_of.items())}
    doc["grad_outputs"] = {str(k): v for k, v in sorted(gg.grad_outputs.items())}
    doc["mirror_level"] = {str(k): v for k, v in sorted(gg.mirror_level.items())}
    doc["n_forward"] = gg.n_forward
    return doc


def save_gradient_graph(gg: GradientGraph) -> bytes:
    return _dump(gradient_graph_to_dict(gg))


def load_gradient_graph(text: bytes | str) -> GradientGraph:
    obj = parse_json(text)
    graph = check(graph_from_dict(obj, extra_keys=_EXTRA))

    def int_map(key):
        raw = obj.get(key, {})
        if not isinstance(raw, dict):
            raise ParseError(f"{key}: expected an object")
        try:
            return {int(k): int(v) for k, v in raw.items()}
        except (TypeError, ValueError):
            raise ParseError(f"{key}: expected integer keys and values") from None

    order = obj.get("order")
    if not isinstance(order, list) or not all(isinstance(x, int) for x in order):
        raise ParseError("order: expected a list of integers")
    return GradientGraph(
        graph=graph,
        order=order,
        fwd_of=int_map("fwd_of"),
        mirror_of=int_map("mirror_of"),
        grad_outputs=int_map("grad_outputs"),
        mirror_level=int_map("mirror_level"),
        n_forward=int(obj.get("n_forward", 0)),
    )
