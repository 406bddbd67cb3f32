"""Computation-graph data model, validation, ordering and interchange format.

A :class:`Graph` is an immutable DAG of single-output operator nodes.  Node
ids are dense (``nodes[i].id == i``) but carry no ordering meaning; the
execution order always comes from :func:`topological_order` or from a
gradient builder.

Weights are not nodes.  A ``FullyConnected`` node owns its weight matrix and
bias implicitly; the executor keeps them in a parameter store keyed by the
node id.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .errors import CyclicGraph, ParseError, ValidationError

# Backward dependency declarations.  ``("output",)`` means the gradient
# kernel reads the node's own output, ``("input", j)`` the value of the j-th
# predecessor.  Kept minimal on purpose: the allocator can only share or
# overwrite what no gradient kernel declares.
OUTPUT = ("output",)


def INPUT(j: int) -> tuple:
    return ("input", j)


@dataclass(frozen=True)
class OpSpec:
    name: str
    arity: int
    inplace_capable: bool
    low_cost: bool
    # backward_deps[slot] -> forward values read by the gradient w.r.t. input `slot`
    backward_deps: tuple = ()
    # whether the gradient kernel for a slot may overwrite one of its inputs
    grad_inplace: bool = False


OP_TABLE: dict[str, OpSpec] = {
    spec.name: spec
    for spec in (
        OpSpec("Input", 0, inplace_capable=False, low_cost=False),
        OpSpec(
            "FullyConnected", 1, inplace_capable=False, low_cost=False,
            backward_deps=((INPUT(0),),),
        ),
        OpSpec(
            "Sigmoid", 1, inplace_capable=True, low_cost=True,
            backward_deps=((OUTPUT,),), grad_inplace=True,
        ),
        OpSpec(
            "ReLU", 1, inplace_capable=True, low_cost=True,
            backward_deps=((OUTPUT,),), grad_inplace=True,
        ),
        OpSpec(
            "BatchNormLite", 1, inplace_capable=False, low_cost=True,
            backward_deps=((INPUT(0),),),
        ),
        OpSpec(
            "SoftmaxLoss", 1, inplace_capable=False, low_cost=False,
            backward_deps=((INPUT(0),),),
        ),
        OpSpec(
            "Add", 2, inplace_capable=True, low_cost=False,
            backward_deps=((), ()), grad_inplace=True,
        ),
        OpSpec(
            "ElemMul", 2, inplace_capable=True, low_cost=False,
            backward_deps=((INPUT(1),), (INPUT(0),)), grad_inplace=True,
        ),
        OpSpec(
            "Identity", 1, inplace_capable=True, low_cost=True,
            backward_deps=((),), grad_inplace=True,
        ),
    )
}

# Gradient nodes only appear in graphs produced by the gradient builder.
# attrs: {"of": forward op name, "slot": input slot, "node": forward node id}
GRAD_OP = "Grad"
FORWARD_OPS = tuple(OP_TABLE)
ALL_OPS = FORWARD_OPS + (GRAD_OP,)


def grad_arity(of: str, slot: int) -> int:
    spec = OP_TABLE[of]
    incoming = 0 if of == "SoftmaxLoss" else 1
    return incoming + len(spec.backward_deps[slot])


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    preds: tuple[int, ...]
    shape: tuple[int, ...]
    dtype_bytes: int = 8
    attrs: Mapping = field(default_factory=dict)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def out_size(self) -> int:
        return self.numel * self.dtype_bytes

    @property
    def arity(self) -> int:
        if self.op == GRAD_OP:
            return grad_arity(self.attrs["of"], self.attrs["slot"])
        return OP_TABLE[self.op].arity

    @property
    def inplace_capable(self) -> bool:
        if self.op == GRAD_OP:
            return OP_TABLE[self.attrs["of"]].grad_inplace
        return OP_TABLE[self.op].inplace_capable

    @property
    def low_cost(self) -> bool:
        return self.op != GRAD_OP and OP_TABLE[self.op].low_cost


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    outputs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, i: int) -> Node:
        return self.nodes[i]

    def size(self, i: int) -> int:
        return self.nodes[i].out_size

    @property
    def total_bytes(self) -> int:
        return sum(n.out_size for n in self.nodes)

    @cached_property
    def consumers(self) -> tuple[tuple[int, ...], ...]:
        """Distinct consumers of every node, ascending by id."""
        out: list[set[int]] = [set() for _ in self.nodes]
        for n in self.nodes:
            for p in n.preds:
                out[p].add(n.id)
        return tuple(tuple(sorted(s)) for s in out)

    @property
    def inputs(self) -> list[int]:
        return [n.id for n in self.nodes if n.op == "Input"]


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    node: int | None
    message: str

    def __str__(self) -> str:
        where = "graph" if self.node is None else f"node {self.node}"
        return f"{self.kind} at {where}: {self.message}"


def infer_shape(op: str, attrs: Mapping, pred_shapes: Sequence[tuple]) -> tuple | None:
    """Output shape implied by the operator, or None when it is free (Input, Grad)."""
    if op in ("Input", GRAD_OP):
        return None
    if op == "FullyConnected":
        return tuple(pred_shapes[0][:-1]) + (int(attrs["units"]),)
    if op == "SoftmaxLoss":
        return (1,)
    if op in ("Add", "ElemMul"):
        if tuple(pred_shapes[0]) != tuple(pred_shapes[1]):
            raise ValueError(f"operand shapes differ: {pred_shapes[0]} vs {pred_shapes[1]}")
    return tuple(pred_shapes[0])


def _check_attrs(node: Node) -> str | None:
    if node.op == "FullyConnected":
        units = node.attrs.get("units")
        if not isinstance(units, int) or isinstance(units, bool) or units <= 0:
            return "FullyConnected needs a positive integer 'units' attribute"
    elif node.op == GRAD_OP:
        of, slot = node.attrs.get("of"), node.attrs.get("slot")
        if of not in OP_TABLE or of == "Input":
            return f"Grad node has bad 'of' attribute {of!r}"
        if not isinstance(slot, int) or not 0 <= slot < OP_TABLE[of].arity:
            return f"Grad node has bad 'slot' attribute {slot!r}"
        if not isinstance(node.attrs.get("node"), int):
            return "Grad node needs an integer 'node' attribute"
    return None


def _find_cycles(n: int, preds: list[list[int]]) -> list[list[int]]:
    """One node list per back edge found by an iterative DFS."""
    color = [0] * n  # 0 new, 1 on stack, 2 done
    cycles = []
    for root in range(n):
        if color[root]:
            continue
        stack = [(root, iter(preds[root]))]
        path = [root]
        color[root] = 1
        while stack:
            v, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[v] = 2
            elif color[nxt] == 1:
                cycles.append(path[path.index(nxt):])
            elif color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(preds[nxt])))
    return cycles


def validate(graph: Graph) -> list[Diagnostic]:
    """Return one diagnostic per invariant violation; empty means valid."""
    diags: list[Diagnostic] = []
    n = len(graph.nodes)
    clean_preds: list[list[int]] = []
    for i, node in enumerate(graph.nodes):
        if node.id != i:
            diags.append(Diagnostic("BadId", i, f"node at position {i} has id {node.id}"))
        good = []
        for p in node.preds:
            if isinstance(p, int) and 0 <= p < n:
                good.append(p)
            else:
                diags.append(Diagnostic("DanglingPred", i, f"predecessor {p!r} does not exist"))
        clean_preds.append(good)
        if node.op not in ALL_OPS:
            diags.append(Diagnostic("UnknownOp", i, f"unknown operator {node.op!r}"))
            continue
        bad_attrs = _check_attrs(node)
        if bad_attrs:
            diags.append(Diagnostic("BadAttrs", i, bad_attrs))
            continue
        if len(node.preds) != node.arity:
            diags.append(Diagnostic(
                "ArityMismatch", i,
                f"{node.op} takes {node.arity} inputs, got {len(node.preds)}",
            ))
        if not node.shape or any(d <= 0 for d in node.shape) or node.dtype_bytes <= 0:
            diags.append(Diagnostic(
                "ZeroSize", i, f"shape {list(node.shape)} x {node.dtype_bytes} bytes is empty",
            ))

    for cyc in _find_cycles(n, clean_preds):
        diags.append(Diagnostic("CycleDetected", cyc[0], f"cycle through nodes {cyc}"))

    if not diags:
        for node in graph.nodes:
            try:
                want = infer_shape(node.op, node.attrs, [graph.nodes[p].shape for p in node.preds])
            except ValueError as exc:
                diags.append(Diagnostic("ShapeMismatch", node.id, str(exc)))
                continue
            if want is not None and want != tuple(node.shape):
                diags.append(Diagnostic(
                    "ShapeMismatch", node.id,
                    f"{node.op} produces shape {list(want)}, declared {list(node.shape)}",
                ))

    if not graph.outputs:
        diags.append(Diagnostic("NoOutputs", None, "graph declares no outputs"))
    bad_out = [o for o in graph.outputs if not (isinstance(o, int) and 0 <= o < n)]
    for o in bad_out:
        diags.append(Diagnostic("BadOutput", None, f"output {o!r} does not exist"))
    if graph.outputs and not bad_out:
        seen = set(graph.outputs)
        stack = list(graph.outputs)
        while stack:
            for p in clean_preds[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        for i in range(n):
            if i not in seen:
                diags.append(Diagnostic("UnusedNode", i, "not reachable from any output"))
    return diags


def check(graph: Graph) -> Graph:
    diags = validate(graph)
    if diags:
        raise ValidationError(diags)
    return graph


def topological_order(graph: Graph, subset: Iterable[int] | None = None) -> list[int]:
    """Kahn's algorithm, lowest ready id first.

    With ``subset`` only those nodes are ordered; predecessors outside the
    subset are treated as already available.
    """
    if subset is None:
        members = range(len(graph.nodes))
        inside = None
    else:
        inside = set(subset)
        members = inside
    indeg = {}
    for v in members:
        ps = set(graph.nodes[v].preds)
        indeg[v] = len(ps if inside is None else ps & inside)
    ready = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    consumers = graph.consumers
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for c in consumers[v]:
            if c in indeg:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
    if len(order) != len(indeg):
        stuck = sorted(set(indeg) - set(order))
        raise CyclicGraph(f"cycle among nodes {stuck[:10]}")
    return order


def ancestors(graph: Graph, roots: Iterable[int]) -> set[int]:
    seen = set(roots)
    stack = list(seen)
    while stack:
        for p in graph.nodes[stack.pop()].preds:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


# ---------------------------------------------------------------------------
# interchange format

_NODE_FIELDS = ("id", "op", "attrs", "preds", "shape", "dtype_bytes")


def graph_to_dict(graph: Graph) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "op": n.op,
                "attrs": dict(n.attrs),
                "preds": list(n.preds),
                "shape": list(n.shape),
                "dtype_bytes": n.dtype_bytes,
            }
            for n in graph.nodes
        ],
        "outputs": list(graph.outputs),
    }


def save_graph(graph: Graph) -> bytes:
    return _dump(graph_to_dict(graph))


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=False) + "\n").encode()


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _int_list(value, where: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(_is_int(x) for x in value):
        raise ParseError(f"{where}: expected a list of integers")
    return tuple(value)


def parse_json(text: bytes | str) -> object:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def graph_from_dict(obj, extra_keys: Sequence[str] = ()) -> Graph:
    if not isinstance(obj, dict):
        raise ParseError("top level: expected an object")
    unknown = set(obj) - {"nodes", "outputs", *extra_keys}
    if unknown:
        raise ParseError(f"top level: unknown field(s) {sorted(unknown)}")
    for key in ("nodes", "outputs"):
        if key not in obj:
            raise ParseError(f"top level: missing field '{key}'")
    if not isinstance(obj["nodes"], list):
        raise ParseError("nodes: expected an array")
    nodes = []
    for i, raw in enumerate(obj["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: expected an object")
        unknown = set(raw) - set(_NODE_FIELDS)
        if unknown:
            raise ParseError(f"{where}: unknown field(s) {sorted(unknown)}")
        for key in ("id", "op", "preds", "shape"):
            if key not in raw:
                raise ParseError(f"{where}: missing field '{key}'")
        if not _is_int(raw["id"]):
            raise ParseError(f"{where}.id: expected an integer")
        op = raw["op"]
        if op not in ALL_OPS:
            raise ParseError(f"{where}.op: unknown operator {op!r}")
        attrs = raw.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError(f"{where}.attrs: expected an object")
        dtype_bytes = raw.get("dtype_bytes", 8)
        if not _is_int(dtype_bytes):
            raise ParseError(f"{where}.dtype_bytes: expected an integer")
        nodes.append(Node(
            id=raw["id"],
            op=op,
            preds=_int_list(raw["preds"], f"{where}.preds"),
            shape=_int_list(raw["shape"], f"{where}.shape"),
            dtype_bytes=dtype_bytes,
            attrs=attrs,
        ))
    outputs = _int_list(obj["outputs"], "outputs")
    return Graph(tuple(nodes), outputs)


def load_graph(text: bytes | str) -> Graph:
    """Decode and validate a graph document."""
    return check(graph_from_dict(parse_json(text)))
