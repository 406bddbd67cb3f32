"""Synthetic forward graphs: chains, ResNet-like and LSTM-like stacks, random DAGs."""

from __future__ import annotations

import numpy as np

from .graph import Graph, Node, check, infer_shape


class GraphBuilder:
    """Append-only helper that infers output shapes as nodes are added."""

    def __init__(self, dtype_bytes: int = 8):
        self.dtype_bytes = dtype_bytes
        self.nodes: list[Node] = []

    def input(self, shape) -> int:
        return self._push("Input", (), tuple(shape), {})

    def add(self, op: str, *preds: int, **attrs) -> int:
        shape = infer_shape(op, attrs, [self.nodes[p].shape for p in preds])
        return self._push(op, preds, shape, attrs)

    def _push(self, op, preds, shape, attrs) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, tuple(preds), tuple(shape), self.dtype_bytes, dict(attrs)))
        return nid

    def build(self, outputs) -> Graph:
        return check(Graph(tuple(self.nodes), tuple(outputs)))


def unit_chain(n: int, op: str = "Sigmoid", *, width: int = 1, batch: int | None = None,
               dtype_bytes: int = 8) -> Graph:
    """Input followed by ``n - 1`` copies of ``op`` and a SoftmaxLoss.

    ``n`` counts the non-input nodes, so node ids run 0..n with the loss at
    id ``n``.  With the default ``width=1`` every node has the same size.
    """
    if n < 1:
        raise ValueError("a chain needs at least the loss node")
    shape = (width,) if batch is None else (batch, width)
    b = GraphBuilder(dtype_bytes)
    v = b.input(shape)
    for _ in range(n - 1):
        v = b.add(op, v, units=width) if op == "FullyConnected" else b.add(op, v)
    loss = b.add("SoftmaxLoss", v)
    return b.build([loss])


def mlp_chain(n: int, *, width: int = 1, batch: int | None = None, dtype_bytes: int = 8) -> Graph:
    """Alternating FullyConnected / Sigmoid layers ending in a SoftmaxLoss.

    ``n`` counts non-input nodes, like :func:`unit_chain`.
    """
    if n < 1:
        raise ValueError("a chain needs at least the loss node")
    shape = (width,) if batch is None else (batch, width)
    b = GraphBuilder(dtype_bytes)
    v = b.input(shape)
    for i in range(n - 1):
        v = b.add("FullyConnected", v, units=width) if i % 2 == 0 else b.add("Sigmoid", v)
    return b.build([b.add("SoftmaxLoss", v)])


RESNET_STAGE_WIDTHS = (64, 32, 16, 8)


def resnet_shaped(depth: int, *, batch: int = 4, widths=RESNET_STAGE_WIDTHS,
                  classes: int = 8, dtype_bytes: int = 8) -> Graph:
    """FullyConnected/BatchNormLite/ReLU triples arranged in four residual stages.

    ``depth`` is the number of triples.  Each stage opens with a projection
    triple (no skip) followed by residual blocks of two triples plus an Add.
    Stage widths halve so that per-stage feature maps shrink like a ResNet's.
    """
    if depth < 4:
        raise ValueError("resnet_shaped needs depth >= 4 (one triple per stage)")
    b = GraphBuilder(dtype_bytes)
    v = b.input((batch, widths[0]))
    per_stage = [depth // 4 + (1 if s < depth % 4 else 0) for s in range(4)]

    def triple(x, units):
        x = b.add("FullyConnected", x, units=units)
        x = b.add("BatchNormLite", x)
        return b.add("ReLU", x)

    for stage, count in enumerate(per_stage):
        v = triple(v, widths[stage])
        remaining = count - 1
        while remaining >= 2:
            h = triple(triple(v, widths[stage]), widths[stage])
            v = b.add("Add", h, v)
            remaining -= 2
        if remaining:
            v = triple(v, widths[stage])
    v = b.add("FullyConnected", v, units=classes)
    return b.build([b.add("SoftmaxLoss", v)])


def lstm_shaped(steps: int, *, batch: int = 4, hidden: int = 16, features: int = 8,
                classes: int = 8, dtype_bytes: int = 8) -> Graph:
    """Unrolled gated recurrence with one Input per time step.

    Each step computes ``h = sigmoid(Wg h + Ug x) * relu(Wc h + Uc x)`` from
    fine-grained nodes.  Weights are not tied across steps.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    b = GraphBuilder(dtype_bytes)
    h = None
    for _ in range(steps):
        x = b.input((batch, features))
        gate_x = b.add("FullyConnected", x, units=hidden)
        cand_x = b.add("FullyConnected", x, units=hidden)
        if h is None:
            gate, cand = gate_x, cand_x
        else:
            gate = b.add("Add", b.add("FullyConnected", h, units=hidden), gate_x)
            cand = b.add("Add", b.add("FullyConnected", h, units=hidden), cand_x)
        h = b.add("ElemMul", b.add("Sigmoid", gate), b.add("ReLU", cand))
    out = b.add("FullyConnected", h, units=classes)
    return b.build([b.add("SoftmaxLoss", out)])


GENERATORS = {
    "chain": mlp_chain,
    "unit-chain": unit_chain,
    "resnet-shaped": resnet_shaped,
    "lstm-shaped": lstm_shaped,
}


def random_dag(rng: np.random.Generator, n_nodes: int, *, batch: int = 2,
               widths=(1, 2, 3), dtype_bytes: int = 8) -> Graph:
    """Random shape-consistent DAG with a single SoftmaxLoss root.

    Roughly ``n_nodes`` nodes are generated; dangling values are folded into
    the loss so that every node is reachable.
    """
    b = GraphBuilder(dtype_bytes)
    n_inputs = int(rng.integers(1, 3))
    for _ in range(n_inputs):
        b.input((batch, int(rng.choice(widths))))
    unary = ["FullyConnected", "Sigmoid", "ReLU", "BatchNormLite", "Identity"]
    body = max(n_nodes - n_inputs - 3, 1)
    for _ in range(body):
        existing = len(b.nodes)
        if rng.random() < 0.3:
            a = int(rng.integers(existing))
            same = [i for i in range(existing) if b.nodes[i].shape == b.nodes[a].shape]
            other = int(rng.choice(same))
            b.add(str(rng.choice(["Add", "ElemMul"])), a, other)
        else:
            op = str(rng.choice(unary))
            src = int(rng.integers(existing))
            if op == "FullyConnected":
                b.add(op, src, units=int(rng.choice(widths)))
            else:
                b.add(op, src)
    consumed = {p for node in b.nodes for p in node.preds}
    sinks = [node.id for node in b.nodes if node.id not in consumed]
    width = b.nodes[sinks[-1]].shape[-1]
    acc = None
    for s in sinks:
        v = s if b.nodes[s].shape[-1] == width else b.add("FullyConnected", s, units=width)
        acc = v if acc is None else b.add("Add", acc, v)
    return b.build([b.add("SoftmaxLoss", acc)])
