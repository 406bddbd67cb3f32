"""Reference executor for forward graphs and gradient graphs.

Gradient graphs run under an :class:`~memplan.allocator.AllocationPlan`:
each storage tag is a real float64 buffer, every node writes its value into
its tag, and every read checks that the tag still holds the value it
expects.  A stale read raises :class:`TagOverwriteFault` instead of
producing wrong numbers.

Parameters live outside the tag system in a :class:`ParamStore`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .allocator import AllocationPlan, allocate
from .errors import BadSegmentation, ShapeMismatch, TagOverwriteFault
from .gradient import GradientGraph, build_plain_gradient
from .graph import GRAD_OP, OP_TABLE, Graph, Node, topological_order
from .planner import chain_order


@dataclass
class ParamStore:
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)
    grad_weights: dict[int, np.ndarray] = field(default_factory=dict)
    grad_biases: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, graph: Graph, rng: np.random.Generator, scale: float = 1.0) -> "ParamStore":
        store = cls()
        for node in graph.nodes:
            if node.op == "FullyConnected":
                fan_in = graph[node.preds[0]].shape[-1]
                units = node.attrs["units"]
                store.weights[node.id] = rng.standard_normal((fan_in, units)) * scale / np.sqrt(fan_in)
                store.biases[node.id] = rng.standard_normal(units) * 0.1 * scale
        store.zero_grad()
        return store

    def zero_grad(self) -> None:
        self.grad_weights = {k: np.zeros_like(w) for k, w in self.weights.items()}
        self.grad_biases = {k: np.zeros_like(b) for k, b in self.biases.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
            {k: v.copy() for k, v in self.grad_weights.items()},
            {k: v.copy() for k, v in self.grad_biases.items()},
        )

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.grad_weights):
            out[f"{k}.weight"] = self.grad_weights[k].copy()
            out[f"{k}.bias"] = self.grad_biases[k].copy()
        return out


@dataclass
class ExecutionReport:
    loss: float
    input_grads: dict[int, np.ndarray]
    param_grads: dict[str, np.ndarray]
    peak_live_bytes: int
    op_evaluations: int
    peak_stored_values: int = 0
    values: dict[int, np.ndarray] | None = None

    def to_dict(self) -> dict:
        return {
            "loss": float(self.loss),
            "input_grads": {str(k): v.tolist() for k, v in sorted(self.input_grads.items())},
            "param_grads": {k: v.tolist() for k, v in sorted(self.param_grads.items())},
            "peak_live_bytes": self.peak_live_bytes,
            "op_evaluations": self.op_evaluations,
            "peak_stored_values": self.peak_stored_values,
        }


def random_inputs(graph: Graph, rng: np.random.Generator) -> dict[int, np.ndarray]:
    return {i: rng.standard_normal(graph[i].shape) for i in graph.inputs}


def random_label(graph: Graph, rng: np.random.Generator) -> np.ndarray:
    loss = next(n for n in graph.nodes if n.op == "SoftmaxLoss")
    rows, classes = K.loss_rows(graph[loss.preds[0]].shape)
    return rng.integers(0, classes, size=rows)


def forward_op(node: Node, args: list[np.ndarray], params: ParamStore, label, key: int) -> np.ndarray:
    op = node.op
    if op == "FullyConnected":
        return K.fc_forward(args[0], params.weights[key], params.biases[key])
    if op == "Sigmoid":
        return K.sigmoid(args[0])
    if op == "ReLU":
        return K.relu(args[0])
    if op == "BatchNormLite":
        return K.batchnorm(args[0])
    if op == "SoftmaxLoss":
        return K.softmax_loss(args[0], label)
    if op == "Add":
        return args[0] + args[1]
    if op == "ElemMul":
        return args[0] * args[1]
    if op == "Identity":
        return args[0].copy()
    raise ValueError(f"no forward kernel for {op}")


def backward_op(of: str, slot: int, g, deps: list[np.ndarray], params: ParamStore, label,
                key: int) -> np.ndarray:
    """Gradient w.r.t. input ``slot`` of a forward ``of`` node, given the declared deps."""
    if of == "FullyConnected":
        return K.fc_backward(g, deps[0], params.weights[key],
                             params.grad_weights[key], params.grad_biases[key])
    if of == "Sigmoid":
        return K.sigmoid_backward(g, deps[0])
    if of == "ReLU":
        return K.relu_backward(g, deps[0])
    if of == "BatchNormLite":
        return K.batchnorm_backward(g, deps[0])
    if of == "SoftmaxLoss":
        return K.softmax_loss_backward(deps[0], label)
    if of in ("Add", "Identity"):
        return g.copy()
    if of == "ElemMul":
        return g * deps[0]
    raise ValueError(f"no backward kernel for {of}")


def _check_input(node: Node, value) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.shape != tuple(node.shape):
        raise ShapeMismatch(node.id, f"input has shape {value.shape}, expected {tuple(node.shape)}")
    return value


def run_forward(graph: Graph, inputs, params: ParamStore, label=None) -> dict[int, np.ndarray]:
    """Evaluate every node in topological order, keeping all values."""
    values: dict[int, np.ndarray] = {}
    for v in topological_order(graph):
        node = graph[v]
        if node.op == "Input":
            if v not in inputs:
                raise ShapeMismatch(v, "no value supplied for Input")
            values[v] = _check_input(node, inputs[v])
            continue
        out = forward_op(node, [values[p] for p in node.preds], params, label, v)
        if out.shape != tuple(node.shape):
            raise ShapeMismatch(v, f"{node.op} produced shape {out.shape}, declared {tuple(node.shape)}")
        values[v] = out
    return values


def run_gradient_graph(gg: GradientGraph, plan: AllocationPlan | None, inputs, label,
                       params: ParamStore, *, keep_values: bool = False) -> ExecutionReport:
    """Execute ``gg`` in its logical order with every value stored in its tag buffer."""
    graph = gg.graph
    if plan is None:
        plan = allocate(graph, gg.order)
    for node in graph.nodes:
        if node.dtype_bytes != 8:
            raise ShapeMismatch(node.id, "the executor computes in 8-byte floats only")
    params.zero_grad()

    buffers = {t: np.empty(size // 8) for t, size in plan.tags.items()}
    owner: dict[int, int] = {}
    written = {t: 0 for t in plan.tags}
    outputs = set(graph.outputs)
    pending = {v: 0 for v in gg.order}
    for v in gg.order:
        for p in set(graph[v].preds):
            pending[p] += 1
    stored = set()
    peak_stored = 0
    evaluations = 0
    dumped = {} if keep_values else None

    def read(reader: int, u: int) -> np.ndarray:
        t = plan.assignment[u]
        if owner.get(t) != u:
            raise TagOverwriteFault(reader, u, owner.get(t), t)
        return buffers[t][: graph[u].numel].reshape(graph[u].shape)

    for v in gg.order:
        node = graph[v]
        if node.op == "Input":
            value = _check_input(node, inputs[v])
        else:
            args = [read(v, p) for p in node.preds]
            evaluations += 1
            if node.op == GRAD_OP:
                of, slot, fwd = node.attrs["of"], node.attrs["slot"], node.attrs["node"]
                if of == "SoftmaxLoss":
                    g, deps = None, args
                else:
                    g, deps = args[0], args[1:]
                value = backward_op(of, slot, g, deps, params, label, fwd)
            else:
                value = forward_op(node, args, params, label, gg.original(v))
            if value.shape != tuple(node.shape):
                raise ShapeMismatch(v, f"{node.op} produced shape {value.shape}")
        t = plan.assignment[v]
        np.copyto(buffers[t][: node.numel], value.reshape(-1))
        owner[t] = v
        written[t] = max(written[t], node.out_size)
        if keep_values:
            dumped[v] = value.copy()

        if gg.is_forward_value(v) and node.op != "Input" and v not in outputs:
            stored.add(v)
        peak_stored = max(peak_stored, len(stored))
        for p in set(node.preds):
            pending[p] -= 1
            if pending[p] == 0:
                stored.discard(p)
        if pending[v] == 0:
            stored.discard(v)

    for out in outputs:
        read(-1, out)
    input_grads = {i: read(-1, g).copy() for i, g in gg.grad_outputs.items()}
    return ExecutionReport(
        loss=float(read(-1, gg.loss)[0]),
        input_grads=input_grads,
        param_grads=params.grads(),
        peak_live_bytes=sum(written.values()),
        op_evaluations=evaluations,
        peak_stored_values=peak_stored,
        values=dumped,
    )


def gradients_equal(a: ExecutionReport, b: ExecutionReport) -> str | None:
    """None when losses and all gradients agree bitwise, else the first differing key."""
    if np.float64(a.loss).tobytes() != np.float64(b.loss).tobytes():
        return "loss"
    for i in sorted(set(a.input_grads) | set(b.input_grads)):
        if i not in a.input_grads or i not in b.input_grads:
            return f"input {i}"
        if a.input_grads[i].tobytes() != b.input_grads[i].tobytes():
            return f"input {i}"
    for k in sorted(set(a.param_grads) | set(b.param_grads), key=lambda s: (int(s.split(".")[0]), s)):
        if k not in a.param_grads or k not in b.param_grads:
            return f"param {k}"
        if a.param_grads[k].tobytes() != b.param_grads[k].tobytes():
            return f"param {k}"
    return None


# ---------------------------------------------------------------------------
# linear-chain backprop with data dropping


class _Meter:
    """Peak bytes over snapshots of the distinct arrays that are alive."""

    def __init__(self):
        self.peak = 0

    def __call__(self, *groups) -> None:
        seen = {}
        for group in groups:
            for arr in group:
                if arr is not None:
                    seen[id(arr)] = arr.nbytes
        self.peak = max(self.peak, sum(seen.values()))


def check_segments(segments, n: int) -> list[tuple[int, int]]:
    segs = [(int(a), int(b)) for a, b in segments]
    pos = 0
    for a, b in segs:
        if a != pos or b <= a:
            raise BadSegmentation(f"segments must tile [0, {n}) contiguously; got {segs}")
        pos = b
    if pos != n:
        raise BadSegmentation(f"segments end at {pos}, chain has {n} layers")
    return segs


def run_chain_dropping(graph: Graph, segments, inputs, label, params: ParamStore) -> ExecutionReport:
    """Segment-wise recomputing backprop over a chain ``Input -> layers -> SoftmaxLoss``.

    ``segments`` are half-open ``(begin, end)`` ranges over the layer indices.
    Only each segment's input is stored during the forward sweep; the backward
    sweep re-runs a segment forward into a local table before walking it
    backwards.  The meter counts stored segment inputs, the local table, the
    running value, the running gradient and the loss.
    """
    path = chain_order(graph)
    x_id, layer_ids, loss_id = path[0], path[1:-1], path[-1]
    n = len(layer_ids)
    segs = check_segments(segments, n)
    params.zero_grad()
    meter = _Meter()
    evaluations = 0

    def forward(i, v):
        nonlocal evaluations
        evaluations += 1
        node = graph[layer_ids[i]]
        return forward_op(node, [v], params, label, node.id)

    def backward(i, g, x_in, y_out):
        nonlocal evaluations
        evaluations += 1
        node = graph[layer_ids[i]]
        deps = [y_out if d[0] == "output" else x_in for d in OP_TABLE[node.op].backward_deps[0]]
        return backward_op(node.op, 0, g, deps, params, label, node.id)

    v = _check_input(graph[x_id], inputs[x_id])
    temp: dict[int, np.ndarray] = {}
    for k, (begin, end) in enumerate(segs):
        temp[k] = v
        for i in range(begin, end):
            v = forward(i, v)
            meter(temp.values(), [v])
    loss_node = graph[loss_id]
    loss = forward_op(loss_node, [v], params, label, loss_id)
    g = K.softmax_loss_backward(v, label)
    evaluations += 2
    meter(temp.values(), [v, g, loss])

    for k in reversed(range(len(segs))):
        begin, end = segs[k]
        v = temp.pop(k)
        local: dict[int, np.ndarray] = {}
        for i in range(begin, end):
            local[i] = v
            v = forward(i, v)
            meter(temp.values(), local.values(), [v, g, loss])
        for i in reversed(range(begin, end)):
            y_out = local[i + 1] if i + 1 < end else v
            g = backward(i, g, local[i], y_out)
            meter(temp.values(), local.values(), [v, g, loss])

    return ExecutionReport(
        loss=float(loss[0]),
        input_grads={x_id: g.copy()},
        param_grads=params.grads(),
        peak_live_bytes=meter.peak,
        op_evaluations=evaluations,
    )


# ---------------------------------------------------------------------------
# finite differences


def _loss_at(graph, inputs, params, label) -> float:
    return float(run_forward(graph, inputs, params, label)[graph.outputs[0]][0])


def finite_difference_check(graph: Graph, inputs, params: ParamStore, label, epsilon: float = 1e-6,
                            max_coords: int = 64, seed: int = 0, floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``max_coords`` coordinates across all inputs and parameters are
    sampled.  The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gg = build_plain_gradient(graph)
    report = run_gradient_graph(gg, None, inputs, label, params)

    coords = []
    for i in sorted(inputs):
        for j in range(np.asarray(inputs[i]).size):
            coords.append(("input", i, j))
    for k in sorted(params.weights):
        coords += [("weight", k, j) for j in range(params.weights[k].size)]
        coords += [("bias", k, j) for j in range(params.biases[k].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picks = sorted(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[p] for p in picks]

    worst = 0.0
    for kind, key, j in coords:
        if kind == "input":
            analytic = report.input_grads[key].reshape(-1)[j]
        elif kind == "weight":
            analytic = report.param_grads[f"{key}.weight"].reshape(-1)[j]
        else:
            analytic = report.param_grads[f"{key}.bias"].reshape(-1)[j]
        probe = []
        for sign in (1.0, -1.0):
            xs = {i: np.array(a, dtype=np.float64, copy=True) for i, a in inputs.items()}
            ps = params.copy()
            target = {"input": xs, "weight": ps.weights, "bias": ps.biases}[kind][key]
            target.reshape(-1)[j] += sign * epsilon
            probe.append(_loss_at(graph, xs, ps, label))
        numeric = (probe[0] - probe[1]) / (2 * epsilon)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
