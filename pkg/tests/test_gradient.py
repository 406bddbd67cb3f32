import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memplan.errors import InvalidPlan, MultipleRoots
from memplan.generators import GraphBuilder, random_dag, unit_chain
from memplan.gradient import (
    build_mirrored,
    build_plain_gradient,
    count_extra_forward,
    forward_graph,
    load_gradient_graph,
    save_gradient_graph,
)
from memplan.graph import GRAD_OP, validate
from memplan.planner import make_recursive_plan, plan_with_budget, default_candidates
from memplan.graph import topological_order


def grad_nodes(gg):
    return [v for v in range(len(gg.graph)) if gg.graph[v].op == GRAD_OP]


def test_single_op_graph_has_one_gradient_node():
    gg = build_plain_gradient(unit_chain(1))
    assert len(grad_nodes(gg)) == 1
    assert gg.grad_outputs == {0: 2}


@pytest.mark.parametrize("n", [1, 2, 3, 8, 30])
def test_chain_compute_node_count(n):
    gg = build_plain_gradient(unit_chain(n), requested=[])
    compute = [v for v in range(len(gg.graph)) if gg.graph[v].op != "Input"]
    assert len(compute) == 2 * n - 1


def test_fan_out_gradient_is_summed():
    b = GraphBuilder()
    x = b.input((2, 3))
    h = b.add("Sigmoid", x)
    l = b.add("ReLU", h)
    r = b.add("Identity", h)
    g = b.build([b.add("SoftmaxLoss", b.add("Add", l, r))])
    gg = build_plain_gradient(g)
    (acc,) = [v for v, f in gg.fwd_of.items() if f == h and gg.graph[v].op == "Add"]
    parts = gg.graph[acc].preds
    assert sorted(gg.fwd_of[p] for p in parts) == [l, r]


def test_zero_plan_matches_plain():
    g = random_dag(np.random.default_rng(4), 20)
    assert build_mirrored(g, {v: 0 for v in range(len(g))}) == build_plain_gradient(g)


def test_two_boundary_chain_mirrors():
    # Input, S1, S2, loss; S1 and the loss are marked for recomputation.
    gg = build_mirrored(unit_chain(3), {0: 0, 1: 1, 2: 0, 3: 1})
    # the loss mirror has no reader (the loss gradient needs only the loss input), so it is dropped
    assert sorted(gg.mirror_of.values()) == [1]
    gg = build_mirrored(unit_chain(3), {0: 0, 1: 1, 2: 1, 3: 0})
    assert sorted(gg.mirror_of.values()) == [1, 2]
    assert gg.n_forward + 2 == sum(1 for v in range(len(gg.graph)) if gg.is_forward_value(v))


def test_backward_of_second_segment_precedes_recompute_of_first():
    g = unit_chain(6)  # Input, five Sigmoids, loss
    m = {0: 0, 1: 1, 2: 1, 3: 0, 4: 1, 5: 1, 6: 0}
    gg = build_mirrored(g, m)
    pos = {v: i for i, v in enumerate(gg.order)}
    seg1_mirrors = [c for c, v in gg.mirror_of.items() if v in (1, 2)]
    seg2_grads = [v for v, f in gg.fwd_of.items() if f in (4, 5, 6)]
    assert seg1_mirrors and seg2_grads
    assert max(pos[v] for v in seg2_grads) < min(pos[c] for c in seg1_mirrors)


def test_gradient_reads_deepest_copy():
    g = unit_chain(4)
    m = {1: 2, 2: 1}
    gg = build_mirrored(g, m)
    deepest = {v: max((c for c, o in gg.mirror_of.items() if o == v), key=gg.mirror_level.get)
               for v in (1, 2)}
    for v in (1, 2):
        (grad,) = [x for x, f in gg.fwd_of.items() if f == v]
        assert deepest[v] in gg.graph[grad].preds  # Sigmoid gradient reads its output


def test_extra_forward_counts():
    g = unit_chain(16)
    assert count_extra_forward(build_plain_gradient(g)) == 0
    all_one = {v: 1 for v in range(1, len(g))}
    # every mirror but the loss's own is read by some gradient
    assert count_extra_forward(build_mirrored(g, all_one)) == len(g) - 1 - 1


def test_sqrt_segmented_chain_extra_forward():
    n = 64
    g = unit_chain(n)
    step = int(math.sqrt(n))
    m = {v: 0 if v % step == 0 else 1 for v in range(1, n + 1)}
    m[n] = 0
    assert count_extra_forward(build_mirrored(g, m)) == n - step


def test_input_mirror_rejected():
    with pytest.raises(InvalidPlan):
        build_mirrored(unit_chain(3), {0: 1})
    with pytest.raises(InvalidPlan):
        build_mirrored(unit_chain(3), {1: -1})
    with pytest.raises(InvalidPlan):
        build_mirrored(unit_chain(3), {9: 1})


def test_multiple_roots_rejected():
    b = GraphBuilder()
    x = b.input((2,))
    g = b.build([b.add("SoftmaxLoss", x), b.add("SoftmaxLoss", b.add("Sigmoid", x))])
    with pytest.raises(MultipleRoots):
        build_plain_gradient(g)


def test_roundtrip_and_forward_part():
    g = unit_chain(6)
    gg = build_mirrored(g, make_recursive_plan(g, 1))
    assert load_gradient_graph(save_gradient_graph(gg)) == gg
    assert forward_graph(gg).nodes == g.nodes


def random_plan(graph, rng, top=3):
    return {v: int(rng.integers(0, top + 1)) for v in range(len(graph)) if graph[v].op != "Input"}


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), size=st.integers(3, 40), plan_seed=st.integers(0, 10**6))
def test_structure_on_random_plans(seed, size, plan_seed):
    g = random_dag(np.random.default_rng(seed), size)
    m = random_plan(g, np.random.default_rng(plan_seed))
    gg = build_mirrored(g, m)
    assert validate(gg.graph) == []
    # the execution order visits every node once, predecessors first
    assert sorted(gg.order) == list(range(len(gg.graph)))
    pos = {v: i for i, v in enumerate(gg.order)}
    assert all(pos[p] < pos[n.id] for n in gg.graph.nodes for p in n.preds)
    # forward pass first, unchanged
    assert gg.order[: len(g)] == topological_order(g)
    copy_at = {(o, gg.mirror_level[c]): c for c, o in gg.mirror_of.items()}
    for c, v in gg.mirror_of.items():
        k = gg.mirror_level[c]
        assert 1 <= k <= m.get(v, 0)
        # level-k copies read each pred at the deepest level <= k
        for u, p in zip(g[v].preds, gg.graph[c].preds):
            want = min(m.get(u, 0), k)
            assert p == (u if want == 0 else copy_at[(u, want)])
    # gradient nodes never read a forward value that has a deeper copy
    for grad in grad_nodes(gg):
        for p in gg.graph[grad].preds:
            if gg.is_forward_value(p):
                v = gg.original(p)
                assert gg.mirror_level.get(p, 0) == m.get(v, 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 200), B=st.integers(0, 40))
def test_budget_plans_add_at_most_one_forward_pass(n, B):
    g = unit_chain(n)
    r = plan_with_budget(g, topological_order(g), default_candidates(g), B)
    assert count_extra_forward(build_mirrored(g, r.m)) <= len(g)
