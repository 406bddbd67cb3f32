import numpy as np
import pytest

from memplan.executor import ParamStore, random_inputs, random_label
from memplan.generators import GraphBuilder

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def two_layer_net(batch=None):
    """fullc -> sigmoid -> fullc -> softmax, the classic two-layer example."""
    b = GraphBuilder()
    x = b.input((8,) if batch is None else (batch, 8))
    h = b.add("FullyConnected", x, units=4)
    h = b.add("Sigmoid", h)
    h = b.add("FullyConnected", h, units=8)
    return b.build([b.add("SoftmaxLoss", h)])


def seeded(graph, seed):
    rng = np.random.default_rng(seed)
    return ParamStore.init(graph, rng), random_inputs(graph, rng), random_label(graph, rng)


@pytest.fixture
def net():
    return two_layer_net(batch=3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
