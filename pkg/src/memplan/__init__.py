"""Static memory planning for computation graphs: tag allocation, recomputation plans, execution."""

from .allocator import AllocationPlan, allocate, check_interference
from .errors import MemplanError
from .executor import ExecutionReport, ParamStore, run_chain_dropping, run_gradient_graph
from .gradient import GradientGraph, build_mirrored, build_plain_gradient, count_extra_forward
from .graph import Graph, Node, load_graph, save_graph, topological_order
from .planner import make_recursive_plan, plan_drop_cheap, plan_with_budget, recursion_estimate, search_budget

__all__ = [
    "AllocationPlan", "ExecutionReport", "Graph", "GradientGraph", "MemplanError", "Node",
    "ParamStore", "allocate", "build_mirrored", "build_plain_gradient", "check_interference",
    "count_extra_forward", "load_graph", "make_recursive_plan", "plan_drop_cheap",
    "plan_with_budget", "recursion_estimate", "run_chain_dropping", "run_gradient_graph",
    "save_graph", "search_budget", "topological_order",
]
