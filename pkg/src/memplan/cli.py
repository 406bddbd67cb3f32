"""``memplan`` command-line front end.

Exit codes: 0 success, 1 unreadable or invalid input, 2 planner domain
error or invalid mirror plan, 3 gradient mismatch between a planned run and
the baseline.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .allocator import allocate
from .errors import (
    DomainError,
    GradientError,
    InvalidPlan,
    MemplanError,
    TagOverwriteFault,
)
from .executor import (
    ParamStore,
    gradients_equal,
    random_inputs,
    random_label,
    run_gradient_graph,
)
from .generators import GENERATORS
from .gradient import build_mirrored, build_plain_gradient, count_extra_forward, save_gradient_graph
from .graph import graph_from_dict, load_graph, parse_json, save_graph, topological_order, validate
from .planner import (
    default_candidates,
    evaluate_plan,
    load_plan,
    make_recursive_plan,
    plan_drop_cheap,
    plan_with_budget,
    save_plan,
    search_budget,
)


class Mismatch(MemplanError):
    def __init__(self, node, what):
        self.node = node
        super().__init__(f"gradient mismatch at node {node} ({what})")


class _InputError(MemplanError):
    pass


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise _InputError(f"cannot read {path}: {exc.strerror}") from None


def _write(path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    if path is None or str(path) == "-":
        sys.stdout.write(data.decode())
    else:
        Path(path).write_bytes(data)


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    graph = graph_from_dict(parse_json(_read(args.graph)))
    problems = validate(graph)
    if args.format == "json":
        _write(None, _json({"valid": not problems,
                            "diagnostics": [asdict(d) for d in problems]}))
    else:
        _write(None, _table_csv(["kind", "node", "message"],
                                [[d.kind, d.node, d.message] for d in problems]))
    return 1 if problems else 0


def cmd_gen(args) -> int:
    kwargs = {}
    if args.batch is not None:
        kwargs["batch"] = args.batch
    if args.width is not None:
        kwargs["width"] = args.width
    try:
        graph = GENERATORS[args.generator](args.n, **kwargs)
    except (ValueError, TypeError) as exc:
        raise DomainError(str(exc)) from None
    _write(args.output, save_graph(graph))
    return 0


def cmd_plan(args) -> int:
    graph = load_graph(_read(args.graph))
    if args.budget is not None:
        result = plan_with_budget(graph, topological_order(graph), default_candidates(graph),
                                  args.budget)
        result.exact_peak, _ = evaluate_plan(graph, result.m)
        doc = save_plan(result.m, "budget", result)
        trace = None
    elif args.search:
        found = search_budget(graph)
        trace = found.trace
        doc = save_plan(found.best.m, "search", found.best, trace)
    elif args.drop_cheap:
        m = plan_drop_cheap(graph)
        doc = save_plan(m, "drop_cheap")
        trace = None
    else:
        m = make_recursive_plan(graph, args.recursive)
        doc = save_plan(m, f"recursive-{args.recursive}")
        trace = None
    _write(args.output, doc)
    if args.trace_csv and trace is not None:
        _write(args.trace_csv, _table_csv(["B", "exact_peak"], trace))
    return 0


def _plan_or_zero(graph, path):
    return {} if path is None else load_plan(_read(path))


def cmd_gradgraph(args) -> int:
    graph = load_graph(_read(args.graph))
    gg = build_mirrored(graph, _plan_or_zero(graph, args.plan))
    _write(args.output, save_gradient_graph(gg))
    return 0


def cmd_alloc(args) -> int:
    graph = load_graph(_read(args.graph))
    if args.forward_only:
        target, order = graph, topological_order(graph)
    else:
        gg = build_mirrored(graph, _plan_or_zero(graph, args.plan))
        target, order = gg.graph, gg.order
    plan = allocate(target, order, inplace=not args.no_inplace, sharing=not args.no_sharing)
    if args.format == "json":
        _write(args.output, _json(plan.to_dict()))
    else:
        rows = [[v, t, plan.tags[t]] for v, t in sorted(plan.assignment.items())]
        _write(args.output, _table_csv(["node", "tag", "tag_bytes"], rows))
    return 0


def _first_differing_node(gg, what: str) -> int:
    kind, _, key = what.partition(" ")
    if kind == "input":
        return gg.grad_outputs.get(int(key), int(key))
    if kind == "param":
        return int(key.split(".")[0])
    return gg.loss


def exec_check(graph, plan, seed: int, dump_dir=None):
    """Run baseline and planned gradient graphs on seeded data; return both reports."""
    rng = np.random.default_rng(seed)
    params = ParamStore.init(graph, rng)
    inputs = random_inputs(graph, rng)
    label = random_label(graph, rng)
    base_gg = build_plain_gradient(graph)
    gg = build_mirrored(graph, plan)
    keep = dump_dir is not None
    base = run_gradient_graph(base_gg, None, inputs, label, params, keep_values=keep)
    try:
        planned = run_gradient_graph(gg, None, inputs, label, params, keep_values=keep)
    except TagOverwriteFault as exc:
        raise Mismatch(exc.expected, str(exc)) from None
    if keep:
        out = Path(dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "baseline.npz", **{str(k): v for k, v in base.values.items()})
        np.savez(out / "planned.npz", **{str(k): v for k, v in planned.values.items()})
    what = gradients_equal(base, planned)
    if what is not None:
        raise Mismatch(_first_differing_node(gg, what), what)
    return base, planned, gg


def cmd_exec(args) -> int:
    graph = load_graph(_read(args.graph))
    plan = _plan_or_zero(graph, args.plan)
    try:
        base, planned, gg = exec_check(graph, plan, args.seed, args.dump_values)
    except Mismatch as exc:
        print(f"MISMATCH first differing node: {exc.node}", file=sys.stderr)
        return 3
    summary = {
        "status": "equal",
        "extra_forward_ops": count_extra_forward(gg),
        "baseline_op_evaluations": base.op_evaluations,
        "baseline_peak_live_bytes": base.peak_live_bytes,
        **planned.to_dict(),
    }
    if args.format == "json":
        _write(args.output, _json(summary))
    else:
        keys = ["status", "loss", "extra_forward_ops", "op_evaluations", "baseline_op_evaluations",
                "peak_live_bytes", "baseline_peak_live_bytes", "peak_stored_values"]
        _write(args.output, _table_csv(keys, [[summary[k] for k in keys]]))
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench(args) -> int:
    strategies = tuple(args.strategies.split(",")) if args.strategies else bench_mod.STRATEGIES
    rows = bench_mod.run_bench(args.generator, args.sizes, strategies, cap_bytes=args.cap_bytes)
    if args.format == "json":
        _write(args.output, _json([asdict(r) for r in rows]))
    else:
        _write(args.output, bench_mod.rows_to_csv(rows))
    report = sys.stderr if args.output in (None, "-") else sys.stdout
    slope = bench_mod.strategy_slope(rows, "sublinear")
    if slope is not None:
        print(f"sublinear log-log slope: {slope:.3f}", file=report)
    plot_path = args.plot
    if plot_path is None and args.output not in (None, "-"):
        plot_path = str(Path(args.output).with_suffix(".png"))
    if plot_path and not args.no_plot:
        from .plotting import plot_rows

        plot_rows(rows, plot_path, title=args.generator)
        print(f"figure written to {plot_path}", file=report)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memplan", description="Memory planning for computation graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    def fmt(sp, default="csv"):
        sp.add_argument("--format", choices=("csv", "json"), default=default)

    sp = sub.add_parser("validate", help="check a graph file")
    sp.add_argument("graph")
    fmt(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("gen", help="write a synthetic graph")
    sp.add_argument("generator", choices=sorted(GENERATORS))
    sp.add_argument("n", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("plan", help="produce a mirror plan")
    sp.add_argument("graph")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--budget", type=float)
    mode.add_argument("--search", action="store_true")
    mode.add_argument("--drop-cheap", action="store_true")
    mode.add_argument("--recursive", type=int, metavar="K")
    sp.add_argument("-o", "--output")
    sp.add_argument("--trace-csv", help="write the search trace (B, exact_peak) here")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("gradgraph", help="write the gradient graph for a plan")
    sp.add_argument("graph")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_gradgraph)

    sp = sub.add_parser("alloc", help="allocate storage tags")
    sp.add_argument("graph")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--forward-only", action="store_true", help="allocate the inference graph")
    sp.add_argument("--no-inplace", action="store_true")
    sp.add_argument("--no-sharing", action="store_true")
    sp.add_argument("-o", "--output")
    fmt(sp, "json")
    sp.set_defaults(func=cmd_alloc)

    sp = sub.add_parser("exec", help="run planned and baseline gradients and compare bitwise")
    sp.add_argument("graph")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dump-values", metavar="DIR")
    sp.add_argument("-o", "--output")
    fmt(sp, "json")
    sp.set_defaults(func=cmd_exec)

    sp = sub.add_parser("bench", help="sweep strategies over a graph family")
    sp.add_argument("generator", choices=sorted(GENERATORS))
    sp.add_argument("--sizes", type=_int_list, required=True)
    sp.add_argument("--strategies", help=f"comma-separated subset of {','.join(bench_mod.STRATEGIES)}")
    sp.add_argument("--cap-bytes", type=int, default=bench_mod.DEFAULT_CAP_BYTES)
    sp.add_argument("-o", "--output")
    sp.add_argument("--plot", help="figure path (default: next to the CSV)")
    sp.add_argument("--no-plot", action="store_true")
    fmt(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def exit_code(exc: MemplanError) -> int:
    if isinstance(exc, (DomainError, InvalidPlan, GradientError)):
        return 2
    if isinstance(exc, Mismatch):
        return 3
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MemplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
