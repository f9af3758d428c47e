"""Command-line interface.

Subcommands:

* ``analyze <dsl> -o <dir>``      — run the static analyzer on a workload
  DSL file; writes plan text, an analysis report (JSON), and DOT renderings
  of the chosen and initial lock-order graphs.
* ``bench -c <config.json> -o <report.json> [--csv <file>]`` — run the
  benchmark matrix from a config file and write the report.
* ``verify [-c <config.json>]``   — small-scale correctness run: recorded
  histories must be serializable and the planned protocol must show no
  deadlocks or CC aborts.
* ``export-dot <graph|initial-graph|plans> <dsl> -o <file>`` — DOT dumps.

``LOCKPLAN_SEED`` overrides the configured seed.  Exit codes: 0 success,
1 correctness violation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .analyzer import analyze_workload, plans_text
from .bench import ConfigError, report_csv, run_bench, run_verify, write_report
from .dsl import DslError, parse_workload
from .slw import export_slw_dot

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _apply_seed_env(cfg: dict) -> dict:
    seed = os.environ.get("LOCKPLAN_SEED")
    if seed is not None:
        try:
            cfg = {**cfg, "seed": int(seed)}
        except ValueError:
            raise ConfigError(f"LOCKPLAN_SEED must be an integer, got {seed!r}")
    return cfg


def _analyze_file(dsl_path: str):
    try:
        text = Path(dsl_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read DSL file {dsl_path}: {exc}")
    try:
        workload = parse_workload(text)
    except DslError as exc:
        raise ConfigError(f"DSL error in {dsl_path}: {exc}")
    return workload, analyze_workload(workload)


def _plans_dot(analysis) -> str:
    """Plans as one DOT cluster per template path (lock/op/release chain)."""
    lines = ["digraph plans {", "  rankdir=LR;"]
    for plan in analysis.plans:
        cluster = f"{plan.template}_{plan.path_id}"
        lines.append(f'  subgraph "cluster_{cluster}" {{')
        lines.append(f'    label="{plan.template} path {plan.path_id}";')
        prev = None
        for i, event in enumerate(plan.events):
            name = f'"{cluster}/{i}"'
            kind = type(event).__name__
            if kind == "Acquire":
                label = "+".join(
                    f"{lock.mode}L({lock.table})[{len(lock.keys)}]" for lock in event.locks
                )
                shape = "box"
            elif kind == "Release":
                label = f"U({','.join(event.tables)})"
                shape = "diamond"
            else:
                op = plan.ops[event.index]
                label = f"{op.kind.value}({op.table.name})"
                shape = "ellipse"
            lines.append(f"    {name} [shape={shape}, label=\"{label}\"];")
            if prev is not None:
                lines.append(f"    {prev} -> {name};")
            prev = name
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    workload, analysis = _analyze_file(args.dsl)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plans.txt").write_text(plans_text(analysis.plans), encoding="utf-8")
    report = dict(analysis.report)
    report["dynamic_templates"] = analysis.dynamic_templates
    report["templates"] = [t.name for t in workload.templates]
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for name, graph in (("graph", analysis.graph), ("initial_graph", analysis.initial_graph)):
        dot = export_slw_dot(graph, title=name) if graph is not None else "digraph empty {}\n"
        (out / f"{name}.dot").write_text(dot, encoding="utf-8")
    (out / "plans.dot").write_text(_plans_dot(analysis), encoding="utf-8")
    print(
        f"analyzed {len(workload.templates)} templates -> {len(analysis.plans)} plans "
        f"({len(analysis.dynamic_templates)} dynamic) in {out}"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _apply_seed_env(_load_config(args.config))
    report = run_bench(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    write_report(report, args.out, args.csv)
    if not args.out and not args.csv:
        print(report_csv(report), end="")
    for row in report["rows"]:
        print(
            f"{row['workload']}/{row['protocol']} hot={row['hot_count']} p={row['p_hot']}: "
            f"{row['committed_per_s']} txn/s, p95={row['p95_us']}us, "
            f"retries={row['retries']}",
            file=sys.stderr,
        )
    if report["violations"] or any(row.get("serializable") is False for row in report["rows"]):
        print("correctness violations detected:", file=sys.stderr)
        for v in report["violations"]:
            print(f"  {v}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _apply_seed_env(_load_config(args.config))
    outcome = run_verify(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    for verdict in outcome["verdicts"]:
        status = "PASS" if verdict["passed"] else "FAIL"
        detail = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in verdict["checks"].items())
        print(f"{verdict['protocol']}: {status} ({detail}, committed={verdict['committed']})")
        if verdict["cycle"]:
            print(f"  conflict cycle: {verdict['cycle']}")
        for violation in verdict["violations"]:
            print(f"  violation: {violation}")
    print("verify:", "PASS" if outcome["passed"] else "FAIL")
    return EXIT_OK if outcome["passed"] else EXIT_VIOLATION


def cmd_export_dot(args) -> int:
    _, analysis = _analyze_file(args.dsl)
    if args.kind == "plans":
        dot = _plans_dot(analysis)
    else:
        graph = analysis.graph if args.kind == "graph" else analysis.initial_graph
        dot = export_slw_dot(graph, title=args.kind.replace("-", "_")) if graph else "digraph empty {}\n"
    Path(args.out).write_text(dot, encoding="utf-8")
    print(f"wrote {args.kind} DOT to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lockplan",
        description="Static lock planning and multi-protocol transaction benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze a workload DSL file")
    p.add_argument("dsl", help="path to the workload DSL file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="run the benchmark matrix from a config")
    p.add_argument("-c", "--config", required=True, help="config JSON path")
    p.add_argument("-o", "--out", help="report JSON path")
    p.add_argument("--csv", help="report CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="serializability and deadlock-freedom checks")
    p.add_argument("-c", "--config", help="config JSON path (defaults are built in)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-dot", help="export a graph or the plans as DOT")
    p.add_argument("kind", choices=("graph", "initial-graph", "plans"))
    p.add_argument("dsl", help="path to the workload DSL file")
    p.add_argument("-o", "--out", required=True, help="output DOT path")
    p.set_defaults(func=cmd_export_dot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
