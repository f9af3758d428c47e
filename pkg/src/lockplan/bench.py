"""Benchmark orchestration: datasets, worker pools, reports.

A benchmark config (JSON-friendly dict) names a workload, the protocols to
compare, thread counts, contention knobs, and either a duration or a fixed
per-worker transaction count.  Each (protocol, knob point) runs against a
freshly loaded dataset; the report carries committed throughput, latency
percentiles over committed transactions (submission to commit, retries
included), retry and abort tallies by reason, and the useful / lock-wait /
wasted CPU-time split.  A warm-up prefix of the run is excluded from all
measured figures.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass

from .analyzer import AnalysisResult, analyze_workload
from .engine import Engine, RunResult, check_serializable
from .store import FileWal, Storage, load_store_dataset, load_tpcc, state_hash
from .workloads import (
    ContentionKnobs,
    HammerGenerator,
    HammerRuntime,
    MixedStoreGenerator,
    ReadItemsGenerator,
    StoreGenerator,
    StoreRuntime,
    TpccGenerator,
    TpccRuntime,
    load_dynamic_dataset,
    store_mixed_workload,
)

__all__ = [
    "ConfigError",
    "MixSpec",
    "BenchSetup",
    "build_setup",
    "run_bench",
    "run_verify",
    "summarize_run",
    "report_csv",
    "percentile",
]

PROTOCOL_NAMES = ("planned", "wound_wait", "bamboo", "sorted_locks", "occ")
WORKLOAD_NAMES = ("store", "store_mixed", "tpcc", "dynamic")

CSV_COLUMNS = [
    "workload",
    "protocol",
    "threads",
    "readonly_threads",
    "hot_count",
    "p_hot",
    "seed",
    "duration_s",
    "measured_s",
    "committed",
    "committed_per_s",
    "p50_us",
    "p95_us",
    "p99_us",
    "retries",
    "user_aborts",
    "cc_aborts",
    "abort_wound",
    "abort_cascade",
    "abort_validation",
    "abort_timeout",
    "frac_useful",
    "frac_lock_wait",
    "frac_wasted",
    "max_wait_s",
    "readonly_committed",
    "readonly_per_s",
    "readonly_p95_us",
    "violations",
]


class ConfigError(Exception):
    """Inconsistent benchmark configuration (exit code 2 at the CLI)."""


@dataclass(frozen=True)
class MixSpec:
    """Template mix weights plus the fraction of dynamic transactions."""

    weights: tuple[tuple[str, float], ...] = ()
    dynamic_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.weights:
            total = sum(w for _, w in self.weights)
            if any(w < 0 for _, w in self.weights) or abs(total - 1.0) > 1e-9:
                raise ConfigError(f"mix weights must be >= 0 and sum to 1, got {self.weights}")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ConfigError(f"dynamic_fraction must be in [0,1], got {self.dynamic_fraction}")

    def weight(self, name: str, default: float) -> float:
        for template, w in self.weights:
            if template == name:
                return w
        return default


DEFAULT_DATASET = {
    # Store sizes default to a desk-scale population; analysis plans are
    # invariant to uniform scaling so this does not change plan structure.
    "players": 100_000,
    "items_per_player": 5,
    "listings": 20_000,
    "warehouses": 4,
    "rows": 100_000,
}


def _mix_from_config(cfg: dict) -> MixSpec:
    raw = cfg.get("mix")
    if raw is None:
        return MixSpec()
    weights = tuple(sorted((str(k), float(v)) for k, v in raw.get("weights", {}).items()))
    return MixSpec(weights=weights, dynamic_fraction=float(raw.get("dynamic_fraction", 0.0)))


@dataclass
class BenchSetup:
    """Everything one run needs: loaded data, semantics, plans, generators."""

    storage: Storage
    runtime: object
    analysis: AnalysisResult
    gen_factory: object  # worker index -> generator
    readonly_factory: object | None
    hot_population: int


def build_setup(
    workload: str,
    knobs: ContentionKnobs,
    threads: int,
    dataset: dict,
    mix: MixSpec,
    wal=None,
) -> BenchSetup:
    if workload not in WORKLOAD_NAMES:
        raise ConfigError(f"unknown workload {workload!r} (expected one of {WORKLOAD_NAMES})")
    if not 0.0 <= knobs.p_hot <= 1.0:
        raise ConfigError(f"p_hot must be in [0,1], got {knobs.p_hot}")
    if knobs.hot_count < 1:
        raise ConfigError(f"hot_count must be positive, got {knobs.hot_count}")
    sizes = {**DEFAULT_DATASET, **dataset}

    if workload in ("store", "store_mixed"):
        storage = load_store_dataset(
            players=sizes["players"],
            items_per_player=sizes["items_per_player"],
            listings=sizes["listings"],
            seed=knobs.seed,
            wal=wal,
        )
        hot_population = storage.table_size("Items")
        p_add = mix.weight("AddListing", 0.5)
        if workload == "store":
            runtime = StoreRuntime()

            def gen_factory(w: int):
                return StoreGenerator(w, knobs, storage, threads, p_add=p_add)

        else:
            runtime = StoreRuntime(store_mixed_workload())

            def gen_factory(w: int):
                return MixedStoreGenerator(
                    w, knobs, storage, threads, mix.dynamic_fraction, p_add=p_add
                )

        def readonly_factory(w: int):
            return ReadItemsGenerator(w, knobs, storage.table_size("Items"))

    elif workload == "tpcc":
        storage = load_tpcc(warehouses=sizes["warehouses"], seed=knobs.seed, wal=wal)
        hot_population = storage.table_size("Warehouses")
        runtime = TpccRuntime()
        p_neworder = mix.weight("NewOrder", 0.5)

        def gen_factory(w: int):
            return TpccGenerator(w, knobs, storage, threads, p_neworder=p_neworder)

        readonly_factory = None

    else:  # dynamic
        storage = load_dynamic_dataset(rows=sizes["rows"], wal=wal)
        hot_population = storage.table_size("Rows")
        runtime = HammerRuntime()

        def gen_factory(w: int):
            return HammerGenerator(w, knobs, storage.table_size("Rows"))

        readonly_factory = None

    if knobs.hot_count > hot_population:
        raise ConfigError(
            f"hot_count {knobs.hot_count} exceeds the hot-key population "
            f"{hot_population} for workload {workload!r}"
        )
    analysis = analyze_workload(runtime.workload)
    return BenchSetup(storage, runtime, analysis, gen_factory, readonly_factory, hot_population)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile over an ascending list; 0.0 when empty."""
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


def summarize_run(
    result: RunResult,
    warmup_s: float,
    meta: dict,
) -> dict:
    """One report row; transactions finishing inside warm-up are excluded."""
    cut = result.started_perf + warmup_s
    main = [r for r in result.records if r.end_s >= cut]
    readonly = [r for r in result.readonly_records if r.end_s >= cut]
    measured = max(result.wall_s - warmup_s, 1e-9)

    committed = [r for r in main if r.outcome == "committed"]
    latencies = sorted(r.latency_s * 1e6 for r in committed)
    reasons = {"wound": 0, "cascade": 0, "validation": 0, "timeout": 0}
    retries = 0
    for r in main:
        retries += r.retries
        for reason, n in r.abort_reasons.items():
            reasons[reason] = reasons.get(reason, 0) + n

    useful = wait = wasted = 0.0
    for r in main + readonly:
        useful += r.useful_s
        wait += r.wait_s
        wasted += r.wasted_s
    total = useful + wait + wasted
    frac = lambda x: (x / total) if total > 0 else 0.0

    ro_committed = [r for r in readonly if r.outcome == "committed"]
    ro_latencies = sorted(r.latency_s * 1e6 for r in ro_committed)

    row = dict(meta)
    row.update(
        measured_s=round(measured, 6),
        committed=len(committed),
        committed_per_s=round(len(committed) / measured, 3),
        p50_us=round(percentile(latencies, 0.50), 1),
        p95_us=round(percentile(latencies, 0.95), 1),
        p99_us=round(percentile(latencies, 0.99), 1),
        retries=retries,
        user_aborts=sum(1 for r in main if r.outcome == "user_aborted"),
        cc_aborts=sum(reasons.values()),
        abort_wound=reasons["wound"],
        abort_cascade=reasons["cascade"],
        abort_validation=reasons["validation"],
        abort_timeout=reasons["timeout"],
        frac_useful=round(frac(useful), 4),
        frac_lock_wait=round(frac(wait), 4),
        frac_wasted=round(frac(wasted), 4),
        max_wait_s=round(result.max_wait_s, 4),
        readonly_committed=len(ro_committed),
        readonly_per_s=round(len(ro_committed) / measured, 3),
        readonly_p95_us=round(percentile(ro_latencies, 0.95), 1),
        violations="; ".join(result.violations),
    )
    return row


# ---------------------------------------------------------------------------
# Bench driver
# ---------------------------------------------------------------------------


def _knob_points(cfg: dict) -> list[ContentionKnobs]:
    base = cfg.get("knobs", {})
    seed = int(cfg.get("seed", base.get("seed", 1)))
    knobs = ContentionKnobs(
        hot_count=int(base.get("hot_count", 64)),
        p_hot=float(base.get("p_hot", 0.9)),
        seed=seed,
    )
    sweep = cfg.get("sweep") or {}
    if not sweep:
        return [knobs]
    if len(sweep) != 1:
        raise ConfigError("sweep supports exactly one knob axis")
    (axis, values), = sweep.items()
    if axis not in ("p_hot", "hot_count"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    points = []
    for v in values:
        if axis == "p_hot":
            points.append(ContentionKnobs(knobs.hot_count, float(v), seed))
        else:
            points.append(ContentionKnobs(int(v), knobs.p_hot, seed))
    return points


def run_bench(cfg: dict, progress=None) -> dict:
    """Run every (protocol, knob point) pair and return the report dict."""
    workload = cfg.get("workload", "store")
    protocols = cfg.get("protocols", ["planned"])
    for p in protocols:
        if p not in PROTOCOL_NAMES:
            raise ConfigError(f"unknown protocol {p!r} (expected one of {PROTOCOL_NAMES})")
    threads = int(cfg.get("threads", 4))
    readonly_threads = int(cfg.get("readonly_threads", 0))
    if threads < 1 or readonly_threads < 0:
        raise ConfigError("threads must be >= 1 and readonly_threads >= 0")
    duration_s = cfg.get("duration_s")
    txn_count = cfg.get("txn_count")
    if (duration_s is None) == (txn_count is None):
        raise ConfigError("specify exactly one of duration_s or txn_count")
    warmup_s = float(cfg.get("warmup_s", 0.1 * duration_s if duration_s else 0.0))
    if duration_s is not None and warmup_s >= duration_s:
        raise ConfigError("warmup_s must be smaller than duration_s")
    mix = _mix_from_config(cfg)
    dataset = cfg.get("dataset", {})
    record_history = bool(cfg.get("record_history", False))
    watchdog_s = cfg.get("watchdog_interval_s")
    wal_path = cfg.get("wal_path")
    op_cost_s = float(cfg.get("op_cost_s", 0.0))
    if op_cost_s < 0:
        raise ConfigError(f"op_cost_s must be >= 0, got {op_cost_s}")

    rows = []
    all_violations: list[str] = []
    for knobs in _knob_points(cfg):
        for protocol in protocols:
            wal = FileWal(wal_path) if wal_path else None
            setup = build_setup(workload, knobs, threads, dataset, mix, wal=None)
            if wal is not None:
                setup.storage.wal = wal  # log the run, not the dataset load
            engine = Engine(
                setup.storage,
                setup.runtime,
                protocol,
                analysis=setup.analysis,
                record_history=record_history,
                op_cost_s=op_cost_s,
            )
            if progress:
                progress(f"running {workload}/{protocol} hot={knobs.hot_count} p={knobs.p_hot}")
            result = engine.run(
                setup.gen_factory,
                threads=threads,
                duration_s=duration_s,
                txn_count=txn_count,
                readonly_gen_factory=setup.readonly_factory if readonly_threads else None,
                readonly_threads=readonly_threads if setup.readonly_factory else 0,
                watchdog_interval_s=watchdog_s,
            )
            if wal is not None:
                wal.close()
            meta = {
                "workload": workload,
                "protocol": protocol,
                "threads": threads,
                "readonly_threads": readonly_threads,
                "hot_count": knobs.hot_count,
                "p_hot": knobs.p_hot,
                "seed": knobs.seed,
                "duration_s": duration_s if duration_s is not None else 0.0,
            }
            row = summarize_run(result, warmup_s if duration_s else 0.0, meta)
            row["state_hash"] = state_hash(setup.storage)
            if record_history and result.history is not None:
                ok, cycle = check_serializable(result.history)
                row["serializable"] = ok
                if not ok:
                    all_violations.append(f"{protocol}: non-serializable history {cycle}")
            rows.append(row)
            all_violations.extend(result.violations)
    return {
        "config": cfg,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "rows": rows,
        "violations": all_violations,
    }


def report_csv(report: dict) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, extrasaction="ignore")
    writer.writeheader()
    for row in report["rows"]:
        writer.writerow(row)
    return out.getvalue()


def write_report(report: dict, json_path: str | None, csv_path: str | None) -> None:
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    if csv_path:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(report_csv(report))


# ---------------------------------------------------------------------------
# Verify driver
# ---------------------------------------------------------------------------


def run_verify(cfg: dict, progress=None) -> dict:
    """Serializability + deadlock-freedom verdicts at small scale.

    Every requested protocol runs with history recording and must produce a
    serializable history; the planned protocol additionally runs with the
    waits-for watchdog enabled and must record no static cycles, CC aborts,
    or violations.
    """
    workload = cfg.get("workload", "store")
    protocols = cfg.get("protocols", list(PROTOCOL_NAMES))
    threads = int(cfg.get("threads", 4))
    duration_s = cfg.get("duration_s", 5.0)
    txn_count = cfg.get("txn_count")
    mix = _mix_from_config(cfg)
    base = cfg.get("knobs", {})
    knobs = ContentionKnobs(
        hot_count=int(base.get("hot_count", 16)),
        p_hot=float(base.get("p_hot", 0.9)),
        seed=int(cfg.get("seed", base.get("seed", 1))),
    )
    dataset = cfg.get("dataset", {"players": 2_000, "listings": 400})

    verdicts = []
    ok_all = True
    for protocol in protocols:
        if protocol not in PROTOCOL_NAMES:
            raise ConfigError(f"unknown protocol {protocol!r}")
        setup = build_setup(workload, knobs, threads, dataset, mix)
        engine = Engine(
            setup.storage,
            setup.runtime,
            protocol,
            analysis=setup.analysis,
            record_history=True,
        )
        if progress:
            progress(f"verifying {protocol}")
        result = engine.run(
            setup.gen_factory,
            threads=threads,
            duration_s=None if txn_count else duration_s,
            txn_count=txn_count,
            watchdog_interval_s=0.25 if protocol == "planned" else None,
        )
        serializable, cycle = check_serializable(result.history)
        checks = {"serializable": serializable, "violations": not result.violations}
        if protocol == "planned":
            checks["no_cc_aborts"] = all(
                r.retries == 0 and r.outcome != "cc_aborted"
                for r in result.records
                if not r.dynamic
            )
        passed = all(checks.values())
        ok_all = ok_all and passed
        verdicts.append(
            {
                "protocol": protocol,
                "passed": passed,
                "checks": checks,
                "committed": sum(1 for r in result.records if r.outcome == "committed"),
                "cycle": cycle,
                "violations": result.violations,
            }
        )
    return {"passed": ok_all, "verdicts": verdicts}
