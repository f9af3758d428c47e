"""Transaction execution engine: five protocols over one lock table/store.

Protocols:

* ``planned``      — executes analyzer plans exactly (lock/op/release events
                     in plan order). Statically planned transactions never
                     deadlock and are never abort victims; templates left
                     dynamic run wound-wait style under the same arbitration.
* ``wound_wait``   — first-use 2PL, older requester wounds younger holder.
* ``bamboo``       — wound-wait base plus early exclusive-lock retirement
                     after a key's statically-last write, with dependency
                     tracking and cascading aborts.
* ``sorted_locks`` — peeked read/write sets locked upfront in global key
                     order; stale peeks are caught under lock and retried.
* ``occ``          — optimistic: versioned reads, buffered writes, backward
                     validation inside a global commit critical section.

Each transaction runs whole on one worker thread; CC aborts retry
immediately on the same worker with the original timestamp.  Per attempt,
lock-wait time is measured inside acquire and compute time is the wall time
minus waits; committed and user-aborted attempts count as useful work,
CC-aborted attempts as wasted.  An optional recorder captures per-key
histories for the serializability checker.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field

from .analyzer import Acquire, AnalysisResult, ExecutionPlan, Op, Release
from .dsl import KeyExpr, OpKind, TemplateOp, TransactionTemplate, Workload
from .locks import (
    ACQUIRE_TIMEOUT_S,
    AcquireResult,
    LockTable,
    TxnClass,
    TxnDescriptor,
    next_timestamp,
    waits_for_cycle,
)
from .slw import LockMode
from .store import Storage, TxnLog

__all__ = [
    "PROTOCOLS",
    "TxnRequest",
    "TxnRecord",
    "RunResult",
    "HistoryEvent",
    "HistoryRecorder",
    "check_serializable",
    "WorkloadRuntime",
    "Engine",
    "EngineViolation",
]

PROTOCOLS = ("planned", "wound_wait", "bamboo", "sorted_locks", "occ")


class EngineViolation(Exception):
    """A run invariant broke (lock timeout, plan/runtime mismatch)."""


class _CCAbort(Exception):
    def __init__(self, reason: str):
        self.reason = reason  # "wound" | "validation" | "cascade" | "timeout"
        super().__init__(reason)


class _UserAbort(Exception):
    pass


# ---------------------------------------------------------------------------
# Requests, records, histories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TxnRequest:
    template: str
    params: dict
    dynamic: bool = False
    path_id: int = 0


@dataclass(slots=True)
class TxnRecord:
    template: str
    outcome: str  # "committed" | "user_aborted" | "cc_aborted"
    reason: str | None  # CC abort reason of the last failed attempt, if any
    retries: int  # CC-aborted attempts before the final one
    abort_reasons: dict  # reason -> CC-aborted attempt count
    start_s: float
    end_s: float
    wait_s: float
    useful_s: float
    wasted_s: float
    worker: int
    dynamic: bool

    @property
    def latency_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True, slots=True)
class HistoryEvent:
    txn_id: int
    table: str
    key: int
    kind: str  # "lock" | "read" | "write" | "release" | "commit" | "abort"
    seq: int


class HistoryRecorder:
    """Per-worker buffers with one global sequence; merge after the run.

    Attempts record into a private list first and flush it into the worker
    buffer only on commit: an aborted attempt's operations are undone and
    must not contribute conflict edges for the transaction id (which may
    commit on a later attempt).
    """

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self._seq = itertools.count()
        self._buffers: list[list[HistoryEvent]] = []
        self._lock = threading.Lock()

    def buffer(self) -> list[HistoryEvent]:
        buf: list[HistoryEvent] = []
        with self._lock:
            self._buffers.append(buf)
        return buf

    def record(self, buf: list[HistoryEvent], txn_id: int, table: str, key: int, kind: str) -> None:
        buf.append(HistoryEvent(txn_id, table, key, kind, next(self._seq)))

    def merged(self) -> list[HistoryEvent]:
        with self._lock:
            events = [e for buf in self._buffers for e in buf]
        events.sort(key=lambda e: e.seq)
        return events


def check_serializable(events: list[HistoryEvent]) -> tuple[bool, list[int] | None]:
    """True iff the committed transactions' conflict graph is acyclic.

    Edges come from consecutive conflicting operations per key (each write
    closes the readers-since-last-write set), which preserves reachability
    of the all-pairs conflict graph.
    """
    committed = {e.txn_id for e in events if e.kind == "commit"}
    per_key: dict[tuple[str, int], list[HistoryEvent]] = {}
    for e in events:
        if e.kind in ("read", "write") and e.txn_id in committed:
            per_key.setdefault((e.table, e.key), []).append(e)
    graph: dict[int, set[int]] = {}

    def edge(a: int, b: int) -> None:
        if a != b:
            graph.setdefault(a, set()).add(b)

    for ops in per_key.values():
        ops.sort(key=lambda e: e.seq)
        last_writer: int | None = None
        readers: set[int] = set()
        for e in ops:
            if e.kind == "write":
                if last_writer is not None:
                    edge(last_writer, e.txn_id)
                for r in readers:
                    edge(r, e.txn_id)
                readers = set()
                last_writer = e.txn_id
            else:
                if last_writer is not None:
                    edge(last_writer, e.txn_id)
                readers.add(e.txn_id)
    cycle = waits_for_cycle(graph)
    return cycle is None, cycle


# ---------------------------------------------------------------------------
# Workload runtime interface
# ---------------------------------------------------------------------------


class WorkloadRuntime:
    """Business semantics bound to a DSL workload.

    Subclasses supply the field layout of each table's value tuple and the
    three business hooks.  The engine handles locking, history, WAL, undo,
    and key resolution; hooks only compute values and run business checks.
    """

    workload: Workload
    row_fields: dict[str, tuple[str, ...]] = {}

    def after_read(self, at: "_Attempt", op: TemplateOp, key: int, value) -> str | None:
        """Business check after a successful read; "user_abort" rejects."""
        return None

    def write_value(self, at: "_Attempt", op: TemplateOp, key: int) -> tuple:
        raise NotImplementedError

    def insert_value(self, at: "_Attempt", op: TemplateOp, key: int) -> tuple:
        raise NotImplementedError


@dataclass(frozen=True)
class _TemplateInfo:
    template: TransactionTemplate
    ops: tuple[TemplateOp, ...]
    exclusive_exprs: frozenset[str]  # canonical key exprs written in the path
    retire_after: dict[int, tuple[KeyExpr, ...]]  # op index -> exprs last-written there


def _template_info(template: TransactionTemplate, path_id: int) -> _TemplateInfo:
    ops = template.paths[path_id].ops
    written = frozenset(op.key.canonical() for op in ops if op.kind.is_write)
    last_write: dict[str, int] = {}
    expr_of: dict[str, KeyExpr] = {}
    for op in ops:
        if op.kind.is_write:
            last_write[op.key.canonical()] = op.index
            expr_of[op.key.canonical()] = op.key
    retire: dict[int, list[KeyExpr]] = {}
    for canon, idx in last_write.items():
        retire.setdefault(idx, []).append(expr_of[canon])
    return _TemplateInfo(
        template=template,
        ops=ops,
        exclusive_exprs=written,
        retire_after={i: tuple(exprs) for i, exprs in retire.items()},
    )


# ---------------------------------------------------------------------------
# Attempt context
# ---------------------------------------------------------------------------


class _Attempt:
    """State of one execution attempt: bindings, held locks, undo, history."""

    def __init__(self, engine: "Engine", txn: TxnDescriptor, req: TxnRequest, hist_buf):
        self.engine = engine
        self.txn = txn
        self.req = req
        self.params = req.params
        self.vars: dict[str, tuple[str, tuple]] = {}
        self.log = TxnLog(txn.txn_id)
        self.held: dict[tuple[str, int], LockMode] = {}
        self.retired: set[tuple[str, int]] = set()
        self.worker_buf = hist_buf
        self.hist: list[HistoryEvent] | None = [] if hist_buf is not None else None
        self.released_any = False

    # -- key resolution -----------------------------------------------------

    def skip_op(self, op: TemplateOp) -> bool:
        loop = op.loop
        return loop is not None and loop.iteration >= len(self.params[loop.param])

    def skip_key(self, key: KeyExpr) -> bool:
        return key.index is not None and key.index >= len(self.params[key.param])

    def resolve(self, key: KeyExpr) -> int | None:
        """Resolve a key expression to a row key; None if not yet bound."""
        if key.param is not None:
            base = self.params[key.param]
            if key.index is not None:
                base = base[key.index]
        else:
            bound = self.vars.get(key.var)
            if bound is None:
                return None
            table, row = bound
            if key.field is None:
                raise EngineViolation(f"row variable {key.var} used without a field")
            fields = self.engine.runtime.row_fields[table]
            return row[fields.index(key.field)]
        if key.field is not None:
            return base[key.field]
        return base

    # -- locking --------------------------------------------------------------

    def lock(self, table: str, key: int, mode: LockMode) -> None:
        held = self.held.get((table, key))
        if held is not None and (held is mode or held is LockMode.EXCLUSIVE):
            return
        res = self.engine.locks.acquire(
            self.txn, (table, key), mode, timeout_s=self.engine.acquire_timeout_s
        )
        if res is AcquireResult.ABORT_SELF:
            raise _CCAbort(self.txn.wound_reason or "wound")
        if res is AcquireResult.TIMEOUT:
            raise _CCAbort("timeout")
        self.held[(table, key)] = mode
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, table, key, "lock")

    def release_keys(self, keys: list[tuple[str, int]]) -> None:
        self.engine.locks.release(self.txn, keys)
        for k in keys:
            self.held.pop(k, None)
            self.retired.discard(k)
            if self.hist is not None:
                self.engine.history.record(self.hist, self.txn.txn_id, k[0], k[1], "release")
        self.released_any = True

    def retire_key(self, table: str, key: int) -> None:
        """Early-release an exclusive lock; later re-locks must re-acquire."""
        slot = (table, key)
        if self.held.get(slot) is LockMode.EXCLUSIVE:
            self.engine.locks.retire(self.txn, slot)
            self.held.pop(slot)
            self.retired.add(slot)

    def release_all_held(self) -> None:
        keys = list(self.held) + [k for k in self.retired if k not in self.held]
        if keys:
            self.engine.locks.release_all(self.txn, keys)
        self.held.clear()
        self.retired.clear()

    def check_wounded(self) -> None:
        if self.txn.wounded:
            raise _CCAbort(self.txn.wound_reason or "wound")

    # -- storage wrappers (called while the row lock is held) -----------------

    def peek(self, table: str, key: int):
        """Current row value for write hooks; the lock is already held."""
        return self.engine.storage.get(table, key)

    def read(self, table: str, key: int):
        value = self.engine.storage.get(table, key)
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, table, key, "read")
        return value

    def write(self, table: str, key: int, value: tuple) -> None:
        self.engine.storage.write(table, key, value, self.log)
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, table, key, "write")

    def insert(self, table: str, key: int, value: tuple) -> None:
        self.engine.storage.insert(table, key, value, self.log)
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, table, key, "write")

    def delete(self, table: str, key: int) -> None:
        self.engine.storage.delete(table, key, self.log)
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, table, key, "write")

    # -- op execution ------------------------------------------------------------

    def run_op(self, op: TemplateOp, key: int) -> None:
        """Execute one template op; raises _UserAbort on business rejection."""
        runtime = self.engine.runtime
        table = op.table.name
        if self.engine.op_cost_s > 0.0:
            # Modeled per-operation work: sleeping releases the GIL, so
            # worker threads overlap the way they would across real cores
            # and locks are held across real time.  Charged to the attempt
            # (useful on commit, wasted on a CC abort) like any other work.
            time.sleep(self.engine.op_cost_s)
        if op.kind is OpKind.READ:
            value = self.read(table, key)
            if value is None:
                if op.may_abort:
                    raise _UserAbort()
                raise EngineViolation(
                    f"{self.req.template} op {op.index}: required row {table}[{key}] missing"
                )
            if op.out_var:
                self.vars[op.out_var] = (table, value)
            if runtime.after_read(self, op, key, value) == "user_abort":
                if not op.may_abort:
                    raise EngineViolation(
                        f"{self.req.template} op {op.index} aborted without may_abort"
                    )
                raise _UserAbort()
        elif op.kind is OpKind.WRITE:
            self.write(table, key, runtime.write_value(self, op, key))
        elif op.kind is OpKind.INSERT:
            self.insert(table, key, runtime.insert_value(self, op, key))
        else:
            self.delete(table, key)

    def finish_commit(self) -> None:
        self.engine.storage.commit(self.log)
        if self.hist is not None:
            self.engine.history.record(self.hist, self.txn.txn_id, "", 0, "commit")
            self.worker_buf.extend(self.hist)
            self.hist = None  # trailing releases are diagnostic only

    def rollback(self) -> None:
        self.engine.storage.abort(self.log)
        if self.hist is not None:
            self.hist = None  # the attempt is erased; drop its events


# ---------------------------------------------------------------------------
# Executors
# ---------------------------------------------------------------------------


class _PlannedExecutor:
    """Follow an ExecutionPlan to the letter; a deliberate 2PL exception."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def attempt(self, at: _Attempt) -> None:
        plan = self.engine.plan_for(at.req)
        open_nodes: list[tuple[list[tuple[str, LockMode, KeyExpr]], list]] = []
        for event in plan.events:
            if isinstance(event, Acquire):
                self._acquire(at, event, open_nodes)
            elif isinstance(event, Op):
                op = plan.ops[event.index]
                if at.skip_op(op):
                    continue
                key = at.resolve(op.key)
                if key is None:
                    raise EngineViolation(
                        f"plan {plan.template} op {op.index}: unresolved key"
                    )
                try:
                    at.run_op(op, key)
                except _UserAbort:
                    if at.released_any:
                        raise EngineViolation(
                            f"plan {plan.template}: user abort after first release"
                        )
                    raise
                self._settle_open_nodes(at, open_nodes)
            elif isinstance(event, Release):
                keys = [k for k in at.held if k[0] in event.tables]
                if keys:
                    at.release_keys(keys)
        at.finish_commit()
        at.release_all_held()  # defensive; plans release everything

    def _acquire(self, at: _Attempt, event: Acquire, open_nodes) -> None:
        members: list[tuple[str, LockMode, KeyExpr]] = []
        for plock in event.locks:
            mode = LockMode.EXCLUSIVE if plock.mode == "X" else LockMode.SHARED
            for keyexpr in plock.keys:
                if not at.skip_key(keyexpr):
                    members.append((plock.table, mode, keyexpr))
        resolved: list[tuple[str, int, LockMode]] = []
        pending: list[tuple[str, LockMode, KeyExpr]] = []
        for table, mode, keyexpr in members:
            key = at.resolve(keyexpr)
            if key is None:
                pending.append((table, mode, keyexpr))
            else:
                resolved.append((table, key, mode))
        latches = []
        if len(members) > 1 or pending:
            # Atomic (combined/multi-row) node: indivisible under the table
            # latch(es); held until the last member when keys resolve later.
            for table in sorted({m[0] for m in members}):
                latch = self.engine.locks.table_latch(table)
                latch.acquire()
                latches.append(latch)
        try:
            for table, key, mode in sorted(set(resolved), key=lambda r: (r[0], r[1])):
                at.lock(table, key, mode)
        except BaseException:
            for latch in latches:
                latch.release()
            raise
        if pending:
            open_nodes.append((pending, latches))
        else:
            for latch in latches:
                latch.release()

    def _settle_open_nodes(self, at: _Attempt, open_nodes) -> None:
        for node in list(open_nodes):
            pending, latches = node
            still: list = []
            try:
                for table, mode, keyexpr in pending:
                    key = at.resolve(keyexpr)
                    if key is None:
                        still.append((table, mode, keyexpr))
                    else:
                        at.lock(table, key, mode)
            except BaseException:
                for latch in latches:
                    latch.release()
                open_nodes.remove(node)
                raise
            if still:
                node[0][:] = still
            else:
                for latch in latches:
                    latch.release()
                open_nodes.remove(node)


class _TwoPhaseExecutor:
    """First-use locking over the raw template (wound-wait; bamboo adds
    retirement and dependency waits on top)."""

    retire = False

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def attempt(self, at: _Attempt) -> None:
        info = self.engine.template_info(at.req.template, at.req.path_id)
        # Retirement points come from the static template; requests flagged
        # dynamic hold every lock to commit instead.
        do_retire = self.retire and not at.req.dynamic
        for op in info.ops:
            if at.skip_op(op):
                continue
            at.check_wounded()
            key = at.resolve(op.key)
            mode = (
                LockMode.EXCLUSIVE
                if op.key.canonical() in info.exclusive_exprs or op.kind.is_write
                else LockMode.SHARED
            )
            at.lock(op.table.name, key, mode)
            at.run_op(op, key)
            if do_retire:
                for keyexpr in info.retire_after.get(op.index, ()):
                    at.retire_key(op.table.name, at.resolve(keyexpr))
        if self.retire:
            self._await_dependencies(at)
        at.finish_commit()
        at.release_keys(sorted({*at.held, *at.retired}))


class _WoundWaitExecutor(_TwoPhaseExecutor):
    retire = False


class _BambooExecutor(_TwoPhaseExecutor):
    retire = True

    def _await_dependencies(self, at: _Attempt) -> None:
        """Commit waits for every retired writer this txn read from."""
        for dep in self.engine.locks.dependencies(at.txn):
            while not dep.wait_done(0.02):
                at.check_wounded()
            if dep.outcome == "aborted":
                raise _CCAbort("cascade")
        at.check_wounded()


class _SortedLocksExecutor:
    """Lock the peeked read/write sets upfront in (table, key) order."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def peek_sets(self, at: _Attempt) -> dict[tuple[str, int], LockMode]:
        """Dry-run the template against unlocked storage to collect keys."""
        info = self.engine.template_info(at.req.template, at.req.path_id)
        vars_: dict[str, tuple[str, tuple]] = {}
        locks: dict[tuple[str, int], LockMode] = {}
        fields = self.engine.runtime.row_fields
        for op in info.ops:
            if at.skip_op(op):
                continue
            key = op.key
            if key.param is not None:
                base = at.params[key.param]
                if key.index is not None:
                    base = base[key.index]
                resolved = base[key.field] if key.field is not None else base
            else:
                bound = vars_.get(key.var)
                if bound is None:
                    continue  # depends on a read that found nothing
                table, row = bound
                resolved = row[fields[table].index(key.field)]
            table = op.table.name
            exclusive = op.kind.is_write or key.canonical() in info.exclusive_exprs
            current = locks.get((table, resolved))
            if exclusive or current is None:
                locks[(table, resolved)] = (
                    LockMode.EXCLUSIVE if exclusive else current or LockMode.SHARED
                )
            if op.kind is OpKind.READ and op.out_var:
                value = self.engine.storage.get(table, resolved)
                if value is not None:
                    vars_[op.out_var] = (table, value)
        return locks

    def attempt(self, at: _Attempt) -> None:
        info = self.engine.template_info(at.req.template, at.req.path_id)
        locked = self.peek_sets(at)
        for (table, key), mode in sorted(locked.items()):
            at.lock(table, key, mode)
        for op in info.ops:
            if at.skip_op(op):
                continue
            key = at.resolve(op.key)
            if (op.table.name, key) not in locked:
                # The peek went stale between reading and locking.
                raise _CCAbort("validation")
            at.run_op(op, key)
        at.finish_commit()
        at.release_keys(list(at.held))


class _OccExecutor:
    """Optimistic: read versions, buffer writes, validate-then-apply."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def attempt(self, at: _Attempt) -> None:
        info = self.engine.template_info(at.req.template, at.req.path_id)
        storage = self.engine.storage
        read_versions: dict[tuple[str, int], int] = {}
        read_cache: dict[tuple[str, int], tuple | None] = {}
        buffer: dict[tuple[str, int], tuple[str, tuple | None]] = {}
        buffer_order: list[tuple[str, int]] = []

        def occ_read(table: str, key: int):
            slot = (table, key)
            if slot in buffer:
                action, value = buffer[slot]
                return None if action == "delete" else value
            if slot in read_cache:
                return read_cache[slot]
            value, version = storage.get_versioned(table, key)
            read_versions[slot] = version
            read_cache[slot] = value
            return value

        def buffered(table: str, key: int, action: str, value):
            slot = (table, key)
            if slot not in buffer:
                buffer_order.append(slot)
            buffer[slot] = (action, value)

        runtime = self.engine.runtime
        # Business hooks peek row state through the read buffer so a txn
        # sees its own pending writes.
        at.peek = occ_read  # type: ignore[method-assign]
        op_cost_s = self.engine.op_cost_s
        for op in info.ops:
            if at.skip_op(op):
                continue
            if op_cost_s > 0.0:
                time.sleep(op_cost_s)  # same modeled per-op work as run_op
            key = at.resolve(op.key)
            table = op.table.name
            if op.kind is OpKind.READ:
                value = occ_read(table, key)
                if value is None:
                    if op.may_abort:
                        raise _UserAbort()
                    raise EngineViolation(
                        f"{at.req.template} op {op.index}: required row missing"
                    )
                if op.out_var:
                    at.vars[op.out_var] = (table, value)
                if runtime.after_read(at, op, key, value) == "user_abort":
                    raise _UserAbort()
            elif op.kind is OpKind.WRITE:
                buffered(table, key, "write", runtime.write_value(at, op, key))
            elif op.kind is OpKind.INSERT:
                buffered(table, key, "insert", runtime.insert_value(at, op, key))
            else:
                buffered(table, key, "delete", None)
        with self.engine.occ_commit_lock:
            for (table, key), version in read_versions.items():
                if storage.version(table, key) != version:
                    raise _CCAbort("validation")
            for (table, key) in buffer_order:
                action, value = buffer[(table, key)]
                if action == "insert" and storage.get(table, key) is not None:
                    raise _CCAbort("validation")
            if at.hist is not None:
                for (table, key) in read_versions:
                    self.engine.history.record(at.hist, at.txn.txn_id, table, key, "read")
            for slot in buffer_order:
                table, key = slot
                action, value = buffer[slot]
                if action == "write":
                    storage.write(table, key, value, at.log)
                elif action == "insert":
                    storage.insert(table, key, value, at.log)
                else:
                    storage.delete(table, key, at.log)
                if at.hist is not None:
                    self.engine.history.record(at.hist, at.txn.txn_id, table, key, "write")
            at.finish_commit()


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    protocol: str
    wall_s: float
    started_perf: float  # perf_counter at run start, for warm-up exclusion
    records: list[TxnRecord]
    readonly_records: list[TxnRecord]
    history: list[HistoryEvent] | None
    violations: list[str]
    lock_counters: dict[str, int]
    max_wait_s: float

    def committed(self) -> int:
        return sum(1 for r in self.records if r.outcome == "committed")

    def throughput(self) -> float:
        return self.committed() / self.wall_s if self.wall_s > 0 else 0.0

    def cc_aborts(self) -> int:
        return sum(r.retries for r in self.records) + sum(
            1 for r in self.records if r.outcome == "cc_aborted"
        )

    def buckets(self) -> dict[str, float]:
        out = {"useful": 0.0, "lock_wait": 0.0, "wasted": 0.0}
        for r in self.records + self.readonly_records:
            out["useful"] += r.useful_s
            out["lock_wait"] += r.wait_s
            out["wasted"] += r.wasted_s
        return out


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class Engine:
    def __init__(
        self,
        storage: Storage,
        runtime: WorkloadRuntime,
        protocol: str,
        analysis: AnalysisResult | None = None,
        record_history: bool = False,
        acquire_timeout_s: float = ACQUIRE_TIMEOUT_S,
        max_cc_retries: int = 1_000_000,
        op_cost_s: float = 0.0,
    ) -> None:
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        if protocol == "planned" and analysis is None:
            raise ValueError("planned protocol requires an analysis result")
        if op_cost_s < 0:
            raise ValueError("op_cost_s must be >= 0")
        self.storage = storage
        self.runtime = runtime
        self.protocol = protocol
        self.analysis = analysis
        self.op_cost_s = float(op_cost_s)
        self.locks = LockTable()
        self.history = HistoryRecorder(enabled=record_history)
        self.acquire_timeout_s = acquire_timeout_s
        self.max_cc_retries = max_cc_retries
        self.occ_commit_lock = threading.Lock()
        self.violations: list[str] = []
        self.watchdog_snapshots = 0
        self._violations_lock = threading.Lock()
        self._txn_ids = itertools.count(1)
        self._plans: dict[tuple[str, int], ExecutionPlan] = {}
        if analysis is not None:
            for plan in analysis.plans:
                self._plans[(plan.template, plan.path_id)] = plan
        self._info_cache: dict[tuple[str, int], _TemplateInfo] = {}
        self._templates = {t.name: t for t in runtime.workload.templates}
        self._executors = {
            "planned": _PlannedExecutor(self),
            "wound_wait": _WoundWaitExecutor(self),
            "bamboo": _BambooExecutor(self),
            "sorted_locks": _SortedLocksExecutor(self),
            "occ": _OccExecutor(self),
        }

    # -- lookups -----------------------------------------------------------

    def plan_for(self, req: TxnRequest) -> ExecutionPlan:
        try:
            return self._plans[(req.template, req.path_id)]
        except KeyError:
            raise EngineViolation(f"no plan for {req.template} path {req.path_id}")

    def template_info(self, name: str, path_id: int) -> _TemplateInfo:
        slot = (name, path_id)
        info = self._info_cache.get(slot)
        if info is None:
            info = _template_info(self._templates[name], path_id)
            self._info_cache[slot] = info
        return info

    def _violation(self, message: str) -> None:
        with self._violations_lock:
            self.violations.append(message)

    # -- single transaction --------------------------------------------------

    def _choose(self, req: TxnRequest) -> tuple[object, TxnClass]:
        if self.protocol == "planned":
            if req.dynamic or (req.template, req.path_id) not in self._plans:
                return self._executors["wound_wait"], TxnClass.DYNAMIC
            return self._executors["planned"], TxnClass.STATIC
        cls = TxnClass.STATIC if self.protocol == "sorted_locks" else TxnClass.DYNAMIC
        return self._executors[self.protocol], cls

    def execute(self, req: TxnRequest, worker: int, hist_buf) -> TxnRecord:
        executor, txn_class = self._choose(req)
        txn = TxnDescriptor(
            txn_id=next(self._txn_ids),
            timestamp=next_timestamp(),
            txn_class=txn_class,
            protocol=self.protocol,
        )
        self.locks.register(txn)
        start = time.perf_counter()
        retries = 0
        wait_total = 0.0
        useful = 0.0
        wasted = 0.0
        outcome = "committed"
        reason: str | None = None
        abort_reasons: dict[str, int] = {}
        try:
            while True:
                attempt_start = time.perf_counter()
                wait_before = txn.lock_wait_s
                at = _Attempt(self, txn, req, hist_buf if self.history.enabled else None)
                try:
                    executor.attempt(at)
                    txn.finish("committed")
                    outcome = "committed"
                except _UserAbort:
                    at.rollback()
                    self._cascade(txn)
                    at.release_all_held()
                    self.locks.clear_dependencies(txn)
                    txn.finish("aborted")
                    outcome = "user_aborted"
                except _CCAbort as abort:
                    at.rollback()
                    self._cascade(txn)
                    at.release_all_held()
                    self.locks.clear_dependencies(txn)
                    reason = abort.reason
                    abort_reasons[abort.reason] = abort_reasons.get(abort.reason, 0) + 1
                    if abort.reason == "timeout":
                        self._violation(
                            f"lock wait timeout: txn {txn.txn_id} ({req.template})"
                        )
                    if txn_class is TxnClass.STATIC and executor is self._executors["planned"]:
                        self._violation(
                            f"planned txn {txn.txn_id} CC-aborted ({abort.reason})"
                        )
                    outcome = "cc_aborted"
                attempt_end = time.perf_counter()
                wait = txn.lock_wait_s - wait_before
                compute = max(0.0, (attempt_end - attempt_start) - wait)
                wait_total += wait
                if outcome == "cc_aborted":
                    wasted += compute
                    if retries >= self.max_cc_retries:
                        break
                    retries += 1
                    txn.clear_for_retry()
                    continue
                useful += compute  # committed and user-aborted work is useful
                break
        finally:
            if txn.outcome is None:
                txn.finish("aborted")
            self.locks.deregister(txn)
        end = time.perf_counter()
        return TxnRecord(
            template=req.template,
            outcome=outcome,
            reason=reason,
            retries=retries,
            abort_reasons=abort_reasons,
            start_s=start,
            end_s=end,
            wait_s=wait_total,
            useful_s=useful,
            wasted_s=wasted,
            worker=worker,
            dynamic=req.dynamic,
        )

    def _cascade(self, txn: TxnDescriptor) -> None:
        """Wound every transaction that read state this txn retired."""
        if self.protocol != "bamboo":
            return
        for reader in self.locks.dependents_of(txn):
            reader.wound(txn.txn_id, reason="cascade")

    # -- worker pool ---------------------------------------------------------

    def run(
        self,
        gen_factory,
        threads: int,
        duration_s: float | None = None,
        txn_count: int | None = None,
        readonly_gen_factory=None,
        readonly_threads: int = 0,
        watchdog_interval_s: float | None = None,
    ) -> RunResult:
        """Run worker threads until the duration elapses or counts are met.

        ``gen_factory(worker_index)`` returns a generator with
        ``next_request() -> TxnRequest`` and ``feedback(request, outcome)``.
        """
        if (duration_s is None) == (txn_count is None):
            raise ValueError("specify exactly one of duration_s or txn_count")
        stop = threading.Event()
        records: list[list[TxnRecord]] = [[] for _ in range(threads + readonly_threads)]
        errors: list[str] = []

        def work(slot: int, worker_idx: int, gen) -> None:
            buf = self.history.buffer() if self.history.enabled else None
            out = records[slot]
            budget = txn_count
            try:
                while not stop.is_set() and (budget is None or budget > 0):
                    req = gen.next_request()
                    rec = self.execute(req, worker_idx, buf)
                    gen.feedback(req, rec.outcome)
                    out.append(rec)
                    if budget is not None:
                        budget -= 1
            except Exception as exc:  # surface worker crashes, don't hang
                errors.append(f"worker {worker_idx}: {exc!r}")
                stop.set()

        # Generators are built before any worker starts so that every one
        # snapshots the same (pre-run) storage state for its pools.
        workers = [
            threading.Thread(target=work, args=(i, i, gen_factory(i)), daemon=True)
            for i in range(threads)
        ]
        workers += [
            threading.Thread(
                target=work,
                args=(threads + i, threads + i, readonly_gen_factory(threads + i)),
                daemon=True,
            )
            for i in range(readonly_threads)
        ]
        run_start = time.perf_counter()
        for t in workers:
            t.start()
        if duration_s is not None:
            deadline = run_start + duration_s
            while time.perf_counter() < deadline and not stop.is_set():
                self._watchdog_pass(watchdog_interval_s)
            stop.set()
        else:
            while any(t.is_alive() for t in workers):
                self._watchdog_pass(watchdog_interval_s)
        for t in workers:
            t.join()
        wall = time.perf_counter() - run_start
        if errors:
            raise EngineViolation("; ".join(errors))
        mix = [r for worker in records[:threads] for r in worker]
        readonly = [r for worker in records[threads:] for r in worker]
        max_wait = max((r.wait_s for r in mix + readonly), default=0.0)
        return RunResult(
            protocol=self.protocol,
            wall_s=wall,
            started_perf=run_start,
            records=mix,
            readonly_records=readonly,
            history=self.history.merged() if self.history.enabled else None,
            violations=list(self.violations),
            lock_counters=self.locks.counters.snapshot(),
            max_wait_s=max_wait,
        )

    def _watchdog_pass(self, interval_s: float | None) -> None:
        if interval_s is None:
            time.sleep(0.01)
            return
        time.sleep(interval_s)
        graph = self.locks.watchdog_snapshot()
        self.watchdog_snapshots += 1
        cycle = waits_for_cycle(graph)
        if cycle is not None:
            classes = self.locks.snapshot_classes()
            if all(classes.get(t) is TxnClass.STATIC for t in cycle):
                self._violation(f"static waits-for cycle: {cycle}")
