"""Row-level shared/exclusive lock table with static/dynamic arbitration.

Transactions are either *static* (their whole lock order was fixed ahead of
time, so they can always afford to wait) or *dynamic* (locks discovered in
flight, so waiting may deadlock).  Conflicts are arbitrated by a pure
function of (requester class, holder class, timestamp order):

    static   vs static   -> wait, never abort
    dynamic  vs dynamic  -> requester older: abort holder, else wait
    dynamic  vs static   -> requester older: abort requester, else wait
    static   vs dynamic  -> requester older: abort holder, else wait

With every transaction dynamic this degenerates to classic wound-wait.
Static transactions are never abort victims under any rule.

Wait queues are strict FIFO: on release the queue is drained from the head
while entries stay compatible with the holders (no skipping).  Wounds are
asynchronous — the victim's descriptor is flagged and woken, and the
requester waits until the victim actually releases.  A retirement hook
supports early lock release with dependency tracking for cascading aborts.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .slw import LockMode

__all__ = [
    "TxnClass",
    "Decision",
    "TxnDescriptor",
    "arbitrate",
    "combine_decisions",
    "LockTable",
    "LockError",
    "AcquireResult",
    "waits_for_cycle",
    "next_timestamp",
]

ACQUIRE_TIMEOUT_S = 30.0

# Safety-net poll interval while parked on the waiter event; wakeups are
# explicit, so this only bounds the damage of a missed signal.
_WAIT_TICK_S = 0.5


class TxnClass(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class Decision(Enum):
    """Outcome of one requester/holder conflict."""

    WAIT = "wait"
    ABORT_HOLDER = "abort_holder"
    ABORT_SELF = "abort_self"


def arbitrate(
    req_class: TxnClass,
    req_ts: int,
    holder_class: TxnClass,
    holder_ts: int,
) -> Decision:
    """Arbitrate one conflicting (requester, holder) pair.

    Pure function; ``req_ts < holder_ts`` means the requester is older.
    Two static transactions always wait (their lock orders are mutually
    deadlock-free); a static party in a mixed conflict wins whenever it is
    older, and the dynamic party pays the abort.
    """
    if req_class is TxnClass.STATIC and holder_class is TxnClass.STATIC:
        return Decision.WAIT
    if req_ts >= holder_ts:  # requester younger (or same txn re-entering)
        return Decision.WAIT
    if req_class is TxnClass.DYNAMIC and holder_class is TxnClass.STATIC:
        return Decision.ABORT_SELF
    return Decision.ABORT_HOLDER


def combine_decisions(decisions: list[Decision]) -> Decision:
    """Fold per-holder decisions into one action for the requester.

    Any ABORT_SELF aborts the requester outright; otherwise every
    ABORT_HOLDER victim is wounded and the requester waits for the rest.
    """
    if Decision.ABORT_SELF in decisions:
        return Decision.ABORT_SELF
    if Decision.ABORT_HOLDER in decisions:
        return Decision.ABORT_HOLDER
    return Decision.WAIT


class LockError(Exception):
    """Misuse of the lock table (bad release, bad retire, upgrade by plan)."""


_TS_COUNTER = itertools.count(1)


def next_timestamp() -> int:
    """Globally ordered timestamp, assigned once per transaction."""
    return next(_TS_COUNTER)


@dataclass(eq=False)
class TxnDescriptor:
    """Identity of one transaction attempt stream.

    The timestamp is assigned once, at first dispatch, and survives retries
    so an old transaction keeps winning arbitration until it commits.
    """

    txn_id: int
    timestamp: int
    txn_class: TxnClass
    protocol: str = ""
    wounded: bool = field(default=False)
    wounded_by: int | None = field(default=None)
    wound_reason: str | None = field(default=None)  # "wound" | "cascade"
    outcome: str | None = field(default=None)  # "committed" | "aborted"
    lock_wait_s: float = field(default=0.0)
    _event: threading.Event = field(default_factory=threading.Event, repr=False)
    _done: threading.Event = field(default_factory=threading.Event, repr=False)
    _flag_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def wound(self, by: int, reason: str = "wound") -> None:
        with self._flag_lock:
            if not self.wounded:
                self.wounded = True
                self.wounded_by = by
                self.wound_reason = reason
        self._event.set()

    def finish(self, outcome: str) -> None:
        self.outcome = outcome
        self._done.set()

    def wait_done(self, timeout_s: float | None = None) -> bool:
        return self._done.wait(timeout_s)

    def clear_for_retry(self) -> None:
        """Reset abort state for a retry; the timestamp is preserved."""
        with self._flag_lock:
            self.wounded = False
            self.wounded_by = None
            self.wound_reason = None
        self.outcome = None
        self._event.clear()
        self._done.clear()

    def wake(self) -> None:
        self._event.set()


class AcquireResult(Enum):
    GRANTED = "granted"
    ABORT_SELF = "abort_self"
    TIMEOUT = "timeout"


@dataclass(eq=False)
class _Waiter:
    txn: TxnDescriptor
    mode: LockMode


class _LockEntry:
    """Per-key lock state: holders, retired holders, FIFO wait queue."""

    __slots__ = ("holders", "retired", "queue")

    def __init__(self) -> None:
        self.holders: dict[int, LockMode] = {}
        # Retired writers in retirement order: txn id -> descriptor.
        self.retired: dict[int, TxnDescriptor] = {}
        self.queue: list[_Waiter] = []

    def unused(self) -> bool:
        return not self.holders and not self.retired and not self.queue


def _covers(held: LockMode, wanted: LockMode) -> bool:
    return held is wanted or held is LockMode.EXCLUSIVE


def _compatible(mode: LockMode, holders: dict[int, LockMode], txn_id: int) -> bool:
    for hid, hmode in holders.items():
        if hid == txn_id:
            continue
        if mode is LockMode.EXCLUSIVE or hmode is LockMode.EXCLUSIVE:
            return False
    return True


class Counters:
    """Diagnostic tallies (grants, waits, aborts by rule, retirements)."""

    _FIELDS = ("grants", "waits", "wounds", "self_aborts", "retirements")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.grants = 0
        self.waits = 0
        self.wounds = 0
        self.self_aborts = 0
        self.retirements = 0

    def incr(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {name: getattr(self, name) for name in self._FIELDS}


class LockTable:
    """Striped row-lock table shared by every protocol.

    Keys are ``(table, row_key)`` pairs.  Each stripe serializes state
    changes for the keys hashed onto it; waiting happens outside the stripe
    on the waiter's own event.  ``acquire`` blocks until granted, the
    requester is told to abort itself, or the timeout trips.
    """

    def __init__(self, stripes: int = 256) -> None:
        self._stripes = [threading.Lock() for _ in range(stripes)]
        self._entries: list[dict[tuple, _LockEntry]] = [{} for _ in range(stripes)]
        self._table_latches: dict[str, threading.Lock] = {}
        self._latch_guard = threading.Lock()
        self.counters = Counters()
        # txn id -> descriptor, so holders can be arbitrated and wounded.
        self._txns: dict[int, TxnDescriptor] = {}
        self._txns_lock = threading.Lock()
        # Early release: reader txn id -> retired writers it depends on.
        self._deps: dict[int, set[TxnDescriptor]] = {}
        self._deps_lock = threading.Lock()

    # -- registration --------------------------------------------------------

    def register(self, txn: TxnDescriptor) -> None:
        with self._txns_lock:
            self._txns[txn.txn_id] = txn

    def deregister(self, txn: TxnDescriptor) -> None:
        with self._txns_lock:
            self._txns.pop(txn.txn_id, None)
        with self._deps_lock:
            self._deps.pop(txn.txn_id, None)

    def table_latch(self, table: str) -> threading.Lock:
        """Per-table latch making a combined lock node's batch indivisible."""
        with self._latch_guard:
            latch = self._table_latches.get(table)
            if latch is None:
                latch = self._table_latches[table] = threading.Lock()
            return latch

    # -- internals -------------------------------------------------------------

    def _stripe_of(self, key: tuple) -> int:
        return hash(key) % len(self._stripes)

    def _entry(self, key: tuple) -> _LockEntry:
        bucket = self._entries[self._stripe_of(key)]
        entry = bucket.get(key)
        if entry is None:
            entry = bucket[key] = _LockEntry()
        return entry

    def _peek(self, key: tuple) -> _LockEntry | None:
        return self._entries[self._stripe_of(key)].get(key)

    def _drop_if_unused(self, key: tuple, entry: _LockEntry) -> None:
        if entry.unused():
            self._entries[self._stripe_of(key)].pop(key, None)

    # -- acquire -----------------------------------------------------------------

    def acquire(
        self,
        txn: TxnDescriptor,
        key: tuple,
        mode: LockMode,
        timeout_s: float = ACQUIRE_TIMEOUT_S,
    ) -> AcquireResult:
        """Block until ``txn`` holds ``key`` in ``mode`` (or abort/timeout).

        Wait time is accumulated on ``txn.lock_wait_s``.  A wound arriving
        while queued surfaces as ABORT_SELF and the caller rolls back.
        Re-acquiring a held, covering lock is a no-op grant; a static plan
        asking to upgrade shared->exclusive is a plan bug and raises.
        Arbitration against the current holders runs when the request is
        made and is re-evaluated on every wakeup, even for waiters parked
        behind other queue members, so an older transaction always wounds
        a younger holder that acquired the lock after the request queued.
        """
        stripe = self._stripes[self._stripe_of(key)]
        deadline = time.monotonic() + timeout_s
        waiter: _Waiter | None = None
        counted_wait = False
        while True:
            with stripe:
                entry = self._entry(key)
                held = entry.holders.get(txn.txn_id)
                if held is not None and _covers(held, mode):
                    # Either a duplicate acquisition or a grant that landed
                    # while this thread was parked (counted by _promote).
                    if waiter is None:
                        self.counters.incr("grants")
                    self._drop_if_unused(key, entry)
                    return AcquireResult.GRANTED
                if held is not None and waiter is None:
                    if txn.txn_class is TxnClass.STATIC:
                        raise LockError(
                            f"static plan upgrade on {key}: plans lock "
                            "exclusive-from-start"
                        )
                    # Dynamic upgrade: queue for the stronger mode below.
                if txn.wounded:
                    if waiter is not None and waiter in entry.queue:
                        entry.queue.remove(waiter)
                        self._promote(key, entry)
                    self.counters.incr("self_aborts")
                    return AcquireResult.ABORT_SELF
                if waiter is None:
                    waiter = _Waiter(txn, mode)
                    entry.queue.append(waiter)
                elif waiter not in entry.queue:
                    # Granted and then released out from under this thread
                    # before it woke; the request is still outstanding.
                    entry.queue.append(waiter)
                at_head = entry.queue[0] is waiter
                if (
                    at_head
                    and _compatible(mode, entry.holders, txn.txn_id)
                    and self._arbitrate_retired(txn, entry)
                ):
                    entry.queue.pop(0)
                    entry.holders[txn.txn_id] = mode
                    self._record_retired_deps(txn, entry)
                    self.counters.incr("grants")
                    self._promote(key, entry)
                    return AcquireResult.GRANTED
                # Arbitrate against the current holders: once when the
                # request is made (classic wound-wait wounds at request
                # time) and again on every tick wakeup, whether or not this
                # waiter is at the head of the queue.  The holder set can
                # change while a request is parked behind other waiters, and
                # an old transaction queued at position two must still wound
                # a younger holder that arrived after it; skipping that
                # re-check lets two such pairs deadlock until timeout.  The
                # decision depends only on the (requester, holder) pair, so
                # queue position never changes the verdict, and wounds are
                # idempotent.
                self._arbitrate_retired(txn, entry)
                decisions: list[Decision] = []
                victims: list[TxnDescriptor] = []
                for hid, hmode in entry.holders.items():
                    if hid == txn.txn_id:
                        continue
                    if mode is not LockMode.EXCLUSIVE and hmode is not LockMode.EXCLUSIVE:
                        continue
                    holder = self._txns.get(hid)
                    if holder is None:
                        continue
                    decision = arbitrate(
                        txn.txn_class,
                        txn.timestamp,
                        holder.txn_class,
                        holder.timestamp,
                    )
                    decisions.append(decision)
                    if decision is Decision.ABORT_HOLDER and not holder.wounded:
                        victims.append(holder)
                if combine_decisions(decisions) is Decision.ABORT_SELF:
                    entry.queue.remove(waiter)
                    self._promote(key, entry)
                    self.counters.incr("self_aborts")
                    return AcquireResult.ABORT_SELF
                for victim in victims:
                    victim.wound(txn.txn_id)
                    self.counters.incr("wounds")
                txn._event.clear()
                if not counted_wait:
                    counted_wait = True
                    self.counters.incr("waits")
            started = time.monotonic()
            remaining = deadline - started
            if remaining <= 0:
                break
            txn._event.wait(min(remaining, _WAIT_TICK_S))
            txn.lock_wait_s += time.monotonic() - started
        # Timed out: withdraw from the queue (unless granted by a racing
        # release at the last instant).
        with stripe:
            entry = self._peek(key)
            if entry is not None:
                held = entry.holders.get(txn.txn_id)
                if held is not None and _covers(held, mode):
                    if waiter in entry.queue:
                        entry.queue.remove(waiter)
                    return AcquireResult.GRANTED
                if waiter in entry.queue:
                    entry.queue.remove(waiter)
                    self._promote(key, entry)
        return AcquireResult.TIMEOUT

    def _record_retired_deps(self, txn: TxnDescriptor, entry: _LockEntry) -> None:
        if not entry.retired:
            return
        with self._deps_lock:
            deps = self._deps.setdefault(txn.txn_id, set())
            for holder in entry.retired.values():
                if holder.txn_id != txn.txn_id:
                    deps.add(holder)

    def _arbitrate_retired(self, txn: TxnDescriptor, entry: _LockEntry) -> bool:
        """Wound-wait over the retired writers of a key.

        Acquiring over a retired (early-released) write creates a commit
        dependency on that writer.  Dependencies must only point from
        younger readers to older writers, otherwise two transactions could
        commit-wait on each other forever; so an older requester wounds
        younger retired writers and waits for their rollback.  Returns True
        when every retired writer is older than the requester.
        """
        ok = True
        for holder in entry.retired.values():
            if holder.txn_id == txn.txn_id:
                continue
            if holder.timestamp > txn.timestamp:
                ok = False
                if not holder.wounded:
                    holder.wound(txn.txn_id)
                    self.counters.incr("wounds")
        return ok

    def _promote(self, key: tuple, entry: _LockEntry) -> None:
        """Grant from the queue head while compatible (strict FIFO).

        Called with the stripe held.  A head whose grant needs arbitration
        is only woken — it re-evaluates in its own acquire loop.
        """
        woke_head = False
        while entry.queue:
            head = entry.queue[0]
            if _compatible(head.mode, entry.holders, head.txn.txn_id) and self._arbitrate_retired(
                head.txn, entry
            ):
                entry.queue.pop(0)
                entry.holders[head.txn.txn_id] = head.mode
                self._record_retired_deps(head.txn, entry)
                self.counters.incr("grants")
                head.txn.wake()
                continue
            if not woke_head:
                head.txn.wake()
                woke_head = True
            break
        self._drop_if_unused(key, entry)

    # -- release / retire ------------------------------------------------------

    def release(self, txn: TxnDescriptor, keys) -> None:
        """Release held (or retired) locks; promote FIFO queue heads."""
        for key in keys:
            stripe = self._stripes[self._stripe_of(key)]
            with stripe:
                entry = self._peek(key)
                if entry is None:
                    raise LockError(f"release of non-held key {key}")
                held = entry.holders.pop(txn.txn_id, None)
                retired = entry.retired.pop(txn.txn_id, None)
                if held is None and retired is None:
                    raise LockError(f"release of non-held key {key}")
                self._promote(key, entry)

    def release_all(self, txn: TxnDescriptor, keys) -> None:
        """Best-effort release for abort paths; ignores non-held keys."""
        for key in keys:
            stripe = self._stripes[self._stripe_of(key)]
            with stripe:
                entry = self._peek(key)
                if entry is None:
                    continue
                entry.holders.pop(txn.txn_id, None)
                entry.retired.pop(txn.txn_id, None)
                self._promote(key, entry)

    def retire(self, txn: TxnDescriptor, key: tuple) -> None:
        """Move an exclusive hold to the retired list (early lock release).

        The next waiters may acquire immediately; each later acquirer
        records a dependency on every retired writer so an upstream abort
        can cascade.
        """
        stripe = self._stripes[self._stripe_of(key)]
        with stripe:
            entry = self._peek(key)
            held = None if entry is None else entry.holders.get(txn.txn_id)
            if held is None:
                raise LockError(f"retire of non-held key {key}")
            if held is not LockMode.EXCLUSIVE:
                raise LockError(f"retire of shared lock on {key}")
            del entry.holders[txn.txn_id]
            entry.retired[txn.txn_id] = txn
            self.counters.incr("retirements")
            self._promote(key, entry)

    # -- dependencies (early lock release) --------------------------------------

    def dependencies(self, txn: TxnDescriptor) -> set[TxnDescriptor]:
        """Retired writers whose dirty state ``txn`` has observed."""
        with self._deps_lock:
            return set(self._deps.get(txn.txn_id, ()))

    def clear_dependencies(self, txn: TxnDescriptor) -> None:
        """Drop dependency edges after an attempt rolls back; a retry reads
        fresh state and must not inherit the old attempt's edges."""
        with self._deps_lock:
            self._deps.pop(txn.txn_id, None)

    def dependents_of(self, txn: TxnDescriptor) -> list[TxnDescriptor]:
        """Transactions that observed state ``txn`` retired (cascade set)."""
        out = []
        with self._deps_lock:
            for reader_id, writers in self._deps.items():
                if txn in writers:
                    reader = self._txns.get(reader_id)
                    if reader is not None:
                        out.append(reader)
        return out

    # -- diagnostics -------------------------------------------------------------

    def watchdog_snapshot(self) -> dict[int, set[int]]:
        """Consistent waits-for graph: waiter txn id -> blocker txn ids.

        FIFO order is itself a wait dependency, so a queued transaction
        blocks on the holders and on every waiter ahead of it.  All stripes
        are held during the scan so the graph is an exact instant of the
        lock state (workers stall on their stripe for the duration).
        """
        graph: dict[int, set[int]] = {}
        for stripe in self._stripes:
            stripe.acquire()
        try:
            for bucket in self._entries:
                for entry in bucket.values():
                    if not entry.queue:
                        continue
                    blockers = set(entry.holders)
                    for waiter in entry.queue:
                        mine = blockers - {waiter.txn.txn_id}
                        if mine:
                            graph.setdefault(waiter.txn.txn_id, set()).update(mine)
                        blockers.add(waiter.txn.txn_id)
        finally:
            for stripe in self._stripes:
                stripe.release()
        return graph

    def snapshot_classes(self) -> dict[int, TxnClass]:
        with self._txns_lock:
            return {tid: txn.txn_class for tid, txn in self._txns.items()}


def waits_for_cycle(graph: dict[int, set[int]]) -> list[int] | None:
    """Return one cycle from a waits-for snapshot as a node list, or None."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in graph}
    for n in graph:
        for m in graph[n]:
            color.setdefault(m, WHITE)
    parent: dict[int, int] = {}
    for root in sorted(color):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(sorted(graph.get(root, ()))))]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == WHITE:
                    color[nxt] = GREY
                    parent[nxt] = node
                    stack.append((nxt, iter(sorted(graph.get(nxt, ())))))
                    advanced = True
                    break
                if color[nxt] == GREY:
                    path = [node]
                    cur = node
                    while cur != nxt:
                        cur = parent[cur]
                        path.append(cur)
                    path.reverse()
                    return path
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None
