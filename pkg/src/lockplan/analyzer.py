"""Plan search: enumerate safe lock orders, tighten releases, emit plans.

The pipeline turns transaction templates into deadlock-free execution plans:

1. ``build_initial_slw_graph`` — locks at first use, unlocks at the end.
2. ``generate_cycle_free`` — enumerate earlier-only reorderings of the
   conflicting lock nodes (per-chain permutations, Cartesian product across
   chains), keep the ones whose lock-wait graph is acyclic.
3. ``greedy_early_lock_release`` — walk each unlock backwards while the
   contention score strictly improves and the chopped graph stays free of
   mixed cycles.
4. ``select_best_graph`` — minimum contention score, deterministic ties.
5. ``extract_plans`` — merge release runs into events and fix the abort
   horizon (user aborts only before the first release).

If no acyclic candidate exists the template involved in the most cycles is
demoted to dynamic execution and the search reruns on the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import permutations, product

from .dsl import KeyExpr, OpKind, TemplateOp, TransactionTemplate, TxnKind
from .chopping import detect_sc_cycle, resolve_self_conflicts
from .slw import (
    Chain,
    Hop,
    HopKind,
    LockMode,
    SlwGraph,
    build_initial_slw_graph,
    detect_slw_cycles,
    is_slw_acyclic,
    template_w_edges,
)

__all__ = [
    "AnalysisError",
    "AnalysisResult",
    "ExecutionPlan",
    "PlanLock",
    "Acquire",
    "Op",
    "Release",
    "analyze",
    "analyze_workload",
    "contention_score",
    "extract_plans",
    "generate_cycle_free",
    "greedy_early_lock_release",
    "parse_plans",
    "plans_text",
    "select_best_graph",
    "serialize_graph",
]

# Hard cap on the per-workload permutation product; the contract bound is
# Π k_i! and the golden workloads sit far below this.
MAX_ENUMERATION = 1_000_000


class AnalysisError(Exception):
    pass


# ---------------------------------------------------------------------------
# Scoring (exact rationals)
# ---------------------------------------------------------------------------


def contention_score(g: SlwGraph, populations: dict[str, int] | None = None) -> Fraction:
    """Sum over chains and lock nodes of (ops held under the lock)/|table|.

    An op counts for a node member when it sits strictly between the lock
    hop and that member's unlock hop.  Adjacent lock/unlock pairs score 0.
    """
    if populations is None:
        populations = {t.name: t.population for t in g.schema.values()}
    total = Fraction(0)
    for chain in g.sorted_chains():
        for i, hop in enumerate(chain.hops):
            if hop.kind is not HopKind.LOCK:
                continue
            for table in hop.lock_tables:
                j = chain.unlock_hop_index(table)
                if j < i:
                    raise AnalysisError(f"{chain.id}: unlock before lock on {table}")
                held = sum(
                    1 for k in range(i + 1, j) if chain.hops[k].kind is HopKind.OP
                )
                total += Fraction(held, populations[table])
    return total


def serialize_graph(g: SlwGraph) -> str:
    """Canonical text: one line per chain, hops space-joined."""
    return "\n".join(
        f"chain {chain.id}: " + " ".join(h.label() for h in chain.hops)
        for chain in g.sorted_chains()
    )


# ---------------------------------------------------------------------------
# Step 2: cycle-free enumeration
# ---------------------------------------------------------------------------


def _movable_tables(g: SlwGraph, cid: str) -> list[str]:
    """Tables whose lock node conflicts with a *different* chain.

    Pure self-instance conflicts are excluded: both instances move in step,
    so reordering such a node can neither create nor remove a cycle.
    """
    movable = set()
    for ca, cb, table in template_w_edges(g):
        if ca == cb:
            continue
        if ca == cid or cb == cid:
            movable.add(table)
    chain = g.chains[cid]
    order = {}
    for hop in chain.hops:
        if hop.kind is HopKind.LOCK:
            for t in hop.lock_tables:
                order[t] = len(order)
    return sorted(movable & set(order), key=order.__getitem__)


def _natural_anchor(chain: Chain, table: str) -> int:
    return min(chain.op_indices_on(table))


def _dependence_floor(chain: Chain, table: str) -> int:
    """Smallest legal anchor: strictly after the producer of the first
    guarded op's key (later members of a multi-row node resolve in-flight)."""
    first = min(chain.op_indices_on(table))
    dep = chain.ops[first].key.depends_on_op
    return 0 if dep is None else dep + 1


def _realize(chain: Chain, sigma: tuple[str, ...]) -> Chain | None:
    """Latest-possible anchors for the movable locks in ``sigma`` order.

    anchor(σ_i) = min(natural anchor, anchor(σ_{i+1})); locks only move
    earlier.  Returns None when a data dependence is violated.
    """
    tables = {op.table.name for op in chain.ops}
    anchors: dict[str, int] = {}
    bound = len(chain.ops)
    for t in reversed(sigma):
        bound = min(_natural_anchor(chain, t), bound)
        if bound < _dependence_floor(chain, t):
            return None
        anchors[t] = bound
    immovable = sorted(tables - set(sigma), key=lambda t: _natural_anchor(chain, t))

    writes = {op.table.name for op in chain.ops if op.kind.is_write}
    out = Chain(chain.id, chain.template, chain.path_id, chain.ops)

    def lock_hop(t: str) -> Hop:
        mode = LockMode.EXCLUSIVE if t in writes else LockMode.SHARED
        return Hop(HopKind.LOCK, entries=((t, mode),))

    for j, op in enumerate(chain.ops):
        for t in immovable:
            if _natural_anchor(chain, t) == j:
                out.hops.append(lock_hop(t))
        for t in sigma:
            if anchors[t] == j:
                out.hops.append(lock_hop(t))
        out.hops.append(Hop(HopKind.OP, op_index=op.index))
    order = sorted(
        tables, key=lambda t: (max(out.op_indices_on(t)), out.lock_hop_index(t))
    )
    for t in order:
        out.hops.append(Hop(HopKind.UNLOCK, tables=(t,)))
    out.check_well_formed()
    return out


def generate_cycle_free(g0: SlwGraph) -> list[SlwGraph]:
    """All acyclic lock orderings reachable by moving conflicting locks
    earlier; deterministic order, deduplicated, each re-verified acyclic."""
    per_chain: list[list[Chain]] = []
    cids = sorted(g0.chains)
    bound = 1
    for cid in cids:
        chain = g0.chains[cid]
        movable = _movable_tables(g0, cid)
        bound *= math.factorial(len(movable))
        if bound > MAX_ENUMERATION:
            raise AnalysisError(
                f"lock-order search space exceeds {MAX_ENUMERATION} candidates"
            )
        variants: dict[str, Chain] = {}
        attempts = 0
        for sigma in permutations(movable):
            attempts += 1
            realized = _realize(chain, sigma)
            if realized is not None:
                variants.setdefault(
                    " ".join(h.label() for h in realized.hops), realized
                )
        assert attempts <= math.factorial(len(movable))
        per_chain.append([variants[k] for k in sorted(variants)])

    out: list[SlwGraph] = []
    for combo in product(*per_chain):
        candidate = SlwGraph({c.id: c.clone() for c in combo}, g0.schema)
        if is_slw_acyclic(candidate):
            out.append(candidate)
    assert len(out) <= bound
    out.sort(key=serialize_graph)
    return out


# ---------------------------------------------------------------------------
# Step 3: greedy early release
# ---------------------------------------------------------------------------


def _greedy(g: SlwGraph) -> tuple[SlwGraph, int]:
    current = g.clone()
    moves = 0
    score = contention_score(current)
    for cid in sorted(current.chains):
        # process unlocks front-to-back so earlier releases settle first
        chain = current.chains[cid]
        unlock_tables = [
            h.tables[0] for h in chain.hops if h.kind is HopKind.UNLOCK
        ]
        for table in unlock_tables:
            while True:
                chain = current.chains[cid]
                pos = chain.unlock_hop_index(table)
                if pos == 0:
                    break
                prev = chain.hops[pos - 1]
                if prev.kind is not HopKind.OP:
                    break  # crossing a lock or unlock cannot improve the score
                op = chain.ops[prev.op_index]
                if op.table.name == table or op.may_abort:
                    break  # own guarded op / abort point must stay covered
                tentative = current.clone()
                tchain = tentative.chains[cid]
                tchain.hops[pos - 1], tchain.hops[pos] = (
                    tchain.hops[pos],
                    tchain.hops[pos - 1],
                )
                tchain.check_well_formed()
                resolved, _, ok = resolve_self_conflicts(tentative)
                if not ok:
                    break
                new_score = contention_score(resolved)
                if not new_score < score:
                    break
                if detect_sc_cycle(resolved):
                    break
                current, score = resolved, new_score
                moves += 1
    return current, moves


def greedy_early_lock_release(g: SlwGraph) -> SlwGraph:
    """Move each unlock earlier while the score strictly drops and the
    chopping stays valid; stop each unlock at its first rejected hop."""
    return _greedy(g)[0]


# ---------------------------------------------------------------------------
# Step 4: selection
# ---------------------------------------------------------------------------


def _moved_unlocks(g: SlwGraph) -> int:
    moved = 0
    for chain in g.sorted_chains():
        for i, hop in enumerate(chain.hops):
            if hop.kind is HopKind.UNLOCK and any(
                h.kind is not HopKind.UNLOCK for h in chain.hops[i + 1 :]
            ):
                moved += 1
    return moved


def select_best_graph(candidates) -> SlwGraph:
    """Minimum score; ties prefer more unlocks moved earlier, then the
    smallest canonical serialization."""
    pool = list(candidates)
    if not pool:
        raise AnalysisError("no candidate graphs")
    return min(
        pool,
        key=lambda g: (contention_score(g), -_moved_unlocks(g), serialize_graph(g)),
    )


# ---------------------------------------------------------------------------
# Step 5: plan extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanLock:
    table: str
    mode: str  # "S" | "X"
    keys: tuple[KeyExpr, ...]


@dataclass(frozen=True)
class Acquire:
    locks: tuple[PlanLock, ...]


@dataclass(frozen=True)
class Op:
    index: int


@dataclass(frozen=True)
class Release:
    tables: tuple[str, ...]


@dataclass(frozen=True)
class ExecutionPlan:
    template: str
    path_id: int
    ops: tuple[TemplateOp, ...]
    events: tuple
    abort_horizon: int  # index of the first Release event

    def subtransaction_count(self) -> int:
        runs = sum(1 for e in self.events if isinstance(e, Release))
        trailing = isinstance(self.events[-1], Release) if self.events else False
        return runs if trailing else runs + 1


def _plan_lock(chain: Chain, hop: Hop) -> tuple[PlanLock, ...]:
    locks = []
    for table, mode in hop.entries:
        keys: list[KeyExpr] = []
        for i in chain.op_indices_on(table):
            k = chain.ops[i].key
            if k not in keys:
                keys.append(k)
        locks.append(PlanLock(table, mode.value, tuple(keys)))
    return tuple(locks)


def extract_plans(g: SlwGraph) -> list[ExecutionPlan]:
    """One plan per chain; consecutive unlock hops merge into one Release."""
    plans = []
    for chain in g.sorted_chains():
        chain.check_well_formed()
        events: list = []
        for hop in chain.hops:
            if hop.kind is HopKind.LOCK:
                events.append(Acquire(_plan_lock(chain, hop)))
            elif hop.kind is HopKind.OP:
                events.append(Op(hop.op_index))
            elif events and isinstance(events[-1], Release):
                events[-1] = Release(events[-1].tables + hop.tables)
            else:
                events.append(Release(hop.tables))
        horizon = next(
            (i for i, e in enumerate(events) if isinstance(e, Release)), len(events)
        )
        for i, e in enumerate(events):
            if isinstance(e, Op) and chain.ops[e.index].may_abort and i > horizon:
                raise AnalysisError(
                    f"{chain.id}: abort point op{e.index} after first release"
                )
        plans.append(
            ExecutionPlan(chain.template, chain.path_id, chain.ops, tuple(events), horizon)
        )
    return plans


# ---------------------------------------------------------------------------
# Plan text round-trip
# ---------------------------------------------------------------------------


def plans_text(plans) -> str:
    lines = ["# execution plans v1"]
    for p in sorted(plans, key=lambda p: (p.template, p.path_id)):
        lines.append(f"plan {p.template} path={p.path_id} abort_horizon={p.abort_horizon}")
        for e in p.events:
            if isinstance(e, Acquire):
                parts = " ".join(
                    f"{l.mode}({l.table})[{'|'.join(k.canonical() for k in l.keys)}]"
                    for l in e.locks
                )
                lines.append(f"  acquire {parts}")
            elif isinstance(e, Op):
                op = p.ops[e.index]
                flags = ""
                if op.commutes:
                    flags += f" commutes={op.commutes}"
                if op.may_abort:
                    flags += " may_abort"
                lines.append(
                    f"  op {e.index} {op.kind.value} {op.table.name}"
                    f"[{op.key.canonical()}]{flags}"
                )
            else:
                lines.append(f"  release {','.join(e.tables)}")
    return "\n".join(lines) + "\n"


def parse_plans(text: str, templates) -> list[ExecutionPlan]:
    """Rebuild plans against their source templates (keys bound by text)."""
    by_name = {t.name: t for t in templates}
    plans: list[ExecutionPlan] = []
    cur = None  # (template, path_id, horizon, events)

    def flush():
        if cur is None:
            return
        tpl, pid, horizon, events = cur
        path = next(p for p in by_name[tpl].paths if p.path_id == pid)
        plans.append(ExecutionPlan(tpl, pid, path.ops, tuple(events), horizon))

    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("plan "):
            flush()
            head = line.split()
            attrs = dict(kv.split("=") for kv in head[2:])
            cur = (head[1], int(attrs["path"]), int(attrs["abort_horizon"]), [])
            continue
        if cur is None:
            raise AnalysisError(f"plan text line {ln}: event before plan header")
        tpl, pid, _, events = cur
        path = next(p for p in by_name[tpl].paths if p.path_id == pid)
        key_by_text = {}
        for op in path.ops:
            key_by_text.setdefault(op.key.canonical(), op.key)
        kind, _, rest = line.partition(" ")
        if kind == "acquire":
            locks = []
            for part in rest.split():
                mode, rest2 = part.split("(", 1)
                table, keys = rest2.split(")[", 1)
                keys = keys[:-1]  # outer bracket only; keys may contain ]
                locks.append(
                    PlanLock(
                        table, mode, tuple(key_by_text[k] for k in keys.split("|"))
                    )
                )
            events.append(Acquire(tuple(locks)))
        elif kind == "op":
            events.append(Op(int(rest.split()[0])))
        elif kind == "release":
            events.append(Release(tuple(rest.split(","))))
        else:
            raise AnalysisError(f"plan text line {ln}: unknown event {kind!r}")
    flush()
    return plans


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class AnalysisResult:
    plans: list[ExecutionPlan]
    graph: SlwGraph | None
    initial_graph: SlwGraph | None
    dynamic_templates: list[str]
    report: dict = field(default_factory=dict)


def analyze(templates, schema) -> AnalysisResult:
    """Run the full pipeline; demote templates to dynamic on dead ends."""
    static = [t for t in templates if t.kind is TxnKind.STATIC]
    dynamic = [t.name for t in templates if t.kind is not TxnKind.STATIC]
    demoted: list[str] = []
    report: dict = {"fallbacks": demoted, "declared_dynamic": list(dynamic)}

    while True:
        if not static:
            report.update(candidates=0, initial_cycles=0)
            return AnalysisResult([], None, None, dynamic + demoted, report)
        g0 = build_initial_slw_graph(static, schema)
        initial_cycles = detect_slw_cycles(g0)
        candidates = generate_cycle_free(g0)
        if candidates:
            break
        counts: dict[str, int] = {t.name: 0 for t in static}
        for cyc in initial_cycles:
            for inst, _tables in cyc.nodes:
                cid = inst.split("@")[0]
                counts[g0.chains[cid].template] += 1
        worst = max(sorted(counts), key=counts.__getitem__)
        demoted.append(worst)
        static = [t for t in static if t.name != worst]

    tightened = []
    greedy_total = 0
    for cand in candidates:
        out, moves = _greedy(cand)
        greedy_total += moves
        tightened.append(out)
    chosen = select_best_graph(tightened)
    plans = extract_plans(chosen)
    score = contention_score(chosen)
    report.update(
        initial_cycles=len(initial_cycles),
        candidates=len(candidates),
        greedy_moves=greedy_total,
        score=str(score),
        score_float=float(score),
        chosen=serialize_graph(chosen),
    )
    return AnalysisResult(plans, chosen, g0, dynamic + demoted, report)


def analyze_workload(workload) -> AnalysisResult:
    return analyze(workload.templates, workload.schema)
