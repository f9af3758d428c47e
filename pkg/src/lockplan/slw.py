"""Lock/operation/unlock chain graphs and deadlock-cycle detection.

Each static template path becomes a chain of hops:

    lock ... op ... unlock        (s-edges = chain order, implicit in the list)

with one lock node per (chain, table) — a chain that both reads and writes a
table gets a single exclusive lock for it (the read-write constraint, which
removes upgrade deadlocks).  Undirected wait edges (w-edges) connect lock
nodes of different chains on the same table when at least one pair of their
operations conflicts and not every conflicting pair shares a commutative
group.

Self-conflicts are modeled by a second instance of every chain.  The graph
stores one chain per (template, path); detectors expand the second instance
internally with identical hop positions, which keeps the two instances in
lockstep under every transformation by construction.

A deadlock-risk cycle is a directed cycle alternating w-edges with nonempty
forward intra-chain paths (no two w-edges adjacent).  Detection builds the
composite relation  u -> v  iff some w-edge {u, m} has m strictly before v in
v's chain; directed cycles of that relation are exactly the alternating
cycles.  If none exist, concurrent execution of the chains under two-phase
locking can never build a circular wait.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .dsl import OpKind, TableRef, TemplateOp, TransactionTemplate, TxnKind


class LockMode(Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


class HopKind(Enum):
    LOCK = "lock"
    OP = "op"
    UNLOCK = "unlock"


@dataclass(frozen=True)
class Hop:
    """One chain element.

    LOCK hops carry (table, mode) member entries — usually one, more after
    combine_locks.  UNLOCK hops carry the released tables.  OP hops carry the
    index into the chain's template ops.
    """

    kind: HopKind
    entries: tuple[tuple[str, LockMode], ...] = ()
    tables: tuple[str, ...] = ()
    op_index: int | None = None

    @property
    def lock_tables(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.entries)

    def label(self) -> str:
        if self.kind is HopKind.LOCK:
            return "+".join(f"{m.value}L({t})" for t, m in self.entries)
        if self.kind is HopKind.UNLOCK:
            return f"U({','.join(self.tables)})"
        return f"op{self.op_index}"


@dataclass
class Chain:
    id: str
    template: str
    path_id: int
    ops: tuple[TemplateOp, ...]
    hops: list[Hop] = field(default_factory=list)

    def clone(self) -> "Chain":
        return Chain(self.id, self.template, self.path_id, self.ops, list(self.hops))

    # -- structural helpers -------------------------------------------------

    def lock_hop_index(self, table: str) -> int:
        for i, hop in enumerate(self.hops):
            if hop.kind is HopKind.LOCK and table in hop.lock_tables:
                return i
        raise KeyError(f"{self.id}: no lock on {table}")

    def unlock_hop_index(self, table: str) -> int:
        for i, hop in enumerate(self.hops):
            if hop.kind is HopKind.UNLOCK and table in hop.tables:
                return i
        raise KeyError(f"{self.id}: no unlock on {table}")

    def op_indices_on(self, table: str) -> list[int]:
        return [op.index for op in self.ops if op.table.name == table]

    def guarded_hop_positions(self, table: str) -> list[int]:
        wanted = set(self.op_indices_on(table))
        return [
            i
            for i, hop in enumerate(self.hops)
            if hop.kind is HopKind.OP and hop.op_index in wanted
        ]

    def min_lock_hop(self, table: str) -> int:
        """Earliest legal hop index for the lock on ``table``.

        The lock node may not start before the op producing the key of its
        first guarded op; later members of a multi-row node are acquired
        in-flight and do not constrain the node position.
        """
        first = min(self.op_indices_on(table))
        dep = self.ops[first].key.depends_on_op
        if dep is None:
            return 0
        dep_hop = next(
            i
            for i, hop in enumerate(self.hops)
            if hop.kind is HopKind.OP and hop.op_index == dep
        )
        return dep_hop + 1

    def check_well_formed(self) -> None:
        """Every op between its table's lock and unlock; 2PL per lock."""
        for table in {op.table.name for op in self.ops}:
            li = self.lock_hop_index(table)
            ui = self.unlock_hop_index(table)
            if not li < ui:
                raise ValueError(f"{self.id}: lock/unlock order broken for {table}")
            for gi in self.guarded_hop_positions(table):
                if not li < gi < ui:
                    raise ValueError(f"{self.id}: op outside lock scope on {table}")


@dataclass
class SlwGraph:
    chains: dict[str, Chain]
    schema: dict[str, TableRef]

    def clone(self) -> "SlwGraph":
        return SlwGraph({cid: c.clone() for cid, c in self.chains.items()}, self.schema)

    def sorted_chains(self) -> list[Chain]:
        return [self.chains[cid] for cid in sorted(self.chains)]


@dataclass(frozen=True)
class SlwCycle:
    """An alternating cycle, as the tuple of w-edge departure lock nodes."""

    nodes: tuple[tuple[str, tuple[str, ...]], ...]

    def key(self) -> tuple:
        k = self.nodes.index(min(self.nodes))
        return self.nodes[k:] + self.nodes[:k]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build_initial_slw_graph(
    templates: list[TransactionTemplate], schema: dict[str, TableRef]
) -> SlwGraph:
    """Locks at first use (read-write constraint applied), unlocks at end.

    Unlock order at the chain end is ascending by (last guarded op, lock
    position): locks whose work finishes earliest are released first once
    the release points start moving.
    """
    chains: dict[str, Chain] = {}
    for template in templates:
        if template.kind is not TxnKind.STATIC:
            raise ValueError(f"dynamic template {template.name} cannot be analyzed")
        for path in template.paths:
            cid = f"{template.name}#{path.path_id}"
            chain = Chain(cid, template.name, path.path_id, path.ops)
            writes = {op.table.name for op in path.ops if op.kind.is_write}
            seen: set[str] = set()
            for op in path.ops:
                t = op.table.name
                if t not in seen:
                    seen.add(t)
                    mode = LockMode.EXCLUSIVE if t in writes else LockMode.SHARED
                    chain.hops.append(Hop(HopKind.LOCK, entries=((t, mode),)))
                chain.hops.append(Hop(HopKind.OP, op_index=op.index))
            order = sorted(
                seen,
                key=lambda t: (max(chain.op_indices_on(t)), chain.lock_hop_index(t)),
            )
            for t in order:
                chain.hops.append(Hop(HopKind.UNLOCK, tables=(t,)))
            chain.check_well_formed()
            chains[cid] = chain
    return SlwGraph(chains, dict(schema))


# ---------------------------------------------------------------------------
# Conflict (w-) edges
# ---------------------------------------------------------------------------


def _ops_conflict(a: TemplateOp, b: TemplateOp) -> bool:
    if not (a.kind.is_write or b.kind.is_write):
        return False
    if a.commutes is not None and a.commutes == b.commutes:
        return False
    return True


def chains_conflict_on(a: Chain, b: Chain, table: str) -> bool:
    """True iff some op pair on ``table`` conflicts under the commutes rule."""
    ops_a = [a.ops[i] for i in a.op_indices_on(table)]
    ops_b = [b.ops[i] for i in b.op_indices_on(table)]
    return any(_ops_conflict(x, y) for x in ops_a for y in ops_b)


def template_w_edges(g: SlwGraph) -> set[tuple[str, str, str]]:
    """Chain-level conflict edges as sorted (chain_a, chain_b, table) triples.

    ``chain_a == chain_b`` marks a self-instance edge.  The detectors expand
    these over the two virtual instances of each chain.
    """
    edges: set[tuple[str, str, str]] = set()
    chains = g.sorted_chains()
    for i, a in enumerate(chains):
        for b in chains[i:]:
            shared = {op.table.name for op in a.ops} & {op.table.name for op in b.ops}
            for t in sorted(shared):
                if chains_conflict_on(a, b, t):
                    edges.add((a.id, b.id, t))
    return edges


# ---------------------------------------------------------------------------
# Alternating-cycle detection (generic core + graph adapter)
# ---------------------------------------------------------------------------


def composite_successors(chains: dict, w_edges) -> dict:
    """u -> {v}: one w-edge {u, m} then a nonempty forward path m => v."""
    chain_of = {}
    pos_of = {}
    for cid, nodes in chains.items():
        for idx, node in enumerate(nodes):
            chain_of[node] = cid
            pos_of[node] = idx
    neighbors: dict = {node: [] for node in chain_of}
    for edge in w_edges:
        u, v = tuple(edge)
        neighbors[u].append(v)
        neighbors[v].append(u)
    succ: dict = {node: set() for node in chain_of}
    for u in chain_of:
        for m in neighbors[u]:
            succ[u].update(chains[chain_of[m]][pos_of[m] + 1 :])
    return succ


def has_alternating_cycle(chains: dict, w_edges) -> bool:
    succ = composite_successors(chains, w_edges)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = dict.fromkeys(succ, WHITE)
    for root in succ:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(sorted(succ[root])))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    return True
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(sorted(succ[nxt]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return False


def find_alternating_cycles(chains: dict, w_edges) -> set[tuple]:
    """All simple directed cycles of the composite relation, canonicalized.

    Each cycle is the rotation-minimal tuple of w-edge departure nodes.
    """
    succ = composite_successors(chains, w_edges)
    cycles: set[tuple] = set()

    def dfs(start, current, path, visited):
        for nxt in sorted(succ[current]):
            if nxt == start:
                k = path.index(min(path))
                cycles.add(tuple(path[k:] + path[:k]))
            elif nxt not in visited and nxt > start:
                visited.add(nxt)
                path.append(nxt)
                dfs(start, nxt, path, visited)
                path.pop()
                visited.remove(nxt)

    for start in sorted(succ):
        dfs(start, start, [start], {start})
    return cycles


def _expanded_view(g: SlwGraph):
    """Two instances per chain; nodes are (instance, lock tables) pairs."""
    chains: dict[str, list] = {}
    for cid, chain in g.chains.items():
        locks = [hop.lock_tables for hop in chain.hops if hop.kind is HopKind.LOCK]
        for inst in (0, 1):
            chains[f"{cid}@{inst}"] = [(f"{cid}@{inst}", tables) for tables in locks]
    edges = set()
    for ca, cb, table in template_w_edges(g):
        node_a = g.chains[ca].hops[g.chains[ca].lock_hop_index(table)].lock_tables
        node_b = g.chains[cb].hops[g.chains[cb].lock_hop_index(table)].lock_tables
        if ca == cb and node_a == node_b:
            combos = [(0, 1)]
        else:
            combos = [(0, 0), (0, 1), (1, 0), (1, 1)]
        for ia, ib in combos:
            u = (f"{ca}@{ia}", node_a)
            v = (f"{cb}@{ib}", node_b)
            if u != v:
                edges.add(frozenset((u, v)))
    return chains, edges


def detect_slw_cycles(g: SlwGraph) -> list[SlwCycle]:
    """Every minimal alternating cycle (up to rotation); empty iff safe."""
    chains, edges = _expanded_view(g)
    return sorted(
        (SlwCycle(c) for c in find_alternating_cycles(chains, edges)),
        key=lambda c: c.key(),
    )


def is_slw_acyclic(g: SlwGraph) -> bool:
    chains, edges = _expanded_view(g)
    return not has_alternating_cycle(chains, edges)


# ---------------------------------------------------------------------------
# Lock combination (atomic multi-table nodes)
# ---------------------------------------------------------------------------


def combine_locks(g: SlwGraph, chain_id: str, tables: set[str]) -> SlwGraph:
    """Merge a chain's lock nodes on ``tables`` into one atomic node.

    The merged node sits at the earliest member's position; all conflict
    edges incident to members become incident to it.  Unlock nodes are left
    as they were (a combined acquisition may still release per table).
    """
    if chain_id not in g.chains:
        raise KeyError(chain_id)
    out = g.clone()
    chain = out.chains[chain_id]
    members = [
        (i, hop)
        for i, hop in enumerate(chain.hops)
        if hop.kind is HopKind.LOCK and set(hop.lock_tables) & tables
    ]
    covered = {t for _, hop in members for t in hop.lock_tables}
    if covered != tables:
        raise ValueError(f"{chain_id} has no locks on {sorted(tables - covered)}")
    if len(members) <= 1:
        return out
    entries = tuple(e for _, hop in members for e in hop.entries)
    first = members[0][0]
    for i, _ in reversed(members[1:]):
        del chain.hops[i]
    chain.hops[first] = Hop(HopKind.LOCK, entries=entries)
    chain.check_well_formed()
    return out


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def export_slw_dot(g: SlwGraph, title: str = "slw") -> str:
    """Deterministic DOT rendering: locks as boxes, ops as ellipses, unlocks
    as diamonds; chain order solid, conflict edges dashed (self-instance
    conflicts drawn as dashed self-loops)."""
    lines = [f"digraph {title} {{", "  rankdir=LR;"]
    node_name: dict[tuple[str, int], str] = {}
    for chain in g.sorted_chains():
        lines.append(f'  subgraph "cluster_{chain.id}" {{')
        lines.append(f'    label="{chain.id}";')
        for i, hop in enumerate(chain.hops):
            name = f'"{chain.id}/{i}"'
            node_name[(chain.id, i)] = name
            if hop.kind is HopKind.LOCK:
                shape, label = "box", hop.label()
            elif hop.kind is HopKind.UNLOCK:
                shape, label = "diamond", hop.label()
            else:
                op = chain.ops[hop.op_index]
                shape = "ellipse"
                label = f"{op.kind.value[:1].upper()}({op.table.name})"
            lines.append(f"    {name} [shape={shape}, label=\"{label}\"];")
        for i in range(len(chain.hops) - 1):
            lines.append(f"    {node_name[(chain.id, i)]} -> {node_name[(chain.id, i + 1)]};")
        lines.append("  }")
    for ca, cb, table in sorted(template_w_edges(g)):
        ia = g.chains[ca].lock_hop_index(table)
        ib = g.chains[cb].lock_hop_index(table)
        style = f'[style=dashed, dir=none, label="{table}"]'
        lines.append(f"  {node_name[(ca, ia)]} -> {node_name[(cb, ib)]} {style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
