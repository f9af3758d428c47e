"""Chain chopping: sub-transaction slices and mixed-cycle safety.

Releasing a lock before a chain's end splits it into sub-transactions: each
maximal run of hops ending in a release is one slice.  Slices of one chain
are joined by order (s-) edges; slices of different chain instances whose
lock nodes conflict are joined by conflict (c-) edges.  A cycle through at
least one s-edge and at least one c-edge means interleavings exist whose
combined effect matches no serial order, so the planner may only keep a
release point if the slice graph stays free of such mixed cycles.

Detection is exact and near-linear: union the endpoints of every c-edge,
then walk each chain's s-edges in order — an s-edge whose ends are already
connected closes a mixed cycle (pure-s cycles cannot exist because slices
of a chain form a path, and pure-c cycles merge silently beforehand).
"""

from __future__ import annotations

from dataclasses import dataclass

from .slw import Chain, HopKind, SlwGraph, is_slw_acyclic, template_w_edges

__all__ = [
    "Slice",
    "ScGraph",
    "chop_chain",
    "build_sc_graph",
    "has_mixed_cycle",
    "detect_sc_cycles",
    "detect_sc_cycle",
    "resolve_self_conflicts",
    "export_sc_dot",
]


@dataclass(frozen=True)
class Slice:
    """Half-open hop range [start, stop) of one chain; a sub-transaction."""

    chain_id: str
    index: int
    start: int
    stop: int


@dataclass(frozen=True)
class ScGraph:
    """Slices plus both edge kinds.

    ``s_edges`` are ((chain_id, i), (chain_id, i+1)) pairs.  ``c_edges`` are
    ((chain_a, slice_a), (chain_b, slice_b), table) triples at chain level;
    ``chain_a == chain_b`` marks a self-instance conflict, expanded over two
    virtual instances by the detector exactly as in the lock-wait graph.
    """

    slices: dict[str, tuple[Slice, ...]]
    s_edges: tuple[tuple[tuple[str, int], tuple[str, int]], ...]
    c_edges: tuple[tuple[tuple[str, int], tuple[str, int], str], ...]


def chop_chain(chain: Chain) -> list[Slice]:
    """Split at release points: a slice ends with each maximal unlock run."""
    slices: list[Slice] = []
    start = 0
    hops = chain.hops
    i = 0
    while i < len(hops):
        if hops[i].kind is HopKind.UNLOCK:
            while i + 1 < len(hops) and hops[i + 1].kind is HopKind.UNLOCK:
                i += 1
            slices.append(Slice(chain.id, len(slices), start, i + 1))
            start = i + 1
        i += 1
    if start < len(hops):
        slices.append(Slice(chain.id, len(slices), start, len(hops)))
    return slices


def _slice_of(slices: tuple[Slice, ...], hop_index: int) -> int:
    for s in slices:
        if s.start <= hop_index < s.stop:
            return s.index
    raise IndexError(hop_index)


def build_sc_graph(g: SlwGraph) -> ScGraph:
    slices = {cid: tuple(chop_chain(chain)) for cid, chain in g.chains.items()}
    s_edges = tuple(
        ((cid, i), (cid, i + 1))
        for cid in sorted(slices)
        for i in range(len(slices[cid]) - 1)
    )
    c_edges = []
    for ca, cb, table in sorted(template_w_edges(g)):
        sa = _slice_of(slices[ca], g.chains[ca].lock_hop_index(table))
        sb = _slice_of(slices[cb], g.chains[cb].lock_hop_index(table))
        c_edges.append(((ca, sa), (cb, sb), table))
    return ScGraph(slices, s_edges, tuple(c_edges))


# ---------------------------------------------------------------------------
# Mixed-cycle detection
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        parent = self.parent
        root = parent.setdefault(x, x)
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def has_mixed_cycle(s_edges, c_edges) -> bool:
    """True iff some simple cycle mixes s- and c-edges.

    Assumes s-edges form vertex-disjoint paths (slice order), which makes
    the two-pass union-find exact: only an s-edge can close a mixed cycle,
    and every mixed cycle's last processed edge is an s-edge.
    """
    uf = _UnionFind()
    for u, v in c_edges:
        uf.union(u, v)
    return any(not uf.union(u, v) for u, v in s_edges)


def detect_sc_cycles(sc: ScGraph) -> bool:
    """True iff the graph, expanded over two instances, has a mixed cycle."""
    s_edges = [
        ((f"{cid}@{inst}", i), (f"{cid}@{inst}", j))
        for (cid, i), (_, j) in sc.s_edges
        for inst in (0, 1)
    ]
    c_edges = []
    for (ca, sa), (cb, sb), _table in sc.c_edges:
        combos = [(0, 1)] if ca == cb else [(0, 0), (0, 1), (1, 0), (1, 1)]
        for ia, ib in combos:
            u = (f"{ca}@{ia}", sa)
            v = (f"{cb}@{ib}", sb)
            if u != v:
                c_edges.append((u, v))
    return has_mixed_cycle(s_edges, c_edges)


def detect_sc_cycle(g: SlwGraph) -> bool:
    return detect_sc_cycles(build_sc_graph(g))


# ---------------------------------------------------------------------------
# Self-conflict resolution
# ---------------------------------------------------------------------------


def resolve_self_conflicts(g: SlwGraph) -> tuple[SlwGraph, bool, bool]:
    """Hoist self-conflicting lock nodes into each chain's first slice.

    Two running instances of one chain conflict on such a node; if it sits
    in a later slice the instances' first slices can interleave both ways
    around it, a mixed cycle.  Co-locating every self-conflicting node in
    slice 0 leaves the instances only pure-c parallels, which are harmless.

    Returns (graph, changed, ok); ok is False when a node cannot move to
    slice 0 because its key is produced by a later op.
    """
    out = g.clone()
    changed = False
    for cid in sorted(out.chains):
        chain = out.chains[cid]
        self_tables = {t for a, b, t in template_w_edges(out) if a == b == cid}
        if not self_tables:
            continue
        slices = chop_chain(chain)
        if len(slices) == 1:
            continue
        boundary = next(
            i for i, hop in enumerate(chain.hops) if hop.kind is HopKind.UNLOCK
        )
        moved_any = True
        while moved_any:
            moved_any = False
            for table in sorted(self_tables):
                pos = chain.lock_hop_index(table)
                if pos <= boundary and _slice_of(tuple(slices), pos) == 0:
                    continue
                hop = chain.hops[pos]
                floor = max(chain.min_lock_hop(t) for t in hop.lock_tables)
                if floor > boundary:
                    return out, changed, False
                del chain.hops[pos]
                chain.hops.insert(boundary, hop)
                chain.check_well_formed()
                slices = chop_chain(chain)
                boundary = next(
                    i
                    for i, h in enumerate(chain.hops)
                    if h.kind is HopKind.UNLOCK
                )
                changed = moved_any = True
                break
    if changed and not is_slw_acyclic(out):
        return out, changed, False
    return out, changed, True


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def export_sc_dot(g: SlwGraph, title: str = "sc") -> str:
    """Deterministic DOT: slices as boxes, order edges solid, conflicts dashed."""
    sc = build_sc_graph(g)
    lines = [f"digraph {title} {{", "  rankdir=LR;"]

    def node(cid: str, idx: int) -> str:
        return f'"{cid}/s{idx}"'

    for cid in sorted(sc.slices):
        chain = g.chains[cid]
        lines.append(f'  subgraph "cluster_{cid}" {{')
        lines.append(f'    label="{cid}";')
        for s in sc.slices[cid]:
            body = " ".join(h.label() for h in chain.hops[s.start : s.stop])
            lines.append(
                f'    {node(cid, s.index)} [shape=box, label="s{s.index}: {body}"];'
            )
        lines.append("  }")
    for (ca, ia), (cb, ib) in sc.s_edges:
        lines.append(f"  {node(ca, ia)} -> {node(cb, ib)};")
    for (ca, ia), (cb, ib), table in sc.c_edges:
        lines.append(
            f'  {node(ca, ia)} -> {node(cb, ib)} '
            f'[style=dashed, dir=none, label="{table}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
