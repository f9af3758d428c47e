"""Static lock-wait graph construction and alternating-cycle detection."""

import random

import pytest

from lockplan.dsl import parse_workload
from lockplan.slw import (
    HopKind,
    LockMode,
    build_initial_slw_graph,
    combine_locks,
    composite_successors,
    detect_slw_cycles,
    export_slw_dot,
    find_alternating_cycles,
    has_alternating_cycle,
    is_slw_acyclic,
    template_w_edges,
)

from oracles import alternating_cycles_bruteforce, random_lock_graph


def graph_of(text):
    wl = parse_workload(text)
    return build_initial_slw_graph(wl.templates, wl.schema)


OPPOSED_WRITERS = """
Table A population=10
Table B population=10

Transaction T1(x):
    Write(A, x)
    Write(B, x)

Transaction T2(x):
    Write(B, x)
    Write(A, x)
"""


def hop_labels(chain):
    return [h.label() for h in chain.hops]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def test_initial_chain_shape():
    g = graph_of(OPPOSED_WRITERS)
    assert sorted(g.chains) == ["T1#0", "T2#0"]
    assert hop_labels(g.chains["T1#0"]) == [
        "XL(A)", "op0", "XL(B)", "op1", "U(A)", "U(B)",
    ]
    assert hop_labels(g.chains["T2#0"]) == [
        "XL(B)", "op0", "XL(A)", "op1", "U(B)", "U(A)",
    ]


def test_read_then_write_takes_one_exclusive_lock():
    g = graph_of(
        """
Table A population=10

Transaction T(x):
    v = Read(A, x)
    Write(A, x)
"""
    )
    chain = g.chains["T#0"]
    locks = [h for h in chain.hops if h.kind is HopKind.LOCK]
    assert len(locks) == 1
    assert locks[0].entries == (("A", LockMode.EXCLUSIVE),)


def test_read_only_template_takes_shared_locks():
    g = graph_of(
        """
Table A population=10
Table B population=10

Transaction T(x):
    Read(A, x)
    Read(B, x)
"""
    )
    modes = {
        t: m
        for h in g.chains["T#0"].hops
        if h.kind is HopKind.LOCK
        for t, m in h.entries
    }
    assert modes == {"A": LockMode.SHARED, "B": LockMode.SHARED}


def test_initial_unlock_order_follows_last_use():
    g = graph_of(
        """
Table A population=10
Table B population=10

Transaction T(x):
    Read(B, x)
    Write(A, x)
"""
    )
    labels = hop_labels(g.chains["T#0"])
    assert labels == ["SL(B)", "op0", "XL(A)", "op1", "U(B)", "U(A)"]


def test_dynamic_template_rejected():
    text = """
Table A population=10

Transaction T(x) dynamic:
    Write(A, x)
"""
    wl = parse_workload(text)
    with pytest.raises(ValueError, match="dynamic"):
        build_initial_slw_graph(wl.templates, wl.schema)


# ---------------------------------------------------------------------------
# Conflict edges
# ---------------------------------------------------------------------------


def test_w_edges_of_opposed_writers():
    g = graph_of(OPPOSED_WRITERS)
    cross = {e for e in template_w_edges(g) if e[0] != e[1]}
    assert cross == {("T1#0", "T2#0", "A"), ("T1#0", "T2#0", "B")}
    selfs = {e for e in template_w_edges(g) if e[0] == e[1]}
    assert selfs == {
        ("T1#0", "T1#0", "A"),
        ("T1#0", "T1#0", "B"),
        ("T2#0", "T2#0", "A"),
        ("T2#0", "T2#0", "B"),
    }


def test_shared_shared_has_no_edge():
    g = graph_of(
        """
Table A population=10

Transaction T1(x):
    Read(A, x)

Transaction T2(x):
    Read(A, x)
"""
    )
    assert template_w_edges(g) == set()


def test_commuting_writes_have_no_edge():
    common = """
Table A population=10

Transaction T1(x):
    Write(A, x) commutes={a}

Transaction T2(x):
    Write(A, x) commutes={b}
"""
    same = graph_of(common.format(a="incr", b="incr"))
    assert template_w_edges(same) == set()
    mixed = graph_of(common.format(a="incr", b="decr"))
    assert ("T1#0", "T2#0", "A") in template_w_edges(mixed)


# ---------------------------------------------------------------------------
# Cycle detection on the worked examples
# ---------------------------------------------------------------------------


def test_opposed_writers_cycle_detected():
    g = graph_of(OPPOSED_WRITERS)
    assert not is_slw_acyclic(g)
    cycles = detect_slw_cycles(g)
    assert cycles
    projected = {
        tuple(sorted((inst.split("@")[0], tables) for inst, tables in c.nodes))
        for c in cycles
    }
    # Exactly two shapes survive: the classic two-node cycle (each instance
    # waits on the table the other holds) and its four-node variant threading
    # both virtual instances of each template.
    assert projected == {
        (("T1#0", ("B",)), ("T2#0", ("A",))),
        (
            ("T1#0", ("B",)),
            ("T1#0", ("B",)),
            ("T2#0", ("A",)),
            ("T2#0", ("A",)),
        ),
    }


def test_consistent_lock_order_is_acyclic():
    # T2 reads A before writing it, so the read-write constraint hoists its
    # exclusive A lock to the front: both templates lock A before B.
    g = graph_of(
        """
Table A population=10
Table B population=10

Transaction T1(x):
    Write(A, x)
    Write(B, x)

Transaction T2(x):
    v = Read(A, x)
    Write(B, x)
    Write(A, x)
"""
    )
    assert is_slw_acyclic(g)
    assert detect_slw_cycles(g) == []


def test_single_template_self_conflict_is_acyclic():
    # Both virtual instances order their locks identically, so self
    # conflicts alone can never produce an alternating cycle.
    g = graph_of(
        """
Table A population=10
Table B population=10

Transaction T(x):
    Write(A, x)
    Write(B, x)
"""
    )
    assert template_w_edges(g) == {("T#0", "T#0", "A"), ("T#0", "T#0", "B")}
    assert is_slw_acyclic(g)


# ---------------------------------------------------------------------------
# Lock combination
# ---------------------------------------------------------------------------


def test_combine_locks_dissolves_cycle():
    g = graph_of(OPPOSED_WRITERS)
    merged = combine_locks(g, "T1#0", {"A", "B"})
    merged = combine_locks(merged, "T2#0", {"A", "B"})
    for cid in ("T1#0", "T2#0"):
        locks = [h for h in merged.chains[cid].hops if h.kind is HopKind.LOCK]
        assert len(locks) == 1
        assert sorted(locks[0].lock_tables) == ["A", "B"]
    assert is_slw_acyclic(merged)
    # the source graph is untouched
    assert not is_slw_acyclic(g)
    assert len([h for h in g.chains["T1#0"].hops if h.kind is HopKind.LOCK]) == 2


def test_combine_locks_singleton_is_identity():
    g = graph_of(OPPOSED_WRITERS)
    out = combine_locks(g, "T1#0", {"A"})
    assert hop_labels(out.chains["T1#0"]) == hop_labels(g.chains["T1#0"])


def test_combine_locks_errors():
    g = graph_of(OPPOSED_WRITERS)
    with pytest.raises(KeyError):
        combine_locks(g, "missing#0", {"A"})
    with pytest.raises(ValueError, match="no locks on"):
        combine_locks(g, "T1#0", {"A", "C"})


# ---------------------------------------------------------------------------
# Detector versus brute force
# ---------------------------------------------------------------------------


def test_detectors_match_bruteforce_on_random_graphs():
    rng = random.Random(42)
    for _ in range(300):
        chains, edges = random_lock_graph(rng)
        expected = alternating_cycles_bruteforce(chains, edges)
        assert find_alternating_cycles(chains, edges) == expected
        assert has_alternating_cycle(chains, edges) == bool(expected)


def test_detector_matches_networkx_reachability():
    nx = pytest.importorskip("networkx")
    rng = random.Random(7)
    for _ in range(200):
        chains, edges = random_lock_graph(rng)
        succ = composite_successors(chains, edges)
        dg = nx.DiGraph()
        dg.add_nodes_from(succ)
        for u, vs in succ.items():
            dg.add_edges_from((u, v) for v in vs)
        assert has_alternating_cycle(chains, edges) == (
            not nx.is_directed_acyclic_graph(dg)
        )


def test_every_reported_cycle_alternates():
    rng = random.Random(13)
    for _ in range(100):
        chains, edges = random_lock_graph(rng)
        pos = {n: i for ns in chains.values() for i, n in enumerate(ns)}
        nbrs = {}
        for e in edges:
            u, v = tuple(e)
            nbrs.setdefault(u, set()).add(v)
            nbrs.setdefault(v, set()).add(u)
        for cycle in find_alternating_cycles(chains, edges):
            for u, v in zip(cycle, cycle[1:] + cycle[:1]):
                # u waits across some w-edge into v's chain, strictly
                # before v's own lock position
                assert any(
                    m[0] == v[0] and pos[m] < pos[v] for m in nbrs.get(u, ())
                )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def test_dot_export_is_deterministic_and_complete():
    g = graph_of(OPPOSED_WRITERS)
    dot = export_slw_dot(g)
    assert dot == export_slw_dot(g)
    assert "shape=box" in dot and "shape=diamond" in dot and "shape=ellipse" in dot
    assert 'label="A"' in dot and "style=dashed" in dot
    assert dot.startswith("digraph") and dot.rstrip().endswith("}")
