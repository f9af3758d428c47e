"""lockplan — deadlock-free two-phase-locking planner and transaction engine.

The package statically analyzes transaction templates written in a small
stored-procedure DSL, derives lock orderings that provably cannot deadlock,
chops transactions at early lock-release points while preserving
serializability, and executes the resulting plans on a multi-threaded
in-memory store next to four baseline protocols (Wound-Wait, Bamboo,
Sorted Locks, OCC) under controllable contention.
"""

from __future__ import annotations

__version__ = "0.1.0"
