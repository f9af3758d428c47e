"""In-memory multi-table row store with undo and write-ahead logging.

Rows are single-version: the visible value is always the latest applied
write, so a transaction that released an exclusive lock early exposes its
uncommitted value to the next lock holder by construction.  Values are
tuples of ints; keys are 64-bit ints (composite keys are packed by the
helpers at the bottom).  Every write records a before-image in the caller's
transaction log so aborts can roll back, and appends a logical WAL record.

WAL framing (file or memory sink): per record, little-endian
``u32 payload length | payload | u32 CRC32(payload)``.  Payloads are
compact JSON objects.  Records are appended at operation time — while the
caller still holds the row lock — so WAL order matches per-key apply order
even when locks are released before commit; the sink is flushed once per
commit, before the commit is acknowledged.  Replay is two-pass: collect
committed transaction ids, then apply only their operations in log order.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
import zlib
from dataclasses import dataclass, field

__all__ = [
    "StorageError",
    "NotFound",
    "TxnLog",
    "Storage",
    "WalSink",
    "NullWal",
    "MemoryWal",
    "FileWal",
    "frame_record",
    "iter_frames",
    "replay",
    "state_hash",
    "load_store_dataset",
    "load_tpcc",
    "district_key",
    "customer_key",
    "stock_key",
    "order_key",
    "order_line_key",
]


class StorageError(Exception):
    """Structural misuse: double insert, delete/write of an absent key."""


class NotFound(StorageError):
    """Raised by operations that require the key to exist."""


_ABSENT = None  # before-image marker for keys that did not exist


# ---------------------------------------------------------------------------
# WAL sinks and framing
# ---------------------------------------------------------------------------


def frame_record(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload + struct.pack(
        "<I", zlib.crc32(payload) & 0xFFFFFFFF
    )


def iter_frames(data: bytes):
    """Yield payload bytes per frame; raise StorageError on corruption."""
    pos = 0
    size = len(data)
    while pos < size:
        if pos + 4 > size:
            raise StorageError("truncated WAL frame header")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + length + 4 > size:
            raise StorageError("truncated WAL frame body")
        payload = data[pos : pos + length]
        pos += length
        (crc,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise StorageError("WAL CRC mismatch")
        yield payload


class WalSink:
    """Interface: append one framed record; flush durably at commit."""

    enabled = True

    def append(self, frame: bytes) -> None:  # pragma: no cover
        raise NotImplementedError

    def flush(self) -> None:  # pragma: no cover
        raise NotImplementedError


class NullWal(WalSink):
    """Default sink: logging disabled, nothing retained."""

    enabled = False

    def append(self, frame: bytes) -> None:
        pass

    def flush(self) -> None:
        pass


class MemoryWal(WalSink):
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._buf = bytearray()

    def append(self, frame: bytes) -> None:
        with self._lock:
            self._buf += frame

    def flush(self) -> None:
        pass

    @property
    def data(self) -> bytes:
        with self._lock:
            return bytes(self._buf)


class FileWal(WalSink):
    def __init__(self, path: str) -> None:
        self._lock = threading.Lock()
        self._fh = open(path, "ab")

    def append(self, frame: bytes) -> None:
        with self._lock:
            self._fh.write(frame)

    def flush(self) -> None:
        with self._lock:
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def _payload_bytes(obj: dict) -> bytes:
    return frame_record(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    )


# ---------------------------------------------------------------------------
# Transaction log (undo + WAL begin tracking)
# ---------------------------------------------------------------------------


@dataclass
class TxnLog:
    """Per-transaction write bookkeeping, dropped at commit."""

    txn_id: int
    undo: list[tuple[str, int, tuple | None]] = field(default_factory=list)
    begun: bool = field(default=False)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------


class Storage:
    """Dict-per-table row store; safe under the row-lock discipline.

    Individual key reads/writes are atomic in CPython; callers serialize
    same-row access through the lock table (exclusive before write,
    shared-or-exclusive before locked read).  Versions back OCC validation
    and survive deletes as tombstones.
    """

    def __init__(self, wal: WalSink | None = None) -> None:
        self.wal = wal if wal is not None else NullWal()
        self._tables: dict[str, dict[int, tuple]] = {}
        self._versions: dict[str, dict[int, int]] = {}

    def create_table(self, name: str) -> None:
        self._tables.setdefault(name, {})
        self._versions.setdefault(name, {})

    def tables(self) -> list[str]:
        return sorted(self._tables)

    def table_size(self, name: str) -> int:
        return len(self._tables[name])

    # -- reads ---------------------------------------------------------------

    def get(self, table: str, key: int) -> tuple | None:
        return self._tables[table].get(key)

    def version(self, table: str, key: int) -> int:
        return self._versions[table].get(key, 0)

    def get_versioned(self, table: str, key: int) -> tuple[tuple | None, int]:
        # Version first: if a writer applies between the two reads, the new
        # value is paired with a stale version and validation rejects it.
        # (Value-first could pair a stale value with the bumped version and
        # validate a read that never existed.)
        version = self._versions[table].get(key, 0)
        return self._tables[table].get(key), version

    # -- writes ----------------------------------------------------------------

    def write(self, table: str, key: int, value: tuple, log: TxnLog | None = None) -> None:
        rows = self._tables[table]
        before = rows.get(key)
        if before is None:
            raise NotFound(f"write of absent {table}[{key}]")
        if log is not None:
            log.undo.append((table, key, before))
            self._wal_op(log, "WRITE", table, key, list(before), list(value))
        rows[key] = value
        self._bump(table, key)

    def insert(self, table: str, key: int, value: tuple, log: TxnLog | None = None) -> None:
        rows = self._tables[table]
        if key in rows:
            raise StorageError(f"duplicate insert {table}[{key}]")
        if log is not None:
            log.undo.append((table, key, _ABSENT))
            self._wal_op(log, "INSERT", table, key, None, list(value))
        rows[key] = value
        self._bump(table, key)

    def delete(self, table: str, key: int, log: TxnLog | None = None) -> None:
        rows = self._tables[table]
        before = rows.get(key)
        if before is None:
            raise NotFound(f"delete of absent {table}[{key}]")
        if log is not None:
            log.undo.append((table, key, before))
            self._wal_op(log, "DELETE", table, key, list(before), None)
        del rows[key]
        self._bump(table, key)

    def _bump(self, table: str, key: int) -> None:
        versions = self._versions[table]
        versions[key] = versions.get(key, 0) + 1

    def _wal_op(self, log: TxnLog, kind: str, table: str, key: int, before, after) -> None:
        if not self.wal.enabled:
            return
        if not log.begun:
            log.begun = True
            self.wal.append(_payload_bytes({"t": log.txn_id, "k": "BEGIN"}))
        self.wal.append(
            _payload_bytes(
                {
                    "t": log.txn_id,
                    "k": kind,
                    "tbl": table,
                    "key": key,
                    "before": before,
                    "after": after,
                }
            )
        )

    # -- transaction end ----------------------------------------------------------

    def commit(self, log: TxnLog) -> None:
        """Make the transaction's WAL records durable, then acknowledge."""
        if log.begun:
            self.wal.append(_payload_bytes({"t": log.txn_id, "k": "COMMIT"}))
            self.wal.flush()
        log.undo.clear()
        log.begun = False

    def abort(self, log: TxnLog) -> None:
        """Roll back applied writes (reverse order) and log the abort."""
        for table, key, before in reversed(log.undo):
            rows = self._tables[table]
            if before is _ABSENT:
                rows.pop(key, None)
            else:
                rows[key] = before
            self._bump(table, key)
        if log.begun:
            self.wal.append(_payload_bytes({"t": log.txn_id, "k": "ABORT"}))
        log.undo.clear()
        log.begun = False


def replay(data: bytes, base: Storage | None = None) -> Storage:
    """Rebuild storage from WAL bytes: apply only committed transactions.

    ``base`` supplies a starting state for logs that begin mid-stream
    (benchmark runs log their transactions, not the initial dataset load;
    replay then starts from an identically loaded dataset).
    """
    records = [json.loads(payload) for payload in iter_frames(data)]
    committed = {r["t"] for r in records if r["k"] == "COMMIT"}
    out = base if base is not None else Storage()
    for rec in records:
        if rec["t"] not in committed:
            continue
        kind = rec["k"]
        if kind in ("BEGIN", "COMMIT", "ABORT"):
            continue
        table = rec["tbl"]
        out.create_table(table)
        rows = out._tables[table]
        if kind == "DELETE":
            rows.pop(rec["key"], None)
        else:
            rows[rec["key"]] = tuple(rec["after"])
    return out


def state_hash(storage: Storage) -> str:
    """sha256 over sorted (table, key, value) triples."""
    digest = hashlib.sha256()
    for table in sorted(storage._tables):
        rows = storage._tables[table]
        for key in sorted(rows):
            digest.update(f"{table}|{key}|{rows[key]!r}\n".encode())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Dataset loaders
# ---------------------------------------------------------------------------

INITIAL_BALANCE = 1_000_000
LISTING_PRICE = 100


def load_store_dataset(
    players: int = 500_000,
    items_per_player: int = 5,
    listings: int = 100_000,
    seed: int = 1,
    wal: WalSink | None = None,
) -> Storage:
    """Marketplace dataset: every item belongs to player ``item // per``.

    Items hold ``(owner,)``, Players ``(balance,)``, Listings
    ``(item, seller, price)``.  Listing ids 0..listings-1 reference
    seed-chosen items; new listings created at run time use higher ids.
    """
    import random

    rng = random.Random(seed)
    storage = Storage(wal)
    for name in ("Items", "Players", "Listings"):
        storage.create_table(name)
    items = storage._tables["Items"]
    for item in range(players * items_per_player):
        items[item] = (item // items_per_player,)
    players_rows = storage._tables["Players"]
    for player in range(players):
        players_rows[player] = (INITIAL_BALANCE,)
    listing_rows = storage._tables["Listings"]
    total_items = players * items_per_player
    for listing in range(listings):
        item = rng.randrange(total_items)
        listing_rows[listing] = (item, item // items_per_player, LISTING_PRICE)
    return storage


# TPC-C cardinalities per warehouse.
DISTRICTS_PER_WAREHOUSE = 10
CUSTOMERS_PER_DISTRICT = 3_000
ITEMS = 100_000
STOCKS_PER_WAREHOUSE = 100_000

# Packed 64-bit keys.  Order ids grow at run time; each district gets a
# 10-million id window, and order lines pack the line number into 4 bits.
_ORDER_WINDOW = 10_000_000
_MAX_ORDER_LINES = 16


def district_key(w: int, d: int) -> int:
    return w * DISTRICTS_PER_WAREHOUSE + d


def customer_key(w: int, d: int, c: int) -> int:
    return district_key(w, d) * CUSTOMERS_PER_DISTRICT + c


def stock_key(w: int, i: int) -> int:
    return w * STOCKS_PER_WAREHOUSE + i


def order_key(w: int, d: int, o: int) -> int:
    return district_key(w, d) * _ORDER_WINDOW + o


def order_line_key(okey: int, line: int) -> int:
    return okey * _MAX_ORDER_LINES + line


def load_tpcc(warehouses: int = 4, seed: int = 1, wal: WalSink | None = None) -> Storage:
    """Standard cardinalities scaled by warehouse count; order history empty.

    Values: Warehouses ``(ytd,)``; Districts ``(next_o_id, ytd)``;
    Customers ``(balance, ytd_payment, payment_cnt)``; Items ``(price,)``;
    Stocks ``(quantity, ytd, order_cnt)``.  Money is integer cents.
    """
    import random

    rng = random.Random(seed)
    storage = Storage(wal)
    for name in (
        "Warehouses",
        "Districts",
        "Customers",
        "Items",
        "Stocks",
        "Orders",
        "NewOrders",
        "OrderLines",
        "Histories",
    ):
        storage.create_table(name)
    for w in range(warehouses):
        storage._tables["Warehouses"][w] = (0,)
        for d in range(DISTRICTS_PER_WAREHOUSE):
            storage._tables["Districts"][district_key(w, d)] = (1, 0)
            customers = storage._tables["Customers"]
            for c in range(CUSTOMERS_PER_DISTRICT):
                customers[customer_key(w, d, c)] = (-1_000, 1_000, 1)
    items = storage._tables["Items"]
    for i in range(ITEMS):
        items[i] = (rng.randrange(100, 10_000),)
    stocks = storage._tables["Stocks"]
    for w in range(warehouses):
        for i in range(ITEMS):
            stocks[stock_key(w, i)] = (rng.randrange(10, 101), 0, 0)
    return storage
