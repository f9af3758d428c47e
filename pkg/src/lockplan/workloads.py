"""Built-in workloads: online-store marketplace, TPC-C subset, dynamic mix.

Template texts double as the analyzer's golden inputs; population figures in
the DSL are the nominal dataset sizes used for contention scoring.  The
chosen plan structure is invariant to uniform population scaling, so the
bench may load smaller or larger datasets without re-analysis.
"""

from __future__ import annotations

import itertools
import random
from collections import deque
from dataclasses import dataclass

from .dsl import Workload, parse_workload
from .engine import TxnRequest, WorkloadRuntime
from .store import (
    CUSTOMERS_PER_DISTRICT,
    DISTRICTS_PER_WAREHOUSE,
    ITEMS,
    LISTING_PRICE,
    Storage,
    customer_key,
    district_key,
    order_key,
    order_line_key,
    stock_key,
)

STORE_PLAYERS = 500_000
STORE_ITEMS_PER_PLAYER = 5
STORE_LISTINGS = 100_000


def store_dsl(
    players: int = STORE_PLAYERS,
    items_per_player: int = STORE_ITEMS_PER_PLAYER,
    listings: int = STORE_LISTINGS,
) -> str:
    return f"""
# Online marketplace: players own items and trade them through listings.
Table Items population={players * items_per_player}
Table Players population={players}
Table Listings population={listings}

Transaction AddListing(item, seller, listing):
    it = Read(Items, item) may_abort
    Read(Players, seller)
    Insert(Listings, listing)

Transaction BuyListing(listing, buyer):
    l = Read(Listings, listing) may_abort
    b = Read(Players, buyer) may_abort
    it = Read(Items, l.item)
    s = Read(Players, it.owner)
    Delete(Listings, listing)
    Write(Items, l.item)
    Write(Players, buyer)
    Write(Players, it.owner)

Transaction ReadItems(items):
    for it in items max=20:
        Read(Items, it)
"""


def tpcc_dsl(warehouses: int = 4) -> str:
    w = warehouses
    return f"""
# TPC-C subset: NewOrder and Payment at a 50/50 mix.
Table Warehouses population={w}
Table Districts population={10 * w}
Table Customers population={30_000 * w}
Table Items population={100_000}
Table Stocks population={100_000 * w}
Table Orders population={30_000 * w}
Table NewOrders population={30_000 * w}
Table OrderLines population={300_000 * w}
Table Histories population={30_000 * w}

Transaction NewOrder(w, d, c, order, lines):
    for v in lines max=15:
        Read(Items, v.item) may_abort
    Read(Warehouses, w)
    Read(Customers, c)
    dist = Read(Districts, d)
    Write(Districts, d)
    Insert(Orders, order)
    Insert(NewOrders, order)
    for l in lines max=15:
        Read(Stocks, l.stock)
        Write(Stocks, l.stock)
        Insert(OrderLines, l.ol)

Transaction Payment(w, d, c, hist):
    Read(Warehouses, w)
    Write(Warehouses, w)
    Read(Districts, d)
    Write(Districts, d)
    Read(Customers, c)
    Write(Customers, c)
    Insert(Histories, hist)
"""


def dynamic_dsl(rows: int = 100_000) -> str:
    return f"""
# Unanalyzed read-modify-write chains for the dynamic-fallback path.
Table Rows population={rows}

Transaction Hammer(keys) dynamic:
    for k in keys max=10:
        Read(Rows, k)
        Write(Rows, k)
"""


STORE_DSL = store_dsl()
TPCC_DSL = tpcc_dsl()
DYNAMIC_DSL = dynamic_dsl()


def store_workload() -> Workload:
    return parse_workload(STORE_DSL)


def tpcc_workload(warehouses: int = 4) -> Workload:
    return parse_workload(tpcc_dsl(warehouses))


def dynamic_workload(rows: int = 100_000) -> Workload:
    return parse_workload(dynamic_dsl(rows))


def store_mixed_dsl(
    players: int = STORE_PLAYERS,
    items_per_player: int = STORE_ITEMS_PER_PLAYER,
    listings: int = STORE_LISTINGS,
) -> str:
    """Store templates plus an unanalyzed read-modify-write stressor that
    targets the same Items table (the mixed static/dynamic configuration)."""
    return store_dsl(players, items_per_player, listings) + """
Transaction HammerItems(keys) dynamic:
    for k in keys max=10:
        Read(Items, k)
        Write(Items, k)
"""


def store_mixed_workload() -> Workload:
    return parse_workload(store_mixed_dsl())


def load_dynamic_dataset(rows: int = 100_000, wal=None) -> Storage:
    storage = Storage(wal=wal)
    storage.create_table("Rows")
    for k in range(rows):
        storage.insert("Rows", k, (0,))
    return storage


# ---------------------------------------------------------------------------
# Contention knobs and key draws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContentionKnobs:
    """Skew controls: draws land in the hot prefix [0, hot_count) with
    probability p_hot, uniformly in the cold remainder otherwise."""

    hot_count: int = 64
    p_hot: float = 0.9
    seed: int = 1


def _rng(seed: int, worker: int) -> random.Random:
    return random.Random(seed * 1_000_003 + worker)


def hot_draw(rng: random.Random, knobs: ContentionKnobs, population: int) -> int:
    hot = min(knobs.hot_count, population)
    if hot >= population:
        return rng.randrange(population)
    if rng.random() < knobs.p_hot:
        return rng.randrange(hot)
    return hot + rng.randrange(population - hot)


def nurand(rng: random.Random, a: int, x: int, y: int, c: int) -> int:
    """TPC-C style non-uniform draw over [x, y]."""
    return (((rng.randrange(a + 1) | rng.randrange(x, y + 1)) + c) % (y - x + 1)) + x


# ---------------------------------------------------------------------------
# Business semantics
# ---------------------------------------------------------------------------


class StoreRuntime(WorkloadRuntime):
    """Marketplace semantics: listings move an item and its price between
    players.  AddListing re-checks ownership (it goes stale when another
    transaction sells the item first); BuyListing re-checks the buyer's
    balance.  Both rejections are business aborts, not conflicts."""

    row_fields = {
        "Items": ("owner",),
        "Players": ("balance",),
        "Listings": ("item", "owner", "price"),
    }

    def __init__(self, workload: Workload | None = None) -> None:
        self.workload = workload if workload is not None else store_workload()

    def after_read(self, at, op, key, value):
        if at.req.template == "AddListing" and op.table.name == "Items":
            if value[0] != at.params["seller"]:
                return "user_abort"
        elif at.req.template == "BuyListing" and op.out_var == "b":
            price = at.vars["l"][1][2]
            if value[0] < price:
                return "user_abort"
        return None

    def write_value(self, at, op, key):
        if at.req.template == "HammerItems":
            return at.peek("Items", key)  # identity RMW: contention only
        if op.table.name == "Items":
            return (at.params["buyer"],)
        price = at.vars["l"][1][2]
        balance = at.peek("Players", key)[0]
        if op.key.canonical() == "buyer":
            return (balance - price,)
        return (balance + price,)

    def insert_value(self, at, op, key):
        return (at.params["item"], at.params["seller"], LISTING_PRICE)


PAYMENT_AMOUNT = 10


class TpccRuntime(WorkloadRuntime):
    """Order-entry semantics: NewOrder advances the district sequence and
    draws down stock (wrapping by 91 under a quantity of 10); Payment moves
    a fixed amount through warehouse/district year-to-date totals."""

    row_fields = {
        "Warehouses": ("ytd",),
        "Districts": ("next_o_id", "ytd"),
        "Customers": ("balance", "ytd_payment", "payment_cnt"),
        "Items": ("price",),
        "Stocks": ("quantity", "ytd", "order_cnt"),
        "Orders": ("customer", "ol_cnt"),
        "NewOrders": ("pending",),
        "OrderLines": ("item", "qty"),
        "Histories": ("customer", "amount"),
    }

    def __init__(self, workload: Workload | None = None) -> None:
        self.workload = workload if workload is not None else tpcc_workload()

    def write_value(self, at, op, key):
        table = op.table.name
        if at.req.template == "NewOrder":
            if table == "Districts":
                next_o, ytd = at.vars["dist"][1]
                return (next_o + 1, ytd)
            qty = at.params["lines"][op.loop.iteration]["qty"]
            quantity, ytd, order_cnt = at.peek("Stocks", key)
            quantity -= qty
            if quantity < 10:
                quantity += 91
            return (quantity, ytd + qty, order_cnt + 1)
        row = at.peek(table, key)
        if table == "Warehouses":
            return (row[0] + PAYMENT_AMOUNT,)
        if table == "Districts":
            return (row[0], row[1] + PAYMENT_AMOUNT)
        return (row[0] - PAYMENT_AMOUNT, row[1] + PAYMENT_AMOUNT, row[2] + 1)

    def insert_value(self, at, op, key):
        table = op.table.name
        if table == "Orders":
            return (at.params["c"], len(at.params["lines"]))
        if table == "NewOrders":
            return (1,)
        if table == "OrderLines":
            line = at.params["lines"][op.loop.iteration]
            return (line["item"], line["qty"])
        return (at.params["c"], PAYMENT_AMOUNT)  # Histories


class HammerRuntime(WorkloadRuntime):
    row_fields = {"Rows": ("value",)}

    def __init__(self, workload: Workload | None = None) -> None:
        self.workload = workload if workload is not None else dynamic_workload()

    def write_value(self, at, op, key):
        return (at.peek("Rows", key)[0] + 1,)


# ---------------------------------------------------------------------------
# Request generators (one per worker; deterministic under a fixed seed)
# ---------------------------------------------------------------------------


class StoreGenerator:
    """AddListing/BuyListing stream over pooled listing ids.

    Worker ``i`` owns listing ids congruent to ``i`` modulo the worker
    count: it lists fresh ids from that residue class and only buys from
    its own pool.  Workers therefore never race to buy the same listing —
    cross-transaction contention comes from the hot items and their owners,
    not from generator artifacts.  Committed AddListings feed the pool;
    aborted BuyListings return their listing to it.
    """

    def __init__(
        self,
        worker: int,
        knobs: ContentionKnobs,
        storage: Storage,
        num_workers: int,
        p_add: float = 0.5,
    ) -> None:
        self.rng = _rng(knobs.seed, worker)
        self.knobs = knobs
        self.worker = worker
        self.num_workers = num_workers
        self.p_add = p_add
        self.storage = storage
        self.players = storage.table_size("Players")
        self.items = storage.table_size("Items")
        self.hot_boundary = min(knobs.hot_count, self.items)
        initial = storage.table_size("Listings")
        self.hot_pool: deque[tuple[int, int]] = deque()
        self.cold_pool: deque[tuple[int, int]] = deque()
        for lid in range(worker, initial, num_workers):
            item = storage.get("Listings", lid)[0]
            self._pool_of(item).append((lid, item))
        self.next_fresh = initial + worker
        self._inflight: dict[int, int] = {}  # listing -> item, until feedback

    def _pool_of(self, item: int) -> deque:
        return self.hot_pool if item < self.hot_boundary else self.cold_pool

    def next_request(self) -> TxnRequest:
        sell = self.rng.random() < self.p_add
        if sell or (not self.hot_pool and not self.cold_pool):
            item = hot_draw(self.rng, self.knobs, self.items)
            # A client lists from its current inventory view: look up the
            # owner now, and let the transaction's ownership check catch
            # the (rare) race where the item trades hands in between.
            seller = self.storage.get("Items", item)[0]
            listing = self.next_fresh
            self.next_fresh += self.num_workers
            return TxnRequest(
                "AddListing", {"item": item, "seller": seller, "listing": listing}
            )
        want_hot = self.rng.random() < self.knobs.p_hot
        pool = self.hot_pool if want_hot else self.cold_pool
        if not pool:
            pool = self.cold_pool if want_hot else self.hot_pool
        listing, item = pool.popleft()
        self._inflight[listing] = item
        return TxnRequest(
            "BuyListing", {"listing": listing, "buyer": self.rng.randrange(self.players)}
        )

    def feedback(self, req: TxnRequest, outcome: str) -> None:
        if req.template == "AddListing":
            if outcome == "committed":
                item = req.params["item"]
                self._pool_of(item).append((req.params["listing"], item))
        elif req.template == "BuyListing":
            item = self._inflight.pop(req.params["listing"])
            if outcome != "committed":  # rolled back; the listing still exists
                self._pool_of(item).append((req.params["listing"], item))


class ReadItemsGenerator:
    """Read-only scans of 20 ids inside the hot range (padded to 20 ids
    when the hot range is smaller)."""

    def __init__(self, worker: int, knobs: ContentionKnobs, items_total: int) -> None:
        self.rng = _rng(knobs.seed ^ 0x5EED, worker)
        self.pool = range(min(max(knobs.hot_count, 20), items_total))

    def next_request(self) -> TxnRequest:
        return TxnRequest("ReadItems", {"items": self.rng.sample(self.pool, 20)})

    def feedback(self, req: TxnRequest, outcome: str) -> None:
        pass


class TpccGenerator:
    """NewOrder/Payment stream: warehouse drawn from the hot range,
    customer and item ids drawn non-uniformly, order-line count uniform on
    [5, 15], and a configurable fraction of NewOrders carrying one invalid
    item id (rejected by the item lookup)."""

    def __init__(
        self,
        worker: int,
        knobs: ContentionKnobs,
        storage: Storage,
        num_workers: int,
        p_neworder: float = 0.5,
        invalid_rate: float = 0.01,
    ) -> None:
        self.rng = _rng(knobs.seed, worker)
        self.knobs = knobs
        self.worker = worker
        self.num_workers = num_workers
        self.p_neworder = p_neworder
        self.invalid_rate = invalid_rate
        self.warehouses = storage.table_size("Warehouses")
        seeder = random.Random(knobs.seed)
        self.c_cust = seeder.randrange(1024)
        self.c_item = seeder.randrange(8192)
        self._order_seq = itertools.count()
        self._hist_seq = itertools.count()

    def next_request(self) -> TxnRequest:
        rng = self.rng
        w = hot_draw(rng, self.knobs, self.warehouses)
        d = rng.randrange(DISTRICTS_PER_WAREHOUSE)
        c = nurand(rng, 1023, 0, CUSTOMERS_PER_DISTRICT - 1, self.c_cust)
        params = {
            "w": w,
            "d": district_key(w, d),
            "c": customer_key(w, d, c),
        }
        if rng.random() < self.p_neworder:
            ol_cnt = rng.randint(5, 15)
            invalid = rng.random() < self.invalid_rate
            o = 1 + self.worker + self.num_workers * next(self._order_seq)
            okey = order_key(w, d, o)
            lines = []
            for j in range(ol_cnt):
                item = nurand(rng, 8191, 0, ITEMS - 1, self.c_item)
                if invalid and j == ol_cnt - 1:
                    item = ITEMS + 7  # absent id: rejected at the item lookup
                lines.append(
                    {
                        "item": item,
                        "stock": stock_key(w, item % ITEMS),
                        "ol": order_line_key(okey, j),
                        "qty": rng.randint(1, 10),
                    }
                )
            params.update(order=okey, lines=lines)
            return TxnRequest("NewOrder", params)
        params["hist"] = self.worker + self.num_workers * next(self._hist_seq)
        return TxnRequest("Payment", params)

    def feedback(self, req: TxnRequest, outcome: str) -> None:
        pass


class HammerGenerator:
    """Unanalyzed read-modify-write chains over a keyspace prefix."""

    def __init__(
        self,
        worker: int,
        knobs: ContentionKnobs,
        rows: int,
        template: str = "Hammer",
        num_keys: int = 10,
    ) -> None:
        self.rng = _rng(knobs.seed ^ 0xAA, worker)
        self.knobs = knobs
        self.rows = rows
        self.template = template
        self.num_keys = num_keys

    def next_request(self) -> TxnRequest:
        keys = [hot_draw(self.rng, self.knobs, self.rows) for _ in range(self.num_keys)]
        return TxnRequest(self.template, {"keys": keys}, dynamic=True)

    def feedback(self, req: TxnRequest, outcome: str) -> None:
        pass


class MixedStoreGenerator:
    """Store stream with a fraction of dynamic HammerItems transactions."""

    def __init__(
        self,
        worker: int,
        knobs: ContentionKnobs,
        storage: Storage,
        num_workers: int,
        dynamic_fraction: float,
        p_add: float = 0.5,
    ) -> None:
        self.rng = _rng(knobs.seed ^ 0xD1CE, worker)
        self.dynamic_fraction = dynamic_fraction
        self.store = StoreGenerator(worker, knobs, storage, num_workers, p_add)
        self.hammer = HammerGenerator(
            worker, knobs, storage.table_size("Items"), template="HammerItems"
        )

    def next_request(self) -> TxnRequest:
        if self.rng.random() < self.dynamic_fraction:
            return self.hammer.next_request()
        return self.store.next_request()

    def feedback(self, req: TxnRequest, outcome: str) -> None:
        if not req.dynamic:
            self.store.feedback(req, outcome)
