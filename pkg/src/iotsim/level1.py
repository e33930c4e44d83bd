"""Fine-grained discrete-event simulator: a wireless grid plus walking entities.

One instance hosts a square grid of fixed nodes (a local device mesh) and the
entities delegated to it.  A mobile entity broadcasts a route query; the query
floods the mesh hop by hop, the destination node answers along the reverse
path with its position, and the entity then walks toward it.  Time is an
integer count of fine ticks; ``fine_steps`` ticks make up one coarse timestep
of the driving simulation.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from . import rng
from .protocol import Counters, EntityRecord, Init, InstanceHandlers

GRID_SPACING = 20.0
# In [spacing, spacing*sqrt(2)): grid radio links are exactly 4-adjacent.
RADIO_RANGE = 25.0
WARMUP_TICKS = 10
BEACON_INTERVAL = 25
# Pedestrian pace, space units per coarse timestep.
WALK_SPEED = 1.4
ARRIVAL_RADIUS = 1.0
QUERY_RETRY_TICKS = 50
QUERY_RETRY_LIMIT = 8
QUEUE_LIMIT = 1_000_000


class SchedulingError(RuntimeError):
    pass


class EventQueueOverflow(RuntimeError):
    pass


class RouteDiscoveryTimeout(RuntimeError):
    pass


class EventKind(IntEnum):
    BEACON = 1
    QUERY = 2
    RREQ = 3
    RREP = 4
    MOVE = 5


class EventQueue:
    """Min-heap of (tick, insertion seq, event); FIFO among equal ticks."""

    __slots__ = ("_heap", "_counter", "now", "limit")

    def __init__(self, limit: int = QUEUE_LIMIT) -> None:
        self._heap: list[tuple[int, int, tuple]] = []
        self._counter = itertools.count()
        self.now = 0
        self.limit = limit

    def schedule(self, tick: int, event: tuple) -> None:
        if tick < self.now:
            raise SchedulingError(f"event at {tick} scheduled in the past (now {self.now})")
        if len(self._heap) >= self.limit:
            raise EventQueueOverflow(f"event queue exceeded {self.limit} entries")
        heapq.heappush(self._heap, (tick, next(self._counter), event))

    def peek_tick(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> Optional[tuple[int, tuple]]:
        if not self._heap:
            return None
        tick, _, event = heapq.heappop(self._heap)
        self.now = tick
        return tick, event

    def pop_before(self, end_tick: int) -> Optional[tuple[int, tuple]]:
        if self._heap and self._heap[0][0] < end_tick:
            return self.pop()
        return None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class GridScenario:
    """Square mesh of fixed nodes with unit-disc radio links."""

    side: int
    spacing: float
    radio_range: float
    positions: tuple[tuple[float, float], ...]
    neighbors: tuple[tuple[int, ...], ...]
    destination: int

    @classmethod
    def build(
        cls,
        side: int,
        destination: int,
        anchor: tuple[float, float] = (0.0, 0.0),
        spacing: float = GRID_SPACING,
        radio_range: float = RADIO_RANGE,
    ) -> "GridScenario":
        if not 0 <= destination < side * side:
            raise ValueError("destination outside the grid")
        ax, ay = anchor
        positions = tuple(
            (ax + (n % side) * spacing, ay + (n // side) * spacing) for n in range(side * side)
        )
        # Link by actual distance, not index math: the 4-adjacency shape is a
        # consequence of the chosen range, not an assumption.
        neighbors = tuple(
            tuple(
                m
                for m in range(side * side)
                if m != n and math.dist(positions[n], positions[m]) <= radio_range
            )
            for n in range(side * side)
        )
        return cls(side, spacing, radio_range, positions, neighbors, destination)

    def with_destination(self, destination: int) -> "GridScenario":
        return GridScenario(
            self.side, self.spacing, self.radio_range, self.positions, self.neighbors, destination
        )

    def node_pos(self, node: int) -> tuple[float, float]:
        return self.positions[node]

    @property
    def num_nodes(self) -> int:
        return self.side * self.side


@dataclass(slots=True)
class L1Entity:
    id: int
    x: float
    y: float
    kind: str
    dest_pos: Optional[tuple[float, float]] = None
    route_hops: Optional[int] = None
    arrived: bool = False
    query_seq: int = 0
    query_attempts: int = 0
    timed_out: bool = False


# Hop identifiers: ("n", grid node index) or ("e", entity id).
Key = tuple[str, int]


@dataclass(slots=True)
class _Counters:
    rreq: int = 0
    rrep: int = 0
    arrivals: int = 0
    events_processed: int = 0

    def snapshot(self) -> Counters:
        return Counters(self.rreq, self.rrep, self.arrivals, self.events_processed)


class L1Instance:
    """One fine-grained session; strictly single-threaded and deterministic."""

    def __init__(
        self,
        instance_id: str,
        scenario: GridScenario,
        entities: list[L1Entity],
        fine_steps: int,
        beacons: bool = True,
    ) -> None:
        self.instance_id = instance_id
        self.scenario = scenario
        self.entities = {e.id: e for e in entities}
        self.entity_order = [e.id for e in entities]
        self.fine_steps = fine_steps
        self.step_len = WALK_SPEED / fine_steps
        self.queue = EventQueue()
        self.counters = _Counters()
        self.session_step = 0
        self.last_tick = 0
        # Per grid node: route target -> (next hop, hop count, freshness seq).
        self.node_routes: list[dict[Key, tuple[Key, int, int]]] = [
            {} for _ in range(scenario.num_nodes)
        ]
        self.rreq_seen: set[tuple[Key, int, int]] = set()  # (origin, seq, node)
        self.node_rrep_result: dict[int, int] = {}
        if beacons:
            for n in range(scenario.num_nodes):
                self.queue.schedule(n % WARMUP_TICKS, (EventKind.BEACON, n))

    # -- construction -------------------------------------------------------

    @classmethod
    def from_init(cls, init: Init) -> "L1Instance":
        """Build and bootstrap (warm-up included) from an INIT payload.

        The wire carries no region geometry, so the grid is centered on the
        delegated cohort itself; with no entities it sits at the local origin.
        The destination node is drawn from the session seed.
        """
        stream = rng.substream(init.seed, rng.LEVEL1)
        destination = stream.randrange(init.grid_side * init.grid_side)
        half = (init.grid_side - 1) * GRID_SPACING / 2.0
        if init.entities:
            cx = sum(r.x for r in init.entities) / len(init.entities)
            cy = sum(r.y for r in init.entities) / len(init.entities)
            anchor = (round(cx - half, 6), round(cy - half, 6))
        else:
            anchor = (0.0, 0.0)
        scenario = GridScenario.build(init.grid_side, destination, anchor=anchor)
        entities = [L1Entity(r.id, r.x, r.y, r.kind) for r in init.entities]
        inst = cls(init.instance_id, scenario, entities, init.fine_steps)
        inst._bootstrap()
        return inst

    def _bootstrap(self) -> None:
        # Warm-up: grid housekeeping only, then entity behavior begins.
        self._run_until(WARMUP_TICKS)
        for eid in self.entity_order:
            entity = self.entities[eid]
            if entity.kind == "mobile":
                self.queue.schedule(WARMUP_TICKS, (EventKind.QUERY, eid))

    # -- event loop ---------------------------------------------------------

    def _run_until(self, end_tick: int) -> None:
        while True:
            item = self.queue.pop_before(end_tick)
            if item is None:
                return
            tick, event = item
            if tick < self.last_tick:
                raise SchedulingError("event causality violated")
            self.last_tick = tick
            self.counters.events_processed += 1
            self._dispatch(tick, event)

    def _dispatch(self, tick: int, event: tuple) -> None:
        kind = event[0]
        if kind == EventKind.BEACON:
            self.queue.schedule(tick + BEACON_INTERVAL, event)
        elif kind == EventKind.QUERY:
            self._on_query(tick, event[1])
        elif kind == EventKind.RREQ:
            self._on_rreq(tick, *event[1:])
        elif kind == EventKind.RREP:
            self._on_rrep(tick, *event[1:])
        elif kind == EventKind.MOVE:
            self._on_move(tick, event[1])
        else:
            raise SchedulingError(f"unknown event kind {kind}")

    def _entry_nodes(self, x: float, y: float) -> list[int]:
        return [
            n
            for n in range(self.scenario.num_nodes)
            if math.dist((x, y), self.scenario.positions[n]) <= self.scenario.radio_range
        ]

    def _on_query(self, tick: int, eid: int) -> None:
        entity = self.entities[eid]
        if entity.dest_pos is not None or entity.timed_out:
            return  # stale retry
        if entity.query_attempts >= QUERY_RETRY_LIMIT:
            entity.timed_out = True  # discovery timeout, left as hops=null
            return
        entity.query_attempts += 1
        entity.query_seq += 1
        origin: Key = ("e", eid)
        self.counters.rreq += 1
        for n in self._entry_nodes(entity.x, entity.y):
            self.queue.schedule(tick + 1, (EventKind.RREQ, n, origin, entity.query_seq, 1, origin))
        self.queue.schedule(tick + QUERY_RETRY_TICKS, (EventKind.QUERY, eid))

    def _flood_from_node(self, tick: int, source: int, seq: int) -> None:
        origin: Key = ("n", source)
        self.counters.rreq += 1
        for m in self.scenario.neighbors[source]:
            self.queue.schedule(tick + 1, (EventKind.RREQ, m, origin, seq, 1, origin))

    def _on_rreq(self, tick: int, node: int, origin: Key, seq: int, hops: int, prev: Key) -> None:
        if origin == ("n", node):
            return  # own flood echoed back
        if (origin, seq, node) in self.rreq_seen:
            return
        self.rreq_seen.add((origin, seq, node))
        # First copy wins: with unit hop latency it rode a shortest path.
        self.node_routes[node][origin] = (prev, hops, seq)
        if node == self.scenario.destination:
            self.counters.rrep += 1
            dest_pos = self.scenario.node_pos(node)
            sender: Key = ("n", node)
            self.queue.schedule(
                tick + 1, (EventKind.RREP, prev, origin, seq, dest_pos, hops, 1, sender)
            )
            return
        self.counters.rreq += 1
        relay: Key = ("n", node)
        for m in self.scenario.neighbors[node]:
            self.queue.schedule(tick + 1, (EventKind.RREQ, m, origin, seq, hops + 1, relay))

    def _on_rrep(
        self,
        tick: int,
        target: Key,
        origin: Key,
        seq: int,
        dest_pos: tuple,
        route_hops: int,
        back_hops: int,
        sender: Key,
    ) -> None:
        if target == origin:
            self._deliver_rrep(tick, origin, dest_pos, route_hops)
            return
        kind, node = target
        if kind != "n":
            return  # reply addressed to an entity that is not the querier
        # Forward route toward the destination, learned from the reply path.
        dest_key: Key = ("n", self.scenario.destination)
        self.node_routes[node][dest_key] = (sender, back_hops, seq)
        route = self.node_routes[node].get(origin)
        if route is None:
            return  # reverse path unknown; the reply dies here
        self.counters.rrep += 1
        self.queue.schedule(
            tick + 1,
            (EventKind.RREP, route[0], origin, seq, dest_pos, route_hops, back_hops + 1, target),
        )

    def _deliver_rrep(self, tick: int, origin: Key, dest_pos: tuple, route_hops: int) -> None:
        kind, ident = origin
        if kind == "n":
            self.node_rrep_result.setdefault(ident, route_hops)
            return
        entity = self.entities[ident]
        if entity.dest_pos is not None:
            return  # duplicate reply
        entity.dest_pos = (dest_pos[0], dest_pos[1])
        entity.route_hops = route_hops
        self.queue.schedule(tick + 1, (EventKind.MOVE, ident))

    def _on_move(self, tick: int, eid: int) -> None:
        entity = self.entities[eid]
        if entity.arrived or entity.dest_pos is None:
            return
        dx = entity.dest_pos[0] - entity.x
        dy = entity.dest_pos[1] - entity.y
        dist = math.hypot(dx, dy)
        if dist <= ARRIVAL_RADIUS:
            entity.arrived = True
            self.counters.arrivals += 1
            return
        step = min(self.step_len, dist)
        entity.x += step * dx / dist
        entity.y += step * dy / dist
        self.queue.schedule(tick + 1, (EventKind.MOVE, eid))

    # -- session surface ----------------------------------------------------

    def run_one_coarse_step(self, timestep: int) -> tuple[tuple[EntityRecord, ...], Counters]:
        del timestep  # the caller's index; echoed by the protocol layer
        self.session_step += 1
        self._run_until(WARMUP_TICKS + self.session_step * self.fine_steps)
        return self.status_records(), self.counters.snapshot()

    def finalize(self) -> tuple[tuple[EntityRecord, ...], Counters]:
        return self.status_records(), self.counters.snapshot()

    def status_records(self) -> tuple[EntityRecord, ...]:
        return tuple(
            EntityRecord(
                id=e.id,
                x=e.x,
                y=e.y,
                kind=e.kind,
                arrived=e.arrived,
                hops=e.route_hops,
            )
            for e in (self.entities[eid] for eid in self.entity_order)
        )

    @property
    def local_clock(self) -> float:
        """Coarse timeunits elapsed inside the current activation, in [0, 1]."""
        start = WARMUP_TICKS + (self.session_step - 1) * self.fine_steps
        if self.session_step == 0 or self.queue.now <= start:
            return 0.0
        return min(1.0, (self.queue.now - start) / self.fine_steps)


def discover_route(scenario: GridScenario, source: int, destination: int) -> int:
    """Hop count from a grid node to ``destination``, via flood discovery.

    Standalone probe used by tests and tooling: no beacons, no entities, the
    source node floods at tick 0 and the answer returns along the reverse
    path.  Raises RouteDiscoveryTimeout if the mesh is disconnected.
    """
    if source == destination:
        return 0
    probe = scenario if scenario.destination == destination else scenario.with_destination(destination)
    inst = L1Instance("probe", probe, [], fine_steps=1, beacons=False)
    inst._flood_from_node(0, source, 1)
    while source not in inst.node_rrep_result:
        item = inst.queue.pop()
        if item is None:
            raise RouteDiscoveryTimeout(f"no route from {source} to {destination}")
        inst.counters.events_processed += 1
        inst._dispatch(*item)
    return inst.node_rrep_result[source]


def make_handlers(init: Init) -> InstanceHandlers:
    """Adapter wiring an instance into protocol.serve_session."""
    inst = L1Instance.from_init(init)
    return InstanceHandlers(run_step=inst.run_one_coarse_step, finalize=inst.finalize)
