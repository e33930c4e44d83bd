"""Fine-grained engine: event queue, grid mesh, discovery, and walking."""

import math
from collections import deque

import pytest

from iotsim import rng
from iotsim.level1 import (
    GRID_SPACING,
    QUERY_RETRY_LIMIT,
    EventKind,
    EventQueue,
    EventQueueOverflow,
    GridScenario,
    L1Entity,
    L1Instance,
    RouteDiscoveryTimeout,
    SchedulingError,
    discover_route,
)
from iotsim.protocol import EntityRecord, Final, Init, encode


def _bfs_hops(scenario, src, dst):
    dist = {src: 0}
    frontier = deque([src])
    while frontier:
        n = frontier.popleft()
        if n == dst:
            return dist[n]
        for m in scenario.neighbors[n]:
            if m not in dist:
                dist[m] = dist[n] + 1
                frontier.append(m)
    raise AssertionError(f"no path {src} -> {dst}")


# -- event queue --------------------------------------------------------------


def test_queue_orders_by_tick_then_insertion():
    q = EventQueue()
    q.schedule(5, ("b",))
    q.schedule(3, ("a",))
    q.schedule(5, ("c",))
    assert q.pop() == (3, ("a",))
    assert q.pop() == (5, ("b",))
    assert q.pop() == (5, ("c",))
    assert q.pop() is None


def test_queue_rejects_events_in_the_past():
    q = EventQueue()
    q.schedule(4, ("a",))
    q.pop()
    assert q.now == 4
    q.schedule(4, ("same-tick-ok",))
    with pytest.raises(SchedulingError):
        q.schedule(3, ("late",))


def test_queue_overflow_guard():
    q = EventQueue(limit=10)
    for i in range(10):
        q.schedule(i, ("e", i))
    with pytest.raises(EventQueueOverflow):
        q.schedule(99, ("too-many",))


def test_pop_before_respects_window():
    q = EventQueue()
    q.schedule(2, ("a",))
    q.schedule(7, ("b",))
    assert q.pop_before(5) == (2, ("a",))
    assert q.pop_before(5) is None
    assert len(q) == 1


# -- grid mesh ----------------------------------------------------------------


@pytest.mark.parametrize("side", [3, 4, 7, 10])
def test_grid_links_are_four_adjacent(side):
    scenario = GridScenario.build(side, destination=0)
    degrees = sorted(len(ns) for ns in scenario.neighbors)
    # 4 corners of degree 2, 4(side-2) edge nodes of degree 3, rest degree 4.
    assert degrees.count(2) == 4
    assert degrees.count(3) == 4 * (side - 2)
    assert degrees.count(4) == side * side - 4 * side + 4
    for n, ns in enumerate(scenario.neighbors):
        for m in ns:
            assert math.dist(scenario.positions[n], scenario.positions[m]) == GRID_SPACING


def test_grid_positions_follow_anchor():
    scenario = GridScenario.build(3, destination=0, anchor=(100.0, -40.0))
    assert scenario.node_pos(0) == (100.0, -40.0)
    assert scenario.node_pos(4) == (120.0, -20.0)
    assert scenario.node_pos(8) == (140.0, 0.0)


def test_grid_rejects_destination_outside():
    with pytest.raises(ValueError):
        GridScenario.build(3, destination=9)


# -- standalone route discovery -------------------------------------------------


def test_discover_route_trivial_and_adjacent():
    scenario = GridScenario.build(5, destination=0)
    assert discover_route(scenario, 7, 7) == 0
    assert discover_route(scenario, 0, 1) == 1
    assert discover_route(scenario, 0, 5) == 1


def test_discover_route_matches_breadth_first_search():
    scenario = GridScenario.build(6, destination=0)
    pairs = [(0, 35), (3, 31), (12, 17), (5, 30), (20, 2), (14, 14)]
    for src, dst in pairs:
        assert discover_route(scenario, src, dst) == _bfs_hops(scenario, src, dst)


def test_discover_route_disconnected_mesh_times_out():
    scenario = GridScenario.build(3, destination=8, radio_range=GRID_SPACING / 2)
    with pytest.raises(RouteDiscoveryTimeout):
        discover_route(scenario, 0, 8)


# -- full instances -----------------------------------------------------------


def _manual_instance(entity_xy, kind="mobile", side=3, destination=4, fine_steps=100):
    scenario = GridScenario.build(side, destination)
    entity = L1Entity(1, entity_xy[0], entity_xy[1], kind)
    inst = L1Instance("t0-lp0-0", scenario, [entity], fine_steps)
    inst._bootstrap()
    return inst


def test_mobile_entity_discovers_route_and_walks():
    # Entity just off the center node of a 3x3 mesh; the center is the target.
    inst = _manual_instance((23.0, 20.0))
    records, counters = inst.run_one_coarse_step(0)
    (rec,) = records
    # One hop: the destination node is itself an entry node.
    assert rec.hops == 1
    assert not rec.arrived
    assert counters.rreq >= 1
    assert counters.rrep >= 1
    # Walked toward (20, 20), covering just under one coarse step of travel.
    assert rec.x < 23.0
    assert rec.y == pytest.approx(20.0)
    d1 = math.dist((rec.x, rec.y), (20.0, 20.0))
    assert d1 < 3.0

    records, counters = inst.run_one_coarse_step(1)
    (rec,) = records
    assert rec.arrived
    assert counters.arrivals == 1
    assert math.dist((rec.x, rec.y), (20.0, 20.0)) <= 1.0 + 1e-9

    # Arrival is terminal: nothing moves afterwards.
    records, counters = inst.run_one_coarse_step(2)
    assert records[0] == rec
    assert counters.arrivals == 1


def test_route_hops_match_entry_plus_mesh_distance():
    scenario = GridScenario.build(4, destination=15)
    entity = L1Entity(9, 3.0, 0.0, "mobile")  # near node 0, far corner target
    inst = L1Instance("t0-lp0-0", scenario, [entity], fine_steps=200)
    inst._bootstrap()
    records, _ = inst.run_one_coarse_step(0)
    entries = inst._entry_nodes(3.0, 0.0)
    assert entries  # sanity: the entity can reach the mesh
    want = 1 + min(_bfs_hops(scenario, n, 15) for n in entries)
    assert records[0].hops == want


def test_static_entity_never_queries():
    inst = _manual_instance((23.0, 20.0), kind="static")
    records, counters = inst.run_one_coarse_step(0)
    (rec,) = records
    assert rec.hops is None
    assert not rec.arrived
    assert (rec.x, rec.y) == (23.0, 20.0)
    assert counters.rreq == 0
    assert counters.rrep == 0
    assert counters.events_processed > 0  # mesh housekeeping still ticks


def test_unreachable_mesh_retries_then_times_out():
    # Entity far outside radio range of every node: all queries go unanswered.
    inst = _manual_instance((500.0, 500.0), fine_steps=100)
    for t in range(6):
        records, counters = inst.run_one_coarse_step(t)
    (rec,) = records
    assert rec.hops is None
    assert not rec.arrived
    assert counters.rreq == QUERY_RETRY_LIMIT
    assert counters.rrep == 0


def test_from_init_seeds_destination_and_centers_grid():
    init = Init(
        instance_id="t3-lp1-0",
        seed=123456789,
        grid_side=10,
        fine_steps=100,
        entities=(
            EntityRecord(4, 100.0, 50.0, "mobile"),
            EntityRecord(9, 120.0, 70.0, "static"),
        ),
    )
    inst = L1Instance.from_init(init)
    want_dest = rng.substream(123456789, rng.LEVEL1).randrange(100)
    assert inst.scenario.destination == want_dest
    # Mesh centered on the cohort centroid (110, 60).
    assert inst.scenario.node_pos(0) == (110.0 - 90.0, 60.0 - 90.0)
    assert inst.entity_order == [4, 9]


def test_from_init_without_entities():
    init = Init(instance_id="x", seed=5, grid_side=4, fine_steps=50, entities=())
    inst = L1Instance.from_init(init)
    assert inst.scenario.node_pos(0) == (0.0, 0.0)
    records, counters = inst.run_one_coarse_step(0)
    assert records == ()
    assert counters.rreq == 0 and counters.rrep == 0 and counters.arrivals == 0
    assert counters.events_processed > 0


def test_identical_init_gives_identical_reports():
    init = Init(
        instance_id="t1-lp0-0",
        seed=777,
        grid_side=6,
        fine_steps=100,
        entities=(EntityRecord(2, 10.0, 10.0, "mobile"), EntityRecord(3, 14.0, 12.0, "mobile")),
    )
    a = L1Instance.from_init(init)
    b = L1Instance.from_init(init)
    for t in range(3):
        ra, ca = a.run_one_coarse_step(t)
        rb, cb = b.run_one_coarse_step(t)
        assert ra == rb
        assert ca == cb
    fa, fb = a.finalize(), b.finalize()
    assert fa == fb
    assert encode(Final(*fa)) == encode(Final(*fb))


def test_local_clock_stays_in_unit_interval():
    inst = _manual_instance((23.0, 20.0))
    assert inst.local_clock == 0.0
    for t in range(3):
        inst.run_one_coarse_step(t)
        assert 0.0 <= inst.local_clock <= 1.0
