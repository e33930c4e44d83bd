"""Coarse engine: partitioning, delivery, delegation, and failure paths."""

import pytest

import iotsim.level1 as level1
from iotsim.config import SimConfig, SpawnTrigger
from iotsim.dissemination import DisseminationMessage, MessageCache
from iotsim.level0 import (
    DeliveryAudit,
    SimEngine,
    SimulationError,
    partition,
    run_simulation,
)
from iotsim.model import STATUS_ACTIVE, STATUS_DELEGATED, Entity
from iotsim.protocol import EntityRecord, ProtocolError


def _entity(eid, x, y, kind="static"):
    return Entity(eid, x, y, kind, MessageCache(256))


# -- partitioning --------------------------------------------------------------


def test_partition_single_stripe_owns_everything():
    cfg = SimConfig(num_ses=4, num_lps=1)
    world = cfg.make_world()
    entities = [_entity(i, i * 10.0, 5.0) for i in range(4)]
    lps = partition(cfg, entities, world)
    assert len(lps) == 1
    assert set(lps[0].entities) == {0, 1, 2, 3}
    assert (lps[0].x0, lps[0].x1) == (0.0, world.width)


def test_partition_four_stripes_by_x():
    cfg = SimConfig(num_ses=8, num_lps=4, density=8e-4)  # world side 100
    world = cfg.make_world()
    assert world.width == pytest.approx(100.0)
    entities = [
        _entity(0, 0.0, 1.0),
        _entity(1, 24.9, 1.0),
        _entity(2, 25.0, 1.0),  # boundary goes to the right stripe
        _entity(3, 49.9, 1.0),
        _entity(4, 50.0, 1.0),
        _entity(5, 74.9, 1.0),
        _entity(6, 75.0, 1.0),
        _entity(7, 99.9, 1.0),
    ]
    lps = partition(cfg, entities, world)
    assert [sorted(lp.entities) for lp in lps] == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert [(lp.x0, lp.x1) for lp in lps] == [
        (0.0, 25.0),
        (25.0, 50.0),
        (50.0, 75.0),
        (75.0, 100.0),
    ]


# -- delivery timing -------------------------------------------------------------


def _tiny_config(**kw):
    base = dict(
        num_ses=2,
        density=2e-4,  # world side 100, everyone inside the 250 disc
        mobile_fraction=0.0,
        generation_prob=1.0,
        total_timesteps=3,
        l1_transport="loopback",
        seed=5,
    )
    base.update(kw)
    return SimConfig(**base)


def test_transmission_arrives_exactly_one_step_later():
    engine = SimEngine(_tiny_config())
    r0 = engine.advance_timestep(0)
    assert r0.generated == 2
    assert r0.delivered == 0
    r1 = engine.advance_timestep(1)
    assert r1.generated == 2
    assert r1.delivered == 2  # each receives the other's step-0 message
    # Threshold (200) exceeds any distance in a 100-unit world: no relays.
    assert r0.forwarded == r1.forwarded == 0
    assert r1.duplicates == 0


def test_delivery_crosses_stripe_boundaries():
    cfg = _tiny_config(num_ses=4, density=4e-4, num_lps=2, total_timesteps=2)
    result = run_simulation(cfg)
    totals = result.totals()
    assert totals["generated"] == 8
    # Step-0 messages land at step 1 on every other entity, wherever it lives.
    assert totals["delivered"] == 4 * 3
    assert totals["forwarded"] == 0


def test_fingerprint_is_reproducible_and_seed_sensitive():
    cfg = _tiny_config(mobile_fraction=0.5)
    a = run_simulation(cfg).fingerprint()
    b = run_simulation(cfg).fingerprint()
    assert a == b
    c = run_simulation(cfg.with_updates(seed=6)).fingerprint()
    assert a != c


def test_stepwise_driver_requires_single_stripe():
    engine = SimEngine(_tiny_config(num_lps=2))
    with pytest.raises(SimulationError):
        engine.advance_timestep(0)


# -- delegation lifecycle ---------------------------------------------------------


def test_delegate_entities_picks_nearest_to_stripe_centroid():
    cfg = SimConfig(num_ses=5, density=5e-4, total_timesteps=5, generation_prob=0.0)
    engine = SimEngine(cfg)
    lp = engine.lps[0]
    coords = {0: (50.0, 50.0), 1: (60.0, 50.0), 2: (40.0, 50.0), 3: (90.0, 90.0), 4: (10.0, 10.0)}
    for eid, (x, y) in coords.items():
        lp.entities[eid].x = x
        lp.entities[eid].y = y
    chosen = engine.delegate_entities(lp, SpawnTrigger(0, 0, 2))
    # Centroid is (50, 50); ids 1 and 2 tie at distance 10, lower id wins.
    assert [e.id for e in chosen] == [0, 1]
    assert set(lp.delegated) == {0, 1}
    assert all(e.status == STATUS_DELEGATED for e in chosen)
    assert set(lp.entities) == {2, 3, 4}

    with pytest.raises(SimulationError):
        engine.delegate_entities(lp, SpawnTrigger(0, 0, 4))


def test_delegated_receivers_are_counted_as_drops():
    cfg = SimConfig(
        num_ses=10,
        density=1e-3,  # world side 100
        mobile_fraction=0.0,
        generation_prob=1.0,
        total_timesteps=3,
        l1_schedule=(SpawnTrigger(0, 0, 3),),
        l1_transport="loopback",
        seed=11,
    )
    result = run_simulation(cfg)
    by_step = {r.timestep: r for r in result.reports}
    assert by_step[0].delegated == 3
    # While frozen, each of the ten step-0 discs covers all three absentees.
    assert by_step[1].dropped_delegated == 30
    assert by_step[1].delegated == 0  # reintegrated before its sessions phase
    assert by_step[2].dropped_delegated == 0
    assert result.totals()["dropped_delegated"] == 30
    # Exactly one session ran, touching three entities.
    (log,) = result.session_logs
    assert log.instance_id == "t0-lp0-0"
    assert len(log.entity_ids) == 3


def test_delegation_of_static_entities_leaves_positions_unchanged():
    base = SimConfig(
        num_ses=12,
        density=1.2e-3,
        mobile_fraction=0.0,
        generation_prob=0.0,
        total_timesteps=4,
        l1_transport="loopback",
        seed=21,
    )
    withdrawn = base.with_updates(l1_schedule=(SpawnTrigger(1, 0, 4),))
    plain = run_simulation(base)
    spawned = run_simulation(withdrawn)

    pos_plain = {e.id: (e.x, e.y) for e in plain.entities.values()}
    pos_spawned = {e.id: (e.x, e.y) for e in spawned.entities.values()}
    assert pos_plain.keys() == pos_spawned.keys()
    for eid, (x, y) in pos_plain.items():
        # Static entities sit still in the fine sim too; only 6-decimal wire
        # rounding may nudge the round trip.
        assert pos_spawned[eid][0] == pytest.approx(x, abs=1e-6)
        assert pos_spawned[eid][1] == pytest.approx(y, abs=1e-6)
    assert all(e.status == STATUS_ACTIVE for e in spawned.entities.values())

    by_step = {r.timestep: r for r in spawned.reports}
    assert by_step[1].delegated == 4
    assert by_step[2].delegated == 0
    assert {r.timestep: r.delegated for r in plain.reports} == {0: 0, 1: 0, 2: 0, 3: 0}


def test_conservation_reported_every_step():
    cfg = SimConfig(
        num_ses=20,
        density=2e-3,
        total_timesteps=5,
        generation_prob=0.1,
        l1_schedule=(SpawnTrigger(1, 0, 2), SpawnTrigger(3, 0, 5)),
        l1_transport="loopback",
        seed=8,
    )
    result = run_simulation(cfg)
    for report in result.reports:
        assert report.active + report.delegated == 20
    assert len(result.session_logs) == 2


# -- failure paths ----------------------------------------------------------------


def test_reintegration_outside_region_is_rejected():
    cfg = _tiny_config(generation_prob=0.0)
    engine = SimEngine(cfg)
    lp = engine.lps[0]
    eid = next(iter(lp.entities))
    entity = lp.entities.pop(eid)
    entity.status = STATUS_DELEGATED
    lp.delegated[eid] = entity
    bad = EntityRecord(eid, lp.x1 - lp.x0 + 1.0, 5.0, entity.kind)
    lp.pending_reint.append((entity, bad))
    with pytest.raises(ProtocolError, match="region-violation"):
        engine.advance_timestep(0)


def test_session_failure_aborts_run_with_instance_name(monkeypatch):
    def broken(init):
        raise RuntimeError("instance refused to start")

    monkeypatch.setattr(level1, "make_handlers", broken)
    cfg = SimConfig(
        num_ses=6,
        density=6e-4,
        total_timesteps=2,
        generation_prob=0.0,
        l1_schedule=(SpawnTrigger(0, 0, 2),),
        l1_transport="loopback",
        seed=3,
    )
    with pytest.raises(SimulationError, match="t0-lp0-0"):
        run_simulation(cfg)


def test_unknown_entity_in_final_is_rejected(monkeypatch):
    from iotsim.protocol import Counters, InstanceHandlers

    def alien_handlers(init):
        fake = (EntityRecord(424242, 1.0, 1.0, "static"),)
        return InstanceHandlers(
            run_step=lambda t: (fake, Counters()),
            finalize=lambda: (fake, Counters()),
        )

    monkeypatch.setattr(level1, "make_handlers", alien_handlers)
    cfg = SimConfig(
        num_ses=6,
        density=6e-4,
        total_timesteps=2,
        generation_prob=0.0,
        l1_schedule=(SpawnTrigger(0, 0, 2),),
        l1_transport="loopback",
        seed=3,
    )
    with pytest.raises(SimulationError):
        run_simulation(cfg)


# -- stripe-count transparency (small here; the big run is an acceptance check) ---


def test_small_run_is_identical_for_any_stripe_count():
    base = SimConfig(
        num_ses=100,
        total_timesteps=10,
        generation_prob=0.05,
        seed=77,
    )
    prints = [
        run_simulation(base.with_updates(num_lps=k)).fingerprint() for k in (1, 2, 4)
    ]
    assert prints[0] == prints[1] == prints[2]


# -- audit arithmetic ---------------------------------------------------------------


def _dummy_msg(origin, seq, ttl, trace):
    return DisseminationMessage((origin, seq), origin, 0, ttl, trace)


def test_audit_tracks_extremes_and_duplicates():
    audit = DeliveryAudit(record_receipts=True)
    audit.on_receipt(_dummy_msg(1, 0, 3, (1,)), receiver_id=5)
    audit.on_receipt(_dummy_msg(1, 0, 2, (1, 5)), receiver_id=6)
    audit.on_receipt(_dummy_msg(1, 0, 2, (1, 5)), receiver_id=6)
    audit.on_receipt(_dummy_msg(2, 0, 1, (2, 3, 4)), receiver_id=5)
    assert audit.max_trace_len == 3
    assert audit.min_ttl_seen == 1
    assert audit.receiver_sets() == {(1, 0): frozenset({5, 6}), (2, 0): frozenset({5})}
    assert audit.duplicate_deliveries() == 1

    other = DeliveryAudit(record_receipts=True)
    other.on_receipt(_dummy_msg(1, 0, 0, (1, 5, 6, 7)), receiver_id=9)
    audit.merge(other)
    assert audit.max_trace_len == 4
    assert audit.min_ttl_seen == 0
    assert audit.duplicate_deliveries() == 1
    assert audit.receiver_sets()[(1, 0)] == frozenset({5, 6, 9})
