"""Coarse time-stepped engine: parallel logical processes over world stripes.

The world is split into equal vertical stripes, one logical process (LP) per
stripe, one worker thread per LP.  Each timestep runs in fixed phases:

  (1) deliver the transmissions staged for this step (local and remote alike:
      every transmission is received exactly one step after it was emitted),
  (2) per receiver, run cache/relay decisions; stage relayed copies and fresh
      generations for the next step,
  (3) step mobility,
  (4) apply pending reintegrations, then migrate entities whose position
      crossed a stripe boundary,
  (5) process this step's spawn triggers: delegate entities and drive each
      fine-grained session to completion,
  (6) barrier: no LP enters step t+1 before all finish t.

Determinism does not depend on the partitioning: in-loop random decisions are
stateless hashes of (seed, purpose, ids), transmissions are routed to every
stripe their interaction disc touches, and each receiver consumes deliveries
in a canonical order.
"""

from __future__ import annotations

import math
import subprocess
import sys
import threading
import time
from collections import Counter as TallyCounter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .config import SimConfig, SpawnTrigger
from .dissemination import DisseminationMessage, MsgId, generate_message, relay_step
from .mobility import rwp_step
from .model import (
    Entity,
    STATUS_ACTIVE,
    STATUS_DELEGATED,
    make_entities,
)
from .protocol import (
    Counters,
    EntityRecord,
    Init,
    ProtocolError,
    SessionClient,
    Transport,
    connect_tcp,
    loopback_pair,
    serve_session,
)
from .world import ToroidalWorld

# Slack for 6-decimal wire rounding when validating reintegrated positions.
REGION_TOL = 1e-5


class SimulationError(RuntimeError):
    pass


@dataclass(slots=True)
class LogicalProcess:
    """One vertical stripe of the world and the entities it owns."""

    lp_id: int
    x0: float
    x1: float
    entities: dict[int, Entity] = field(default_factory=dict)
    delegated: dict[int, Entity] = field(default_factory=dict)
    pending_reint: list[tuple[Entity, EntityRecord]] = field(default_factory=list)


def partition(config: SimConfig, entities: list[Entity], world: ToroidalWorld) -> list[LogicalProcess]:
    """Equal-width stripes; each entity goes to the stripe holding its x."""
    n = config.num_lps
    lps = [LogicalProcess(i, i * world.width / n, (i + 1) * world.width / n) for i in range(n)]
    stripe_w = world.width / n
    for e in entities:
        idx = min(int(e.x / stripe_w), n - 1)
        lps[idx].entities[e.id] = e
    return lps


@dataclass(frozen=True, slots=True)
class TimestepReport:
    timestep: int
    generated: int
    forwarded: int
    delivered: int
    duplicates: int
    dropped_delegated: int
    active: int
    delegated: int
    lp_wct: tuple[float, ...]


@dataclass(slots=True)
class SessionLog:
    instance_id: str
    lp_id: int
    at_timestep: int
    entity_ids: tuple[int, ...]
    wct_start: float
    wct_end: float
    counters: Counters
    child_peak_rss: Optional[int]
    transcript: Optional[list[tuple[str, bytes]]]

    @property
    def wct(self) -> float:
        return self.wct_end - self.wct_start


class DeliveryAudit:
    """Receipt-level bookkeeping: hop-budget extremes, optional full tallies."""

    def __init__(self, record_receipts: bool = False) -> None:
        self.record_receipts = record_receipts
        self.max_trace_len = 0
        self.min_ttl_seen: Optional[int] = None
        self.receipts: dict[MsgId, TallyCounter] = {}

    def on_receipt(self, msg: DisseminationMessage, receiver_id: int) -> None:
        if len(msg.hop_trace) > self.max_trace_len:
            self.max_trace_len = len(msg.hop_trace)
        if self.min_ttl_seen is None or msg.ttl_remaining < self.min_ttl_seen:
            self.min_ttl_seen = msg.ttl_remaining
        if self.record_receipts:
            self.receipts.setdefault(msg.msg_id, TallyCounter())[receiver_id] += 1

    def merge(self, other: "DeliveryAudit") -> None:
        self.max_trace_len = max(self.max_trace_len, other.max_trace_len)
        if other.min_ttl_seen is not None:
            if self.min_ttl_seen is None or other.min_ttl_seen < self.min_ttl_seen:
                self.min_ttl_seen = other.min_ttl_seen
        for msg_id, tally in other.receipts.items():
            self.receipts.setdefault(msg_id, TallyCounter()).update(tally)

    def receiver_sets(self) -> dict[MsgId, frozenset[int]]:
        return {m: frozenset(t) for m, t in self.receipts.items()}

    def duplicate_deliveries(self) -> int:
        """Receipts beyond the first per (message, receiver) pair."""
        return sum(sum(t.values()) - len(t) for t in self.receipts.values())


@dataclass(slots=True)
class RunResult:
    config: SimConfig
    entities: dict[int, Entity]
    reports: list[TimestepReport]
    session_logs: list[SessionLog]
    audit: DeliveryAudit
    total_wct: float

    def totals(self) -> dict[str, int]:
        out = {"generated": 0, "forwarded": 0, "delivered": 0, "duplicates": 0, "dropped_delegated": 0}
        for r in self.reports:
            out["generated"] += r.generated
            out["forwarded"] += r.forwarded
            out["delivered"] += r.delivered
            out["duplicates"] += r.duplicates
            out["dropped_delegated"] += r.dropped_delegated
        return out

    def fingerprint(self) -> tuple:
        """Order-independent digest of the end state, for equality checks."""
        totals = self.totals()
        per_step = tuple(
            (r.timestep, r.generated, r.forwarded, r.delivered, r.duplicates) for r in self.reports
        )
        positions = tuple(
            (e.id, round(e.x, 9), round(e.y, 9)) for e in sorted(self.entities.values(), key=lambda e: e.id)
        )
        return (tuple(sorted(totals.items())), per_step, positions)


# One transmission in flight: the message plus where it was emitted from.
_Tx = tuple[DisseminationMessage, int, float, float]


class SimEngine:
    """Builds the world, runs the step loop, owns all cross-LP plumbing."""

    def __init__(
        self,
        config: SimConfig,
        record_receipts: bool = False,
        keep_transcripts: bool = False,
    ) -> None:
        self.config = config
        self.world = config.make_world()
        self.record_receipts = record_receipts
        self.keep_transcripts = keep_transcripts
        entities = make_entities(config, self.world)
        self.lps = partition(config, entities, self.world)
        n = config.num_lps
        self.stripe_w = self.world.width / n
        self.triggers: dict[tuple[int, int], list[SpawnTrigger]] = {}
        for trig in config.l1_schedule:
            self.triggers.setdefault((trig.at_timestep, trig.lp_id), []).append(trig)

        # inbox[parity][target][source]: transmissions staged for delivery.
        self._inbox: list[list[list[list[_Tx]]]] = [
            [[[] for _ in range(n)] for _ in range(n)] for _ in range(2)
        ]
        self._migrations: list[list[list[Entity]]] = [[[] for _ in range(n)] for _ in range(n)]
        self._parts: list[Optional[dict]] = [None] * n
        self._audits = [DeliveryAudit(record_receipts) for _ in range(n)]
        self._epochs = [0] * n
        self._reports: list[TimestepReport] = []
        self.session_logs: list[SessionLog] = []
        self._logs_lock = threading.Lock()
        self._failure: Optional[BaseException] = None
        self._failure_lock = threading.Lock()
        self._b_deliver = threading.Barrier(n)
        self._b_migrate = threading.Barrier(n)
        self._b_step = threading.Barrier(n, action=self._end_of_step)

    # -- failure handling ----------------------------------------------------

    def _fail(self, exc: BaseException) -> None:
        with self._failure_lock:
            if self._failure is None:
                self._failure = exc
        for b in (self._b_deliver, self._b_migrate, self._b_step):
            b.abort()

    # -- step phases ----------------------------------------------------------

    def _stripe_of(self, x: float) -> int:
        return min(int(x / self.stripe_w), self.config.num_lps - 1)

    def _target_lps(self, sx: float) -> tuple[int, ...]:
        """Stripes whose region intersects [sx - R, sx + R] on the torus."""
        n = self.config.num_lps
        if n == 1:
            return (0,)
        radius = self.config.interaction_range
        if 2 * radius >= self.world.width:
            return tuple(range(n))
        i0 = math.floor((sx - radius) / self.stripe_w)
        i1 = math.floor((sx + radius) / self.stripe_w)
        return tuple(sorted({i % n for i in range(i0, i1 + 1)}))

    def _phase_deliver(self, lp: LogicalProcess, t: int, part: dict) -> None:
        cfg = self.config
        world = self.world
        audit = self._audits[lp.lp_id]
        cur = self._inbox[t % 2][lp.lp_id]
        txs: list[_Tx] = []
        for cell in cur:
            txs.extend(cell)
            cell.clear()
        # Canonical order: every receiver's cache sees the same sequence no
        # matter which LP staged each transmission.
        txs.sort(key=lambda tx: (tx[0].msg_id, tx[1]))

        outgoing: list[_Tx] = []
        n_active = len(lp.entities)
        if txs and n_active:
            ids = np.fromiter(lp.entities.keys(), dtype=np.int64, count=n_active)
            xs = np.fromiter((e.x for e in lp.entities.values()), dtype=np.float64, count=n_active)
            ys = np.fromiter((e.y for e in lp.entities.values()), dtype=np.float64, count=n_active)
        else:
            ids = xs = ys = None
        n_deleg = len(lp.delegated)
        if txs and n_deleg:
            dxs = np.fromiter((e.x for e in lp.delegated.values()), dtype=np.float64, count=n_deleg)
            dys = np.fromiter((e.y for e in lp.delegated.values()), dtype=np.float64, count=n_deleg)
        else:
            dxs = dys = None
        r2 = cfg.interaction_range * cfg.interaction_range
        width, height = world.width, world.height

        for msg, sender_id, sx, sy in txs:
            if ids is not None:
                dx = np.abs(xs - sx)
                np.minimum(dx, width - dx, out=dx)
                dy = np.abs(ys - sy)
                np.minimum(dy, height - dy, out=dy)
                close = np.nonzero(dx * dx + dy * dy <= r2)[0]
                for i in close:
                    rid = int(ids[i])
                    if rid == sender_id:
                        continue
                    entity = lp.entities[rid]
                    dist = math.hypot(float(dx[i]), float(dy[i]))
                    draw = rng.unit_uniform(cfg.seed, rng.FORWARD, rid, msg.msg_id[0], msg.msg_id[1])
                    outcome = relay_step(entity.cache, rid, msg, dist, draw, cfg)
                    audit.on_receipt(msg, rid)
                    if outcome.duplicate:
                        part["duplicates"] += 1
                    elif outcome.delivered:
                        part["delivered"] += 1
                    if outcome.forwarded is not None:
                        part["forwarded"] += 1
                        outgoing.append((outcome.forwarded, rid, entity.x, entity.y))
            if dxs is not None:
                # Frozen receivers get nothing; the drop is still accounted.
                ddx = np.abs(dxs - sx)
                np.minimum(ddx, width - ddx, out=ddx)
                ddy = np.abs(dys - sy)
                np.minimum(ddy, height - ddy, out=ddy)
                part["dropped_delegated"] += int(np.count_nonzero(ddx * ddx + ddy * ddy <= r2))

        # Fresh traffic, in id order so staging order is reproducible.
        gen_prob = cfg.generation_prob
        if gen_prob > 0:
            for eid in sorted(lp.entities):
                if rng.unit_uniform(cfg.seed, rng.GENERATION, eid, t) < gen_prob:
                    entity = lp.entities[eid]
                    msg = generate_message(eid, entity.next_seq, t, cfg)
                    entity.next_seq += 1
                    entity.cache.touch(msg.msg_id)  # never re-deliver to self
                    part["generated"] += 1
                    outgoing.append((msg, eid, entity.x, entity.y))

        nxt = self._inbox[(t + 1) % 2]
        for tx in outgoing:
            for tgt in self._target_lps(tx[2]):
                nxt[tgt][lp.lp_id].append(tx)

    def _phase_mobility(self, lp: LogicalProcess) -> None:
        cfg = self.config
        for entity in lp.entities.values():
            if entity.kind == "mobile":
                entity.x, entity.y = rwp_step(
                    self.world,
                    entity.x,
                    entity.y,
                    entity.mobility,
                    cfg.speed_min,
                    cfg.speed_max,
                    entity.mob_rng,
                )

    def _phase_migrate_out(self, lp: LogicalProcess) -> None:
        # Reintegrations from last step's sessions re-enter here, then the
        # normal stripe sweep re-homes whoever moved.
        for entity, record in lp.pending_reint:
            lx, ly = record.x, record.y
            if not (-REGION_TOL <= lx <= (lp.x1 - lp.x0) + REGION_TOL) or not (
                -REGION_TOL <= ly <= self.world.height + REGION_TOL
            ):
                raise ProtocolError(
                    "region-violation",
                    f"entity {entity.id} returned at local ({lx}, {ly}), outside its region",
                )
            entity.x, entity.y = self.world.wrap(lp.x0 + lx, ly)
            entity.status = STATUS_ACTIVE
            del lp.delegated[entity.id]
            lp.entities[entity.id] = entity
        lp.pending_reint.clear()

        me = lp.lp_id
        for eid in [e.id for e in lp.entities.values() if self._stripe_of(e.x) != me]:
            entity = lp.entities.pop(eid)
            self._migrations[self._stripe_of(entity.x)][me].append(entity)

    def _phase_migrate_in(self, lp: LogicalProcess) -> None:
        for cell in self._migrations[lp.lp_id]:
            for entity in cell:
                lp.entities[entity.id] = entity
            cell.clear()

    # -- delegation and sessions ----------------------------------------------

    def delegate_entities(self, lp: LogicalProcess, trigger: SpawnTrigger) -> list[Entity]:
        """Pick and freeze the entities nearest the stripe centroid."""
        if len(lp.entities) < trigger.entity_count:
            raise SimulationError(
                f"trigger at t={trigger.at_timestep} lp={trigger.lp_id} wants "
                f"{trigger.entity_count} entities, LP owns {len(lp.entities)}"
            )
        cx = (lp.x0 + lp.x1) / 2.0
        cy = self.world.height / 2.0
        chosen = sorted(
            lp.entities.values(), key=lambda e: ((e.x - cx) ** 2 + (e.y - cy) ** 2, e.id)
        )[: trigger.entity_count]
        for entity in chosen:
            del lp.entities[entity.id]
            entity.status = STATUS_DELEGATED
            lp.delegated[entity.id] = entity
        return chosen

    def _session_init(
        self, lp: LogicalProcess, chosen: list[Entity], instance_id: str, t: int, index: int
    ) -> Init:
        records = tuple(
            EntityRecord(id=e.id, x=e.x - lp.x0, y=e.y, kind=e.kind)
            for e in sorted(chosen, key=lambda e: e.id)
        )
        seed = rng.mix(self.config.seed, rng.LEVEL1, t, lp.lp_id, index)
        return Init(
            instance_id=instance_id,
            seed=seed,
            grid_side=self.config.l1_grid_side,
            fine_steps=self.config.l1_fine_steps_per_timestep,
            entities=records,
        )

    def _run_session(self, lp: LogicalProcess, trigger: SpawnTrigger, t: int, index: int) -> None:
        instance_id = f"t{t}-lp{lp.lp_id}-{index}"
        chosen = self.delegate_entities(lp, trigger)
        init = self._session_init(lp, chosen, instance_id, t, index)
        transcript: Optional[list] = [] if self.keep_transcripts else None
        started = time.perf_counter()
        try:
            if self.config.l1_transport == "loopback":
                final, child_rss = _drive_loopback(init, t, transcript)
            else:
                final, child_rss = _drive_subprocess(init, t, transcript)
        except Exception as exc:
            raise SimulationError(f"L1 session {instance_id} failed: {exc}") from exc
        ended = time.perf_counter()

        for record in final.entities:
            entity = lp.delegated.get(record.id)
            if entity is None:
                raise SimulationError(
                    f"L1 session {instance_id} returned unknown entity {record.id}"
                )
            lp.pending_reint.append((entity, record))
        log = SessionLog(
            instance_id=instance_id,
            lp_id=lp.lp_id,
            at_timestep=t,
            entity_ids=tuple(r.id for r in init.entities),
            wct_start=started,
            wct_end=ended,
            counters=final.counters,
            child_peak_rss=child_rss,
            transcript=transcript,
        )
        with self._logs_lock:
            self.session_logs.append(log)

    def _phase_sessions(self, lp: LogicalProcess, t: int) -> None:
        for index, trigger in enumerate(self.triggers.get((t, lp.lp_id), ())):
            self._run_session(lp, trigger, t, index)

    # -- step driver ------------------------------------------------------------

    def _lp_step(self, lp: LogicalProcess, t: int) -> None:
        step_start = time.perf_counter()
        self._epochs[lp.lp_id] = t
        part = {
            "generated": 0,
            "forwarded": 0,
            "delivered": 0,
            "duplicates": 0,
            "dropped_delegated": 0,
        }
        self._phase_deliver(lp, t, part)
        self._b_deliver.wait()
        self._phase_mobility(lp)
        self._phase_migrate_out(lp)
        self._b_migrate.wait()
        self._phase_migrate_in(lp)
        self._phase_sessions(lp, t)
        part["active"] = len(lp.entities)
        part["delegated"] = len(lp.delegated)
        part["timestep"] = t
        part["wct"] = time.perf_counter() - step_start
        self._parts[lp.lp_id] = part
        self._b_step.wait()

    def _end_of_step(self) -> None:
        # Runs in exactly one worker while the rest hold at the step barrier.
        parts = self._parts
        epochs = set(self._epochs)
        if len(epochs) != 1:
            raise SimulationError(f"barrier epoch mismatch: {self._epochs}")
        t = parts[0]["timestep"]
        report = TimestepReport(
            timestep=t,
            generated=sum(p["generated"] for p in parts),
            forwarded=sum(p["forwarded"] for p in parts),
            delivered=sum(p["delivered"] for p in parts),
            duplicates=sum(p["duplicates"] for p in parts),
            dropped_delegated=sum(p["dropped_delegated"] for p in parts),
            active=sum(p["active"] for p in parts),
            delegated=sum(p["delegated"] for p in parts),
            lp_wct=tuple(p["wct"] for p in parts),
        )
        if report.active + report.delegated != self.config.num_ses:
            raise SimulationError(
                f"conservation broken at t={t}: {report.active} active "
                f"+ {report.delegated} delegated != {self.config.num_ses}"
            )
        self._reports.append(report)

    def _worker(self, lp: LogicalProcess) -> None:
        try:
            for t in range(self.config.total_timesteps):
                self._lp_step(lp, t)
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:  # noqa: BLE001 - must surface on the main thread
            self._fail(exc)
            return

    def advance_timestep(self, t: int) -> TimestepReport:
        """Single-LP stepwise driver (unit tests and interactive probing)."""
        if self.config.num_lps != 1:
            raise SimulationError("stepwise driving requires num_lps == 1")
        self._lp_step(self.lps[0], t)
        if self._failure is not None:
            raise SimulationError(str(self._failure)) from self._failure
        return self._reports[-1]

    def run(self) -> RunResult:
        start = time.perf_counter()
        if self.config.num_lps == 1:
            self._worker(self.lps[0])
        else:
            threads = [
                threading.Thread(target=self._worker, args=(lp,), name=f"lp{lp.lp_id}")
                for lp in self.lps
            ]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        if self._failure is not None:
            raise SimulationError(f"run aborted: {self._failure}") from self._failure

        # A trigger on the last step leaves reintegrations pending; apply them
        # so the final state is whole (the sessions did complete).
        for lp in self.lps:
            for entity, record in lp.pending_reint:
                entity.x, entity.y = self.world.wrap(lp.x0 + record.x, record.y)
                entity.status = STATUS_ACTIVE
                del lp.delegated[entity.id]
                lp.entities[entity.id] = entity
            lp.pending_reint.clear()

        audit = DeliveryAudit(self.record_receipts)
        for part in self._audits:
            audit.merge(part)
        entities: dict[int, Entity] = {}
        for lp in self.lps:
            entities.update(lp.entities)
            entities.update(lp.delegated)
        return RunResult(
            config=self.config,
            entities=entities,
            reports=self._reports,
            session_logs=self.session_logs,
            audit=audit,
            total_wct=time.perf_counter() - start,
        )


def run_simulation(
    config: SimConfig, record_receipts: bool = False, keep_transcripts: bool = False
) -> RunResult:
    return SimEngine(config, record_receipts, keep_transcripts).run()


# -- session transports -------------------------------------------------------


def _drive_session(client: SessionClient, init: Init, t: int):
    client.handshake(init)
    client.step(t)
    return client.finish()


def _drive_loopback(init: Init, t: int, transcript):
    from .level1 import make_handlers

    client_side, server_side = loopback_pair(transcript_a=transcript)
    server_exc: list[BaseException] = []

    def serve() -> None:
        try:
            serve_session(server_side, make_handlers)
        except BaseException as exc:  # noqa: BLE001 - reported via the client side
            server_exc.append(exc)
        finally:
            server_side.close()

    thread = threading.Thread(target=serve, name=f"l1-{init.instance_id}", daemon=True)
    thread.start()
    try:
        final = _drive_session(SessionClient(client_side), init, t)
    finally:
        client_side.close()
        thread.join(timeout=30)
    if server_exc and not isinstance(server_exc[0], ProtocolError):
        raise SimulationError(f"instance crashed: {server_exc[0]}")
    return final, None


def _drive_subprocess(init: Init, t: int, transcript):
    cmd = [
        sys.executable,
        "-m",
        "iotsim",
        "l1-server",
        "--port",
        "0",
        "--instance-id",
        init.instance_id,
    ]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    transport: Optional[Transport] = None
    try:
        line = proc.stdout.readline()
        if not line.startswith("PORT="):
            err = proc.stderr.read() if proc.stderr else ""
            raise SimulationError(f"instance did not report a port: {line!r} {err.strip()}")
        port = int(line.strip().split("=", 1)[1])
        transport = connect_tcp(port, transcript=transcript)
        final = _drive_session(SessionClient(transport), init, t)
    except BaseException:
        proc.kill()
        proc.communicate()
        raise
    finally:
        if transport is not None:
            transport.close()
    out, err = proc.communicate(timeout=30)
    if proc.returncode != 0:
        raise SimulationError(f"instance exited with {proc.returncode}: {err.strip()}")
    child_rss = None
    for out_line in out.splitlines():
        if out_line.startswith("VMHWM="):
            child_rss = int(out_line.split("=", 1)[1])
    return final, child_rss
