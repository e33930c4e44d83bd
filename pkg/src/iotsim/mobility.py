"""Random waypoint mobility on the torus."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .config import SimConfig
from .world import ToroidalWorld


@dataclass(slots=True)
class RwpState:
    """Current leg of a random-waypoint walker."""

    waypoint_x: float
    waypoint_y: float
    speed: float


def draw_waypoint(world: ToroidalWorld, rng: random.Random) -> tuple[float, float]:
    return rng.uniform(0.0, world.width), rng.uniform(0.0, world.height)


def initial_rwp_state(
    world: ToroidalWorld, speed_min: float, speed_max: float, rng: random.Random
) -> RwpState:
    wx, wy = draw_waypoint(world, rng)
    return RwpState(wx, wy, rng.uniform(speed_min, speed_max))


def rwp_step(
    world: ToroidalWorld,
    x: float,
    y: float,
    state: RwpState,
    speed_min: float,
    speed_max: float,
    rng: random.Random,
) -> tuple[float, float]:
    """Advance one timestep toward the waypoint; mutates ``state`` on arrival.

    Movement follows the direct (unwrapped) segment to the waypoint, one speed
    unit of distance per timestep.  On arrival the walker snaps to the
    waypoint and immediately draws a new leg (waypoint and speed), with no
    pause.  Overshoot within a step is not carried over.
    """
    dx = state.waypoint_x - x
    dy = state.waypoint_y - y
    dist = math.hypot(dx, dy)
    if dist <= state.speed:
        nx, ny = state.waypoint_x, state.waypoint_y
        wx, wy = draw_waypoint(world, rng)
        state.waypoint_x = wx
        state.waypoint_y = wy
        state.speed = rng.uniform(speed_min, speed_max)
        return world.wrap(nx, ny)
    return world.wrap(x + state.speed * dx / dist, y + state.speed * dy / dist)


def assign_mobility(config: SimConfig, ids: list[int], rng: random.Random) -> set[int]:
    """Pick which entities move; the rest stay static for the whole run."""
    count = int(math.floor(config.mobile_fraction * len(ids)))
    return set(rng.sample(ids, count))
