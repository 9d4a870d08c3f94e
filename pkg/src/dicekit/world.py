"""Synthetic driving worlds and a deterministic kinematic replay simulator.

Generation draws one of four road archetypes (straight road, signalized
intersection, double-parked blocker, crosswalk), populates it with agent
trajectories, and with probability ``hazard`` injects one adversarial event
whose sampled severity controls how avoidable it is.  The ego row of the
track tensor is produced by rolling out a fixed internal "logging driver"
policy against the drafted agents, so logged behavior (braking, stopping)
reflects the scene the way a recorded log would.

``simulate`` re-drives the ego row with a configurable policy parameterization
(the software version under test) while every other track replays its logged
trajectory verbatim.  Outcomes are collision (any oriented-rectangle overlap
with a live agent), the first collision step, and the minimum clearance over
the horizon.  Everything is deterministic given (config seed, scenario index,
policy params).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Iterable

import numpy as np

from . import kernels
from .binio import MAGIC_OUTCOMES, Reader, Writer
from .scene import (
    POINT_EXIST,
    POLYLINE_CLASSES,
    SIGNAL_STATES,
    TRACK_CLASSES,
    TRACK_EXIST,
    Polylines,
    Scenario,
    ScenarioDims,
    SignalTensor,
    TrackTensor,
)

OUTCOME_FORMAT_VERSION = 1

LANE_WIDTH = 3.5
EGO_LENGTH = 4.6
EGO_WIDTH = 1.9
ROUTE_BEHIND = 10.0
ROUTE_AHEAD = 260.0

ARCHETYPES = ("straight_road", "intersection", "double_parked", "crosswalk")

_CLS_INDEX = {name: i for i, name in enumerate(TRACK_CLASSES)}
_POLY_INDEX = {name: i for i, name in enumerate(POLYLINE_CLASSES)}
_STATE_INDEX = {name: i for i, name in enumerate(SIGNAL_STATES)}


@dataclass(frozen=True)
class EgoPolicyParams:
    """Rule-based ego parameterization: one deterministic software version.

    The policy follows the lane centerline at a target speed and brakes at
    ``decel_limit`` whenever a corridor agent is inside ``standstill_gap`` or
    its time-to-contact drops under ``ttc_threshold``.
    """

    ttc_threshold: float = 2.0
    decel_limit: float = 6.0
    accel_limit: float = 1.5
    standstill_gap: float = 2.0
    horizon: float = 60.0
    lat_margin: float = 0.4
    version: str = "v1"

    def __post_init__(self):
        if not (self.ttc_threshold >= 0.0):
            raise ValueError(f"ttc_threshold must be >= 0, got {self.ttc_threshold}")
        if not (self.decel_limit > 0.0):
            raise ValueError(f"decel_limit must be > 0, got {self.decel_limit}")
        if not (self.accel_limit > 0.0):
            raise ValueError(f"accel_limit must be > 0, got {self.accel_limit}")
        if not (self.standstill_gap >= 0.0):
            raise ValueError(f"standstill_gap must be >= 0, got {self.standstill_gap}")
        if not (self.horizon > 0.0):
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    def to_json(self) -> dict:
        return {
            "ttc_threshold": self.ttc_threshold,
            "decel_limit": self.decel_limit,
            "accel_limit": self.accel_limit,
            "standstill_gap": self.standstill_gap,
            "horizon": self.horizon,
            "lat_margin": self.lat_margin,
            "version": self.version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EgoPolicyParams":
        return cls(**obj)


# The driver that produced the logs: brakes earlier and harder than the
# default version under test, the way a cautious human or mature stack would.
LOGGING_DRIVER = EgoPolicyParams(
    ttc_threshold=2.6, decel_limit=7.5, accel_limit=1.5, version="logging"
)


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for corpus generation; fully determines content given a seed."""

    seed: int = 0
    hazard: float = 0.1
    archetype_mix: dict = field(
        default_factory=lambda: {
            "straight_road": 0.45,
            "intersection": 0.20,
            "double_parked": 0.15,
            "crosswalk": 0.20,
        }
    )
    agent_count: tuple[int, int] = (0, 9)
    speed_range: tuple[float, float] = (5.0, 15.0)
    dt: float = 0.5
    dims: ScenarioDims = field(default_factory=ScenarioDims)

    def __post_init__(self):
        if not (0.0 <= self.hazard <= 1.0):
            raise ValueError(f"hazard must lie in [0, 1], got {self.hazard}")
        unknown = set(self.archetype_mix) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes in mix: {sorted(unknown)}")
        total = sum(self.archetype_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"archetype mix must sum to 1, got {total}")
        if any(p < 0 for p in self.archetype_mix.values()):
            raise ValueError("archetype mix entries must be non-negative")
        lo, hi = self.agent_count
        if not (0 <= lo <= hi):
            raise ValueError(f"agent_count range must satisfy 0 <= lo <= hi, got {self.agent_count}")
        if hi > self.dims.max_tracks - 1:
            raise ValueError(
                f"agent_count upper bound {hi} exceeds non-ego track slots "
                f"{self.dims.max_tracks - 1}"
            )
        slo, shi = self.speed_range
        if not (0.0 < slo <= shi):
            raise ValueError(f"speed_range must satisfy 0 < lo <= hi, got {self.speed_range}")
        if not (self.dt > 0.0):
            raise ValueError(f"dt must be > 0, got {self.dt}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "hazard": self.hazard,
            "archetype_mix": dict(self.archetype_mix),
            "agent_count": list(self.agent_count),
            "speed_range": list(self.speed_range),
            "dt": self.dt,
            "dims": self.dims.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldConfig":
        obj = dict(obj)
        if "dims" in obj:
            obj["dims"] = ScenarioDims.from_json(obj["dims"])
        if "agent_count" in obj:
            obj["agent_count"] = tuple(obj["agent_count"])
        if "speed_range" in obj:
            obj["speed_range"] = tuple(obj["speed_range"])
        return cls(**obj)


@dataclass(frozen=True)
class OrientedBox:
    """Axis-free rectangle: center, unit heading (sin/cos), extents."""

    cx: float
    cy: float
    heading_sin: float
    heading_cos: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError(f"box extents must be positive, got {self.length} x {self.width}")
        norm = self.heading_sin**2 + self.heading_cos**2
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"heading (sin, cos) must be unit norm, got norm^2 = {norm}")


def obb_clearance(a: OrientedBox, b: OrientedBox) -> float:
    """Separating-axis gap; positive means disjoint, <= 0 means overlap."""
    return float(
        kernels.sat_gap(
            a.cx, a.cy, a.heading_sin, a.heading_cos, a.length, a.width,
            b.cx, b.cy, b.heading_sin, b.heading_cos, b.length, b.width,
        )
    )


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    return obb_clearance(a, b) <= 0.0


@dataclass(frozen=True)
class SimOutcome:
    """Result of re-driving one scenario under one policy version."""

    scenario_id: str
    collision: bool
    collision_time: int | None
    min_clearance: float
    policy_version: str

    @property
    def label(self) -> int:
        return 1 if self.collision else 0

    def __post_init__(self):
        if self.collision:
            if self.collision_time is None or not (self.min_clearance <= 0.0):
                raise ValueError("collision outcomes need a step index and clearance <= 0")
        elif self.collision_time is not None:
            raise ValueError("collision_time must be None when no collision occurred")


# ---------------------------------------------------------------------------
# Agent drafting
# ---------------------------------------------------------------------------


@dataclass
class _Agent:
    cls_name: str
    xy: np.ndarray        # [T, 2]
    vel: np.ndarray       # [T, 2]
    heading: np.ndarray   # [T, 2] as (sin, cos)
    exist: np.ndarray     # [T] bool
    length: float
    width: float


@dataclass
class _Draft:
    archetype: str
    route: np.ndarray     # [P, 2] dense ego centerline
    v_target: float
    agents: list
    poly_specs: list      # (class_name, points [K, 2], width)
    signals: list         # (pose 4-tuple, state index array [T])


def _vehicle_dims(rng) -> tuple[float, float]:
    return float(rng.uniform(4.2, 5.2)), float(rng.uniform(1.75, 1.95))


def _const_heading(T: int, hx: float, hy: float) -> np.ndarray:
    h = np.empty((T, 2))
    h[:, 0] = hy
    h[:, 1] = hx
    return h


def _cruiser(rng, T, dt, x0, lane_y, direction, speed, cls_name="vehicle",
             length=None, width=None) -> _Agent:
    """Constant-speed lane follower with a little lateral wobble."""
    if length is None:
        length, width = _vehicle_dims(rng)
        if cls_name == "cyclist":
            length, width = 1.8, 0.6
    t = np.arange(T) * dt
    amp = rng.uniform(0.0, 0.12)
    freq = rng.uniform(0.04, 0.12)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    xy = np.empty((T, 2))
    xy[:, 0] = x0 + direction * speed * t
    xy[:, 1] = lane_y + amp * np.sin(2.0 * math.pi * freq * t + phase)
    vel = np.zeros((T, 2))
    vel[:, 0] = direction * speed
    return _Agent(cls_name, xy, vel, _const_heading(T, float(direction), 0.0),
                  np.ones(T, dtype=bool), length, width)


def _stationary(rng, T, x, y, hx=1.0, hy=0.0, cls_name="vehicle",
                length=None, width=None, reveal_step=0) -> _Agent:
    if length is None:
        if cls_name == "vehicle":
            length, width = _vehicle_dims(rng)
        elif cls_name == "cone":
            length, width = 0.35, 0.35
        else:
            length, width = 0.5, 0.5
    xy = np.full((T, 2), (x, y), dtype=float)
    exist = np.arange(T) >= reveal_step
    return _Agent(cls_name, xy, np.zeros((T, 2)), _const_heading(T, hx, hy),
                  exist, length, width)


def _walker(rng, T, dt, start_xy, dir_xy, speed, walk_from=0.0,
            reveal_gate=None) -> _Agent:
    """Pedestrian: stands at start, walks along dir from time walk_from (s)."""
    t = np.arange(T) * dt
    progress = np.maximum(0.0, t - walk_from) * speed
    xy = np.empty((T, 2))
    xy[:, 0] = start_xy[0] + dir_xy[0] * progress
    xy[:, 1] = start_xy[1] + dir_xy[1] * progress
    vel = np.zeros((T, 2))
    moving = t >= walk_from
    vel[moving, 0] = dir_xy[0] * speed
    vel[moving, 1] = dir_xy[1] * speed
    exist = np.ones(T, dtype=bool)
    if reveal_gate is not None:
        exist = reveal_gate(xy)
    return _Agent("pedestrian", xy, vel, _const_heading(T, dir_xy[0], dir_xy[1]),
                  exist, 0.5, 0.5)


def _crossing_vehicle(rng, T, dt, x_lane, y0, v, sign) -> _Agent:
    """Vehicle on the crossing road moving toward and past the ego road."""
    t = np.arange(T) * dt
    length, width = _vehicle_dims(rng)
    xy = np.empty((T, 2))
    xy[:, 0] = x_lane
    xy[:, 1] = y0 - sign * v * t
    vel = np.zeros((T, 2))
    vel[:, 1] = -sign * v
    return _Agent("vehicle", xy, vel, _const_heading(T, 0.0, -float(sign)),
                  np.ones(T, dtype=bool), length, width)


def _cut_in(rng, T, dt, v_ego, gap0, v_a, t_start, lane_from) -> _Agent:
    """Adjacent-lane vehicle merging into the ego lane ahead of the ego."""
    t = np.arange(T) * dt
    length, width = _vehicle_dims(rng)
    blend_dur = 1.6
    u = np.clip((t - t_start) / blend_dur, 0.0, 1.0)
    blend = u * u * (3.0 - 2.0 * u)
    xy = np.empty((T, 2))
    xy[:, 0] = gap0 + v_a * t
    xy[:, 1] = lane_from * (1.0 - blend)
    vel_x = np.full(T, v_a)
    vel_y = np.zeros(T)
    vel_y[1:] = np.diff(xy[:, 1]) / dt
    vel = np.stack([vel_x, vel_y], axis=1)
    heading = np.empty((T, 2))
    norm = np.hypot(vel_x, vel_y)
    heading[:, 0] = vel_y / norm
    heading[:, 1] = vel_x / norm
    return _Agent("vehicle", xy, vel, heading, np.ones(T, dtype=bool), length, width)


def _braking_lead(rng, T, dt, gap0, v0, t_brake, decel) -> _Agent:
    """Ego-lane lead that brakes hard to a stop at t_brake (seconds)."""
    length, width = _vehicle_dims(rng)
    xy = np.empty((T, 2))
    vel = np.zeros((T, 2))
    x = gap0
    v = v0
    t = 0.0
    for i in range(T):
        xy[i] = (x, 0.0)
        vel[i, 0] = v
        if t >= t_brake:
            v = max(0.0, v - decel * dt)
        x += v * dt
        t += dt
    return _Agent("vehicle", xy, vel, _const_heading(T, 1.0, 0.0),
                  np.ones(T, dtype=bool), length, width)


def _too_close(agents: list, x: float, y: float, t: int = 0) -> bool:
    for a in agents:
        if not a.exist[t]:
            continue
        if abs(a.xy[t, 0] - x) < 8.0 and abs(a.xy[t, 1] - y) < 2.6:
            return True
    # keep the ego start box clear
    return abs(x) < 8.0 and abs(y) < 2.6


def _place(agents: list, rng, make, tries: int = 8):
    """Rejection placement: call make() until the t=0 position is clear."""
    for _ in range(tries):
        agent = make()
        if not _too_close(agents, agent.xy[0, 0], agent.xy[0, 1]):
            agents.append(agent)
            return agent
    return None


# ---------------------------------------------------------------------------
# Archetype builders
# ---------------------------------------------------------------------------


def _lane_polylines(specs: list, y: float, x0: float, x1: float, reverse: bool = False):
    pts = np.stack([np.array([x0, x1]), np.array([y, y])], axis=1)
    if reverse:
        pts = pts[::-1]
    specs.append(("lane_center", pts, LANE_WIDTH))


def _pad_signals(signals: list, T: int, n: int) -> None:
    while len(signals) < n:
        signals.append(((0.0, 0.0, 0.0, 1.0), np.full(T, _STATE_INDEX["unknown"], dtype=int)))


def _roadside_signals(rng, T: int, n: int) -> list:
    out = []
    for i in range(min(n, 2)):
        x = 35.0 + 40.0 * i + rng.uniform(-5.0, 5.0)
        y = 5.5 if i % 2 == 0 else -5.5
        out.append(((x, y, 0.0, -1.0), np.full(T, _STATE_INDEX["unknown"], dtype=int)))
    _pad_signals(out, T, n)
    return out


def _generic_fillers(rng, agents, draft, cfg, budget):
    """Background traffic common to every archetype."""
    T = cfg.dims.num_steps
    dt = cfg.dt
    v = draft.v_target
    # no same-lane traffic behind the ego: replay agents cannot react, so a
    # braking ego would be rear-ended by scene dressing rather than physics
    menu = ("lead", "lead_far", "adjacent", "oncoming", "parked", "sidewalk_ped",
            "cyclist", "cone")
    for _ in range(budget):
        kind = menu[int(rng.integers(0, len(menu)))]
        if kind == "lead":
            _place(agents, rng, lambda: _cruiser(
                rng, T, dt, float(rng.uniform(28.0, 75.0)), float(rng.uniform(-0.3, 0.3)),
                1, float(v * rng.uniform(0.85, 1.15))))
        elif kind == "lead_far":
            _place(agents, rng, lambda: _cruiser(
                rng, T, dt, float(rng.uniform(75.0, 140.0)), float(rng.uniform(-0.3, 0.3)),
                1, float(v * rng.uniform(0.8, 1.1))))
        elif kind == "adjacent":
            _place(agents, rng, lambda: _cruiser(
                rng, T, dt, float(rng.uniform(-30.0, 60.0)), -LANE_WIDTH,
                1, float(v * rng.uniform(0.8, 1.2))))
        elif kind == "oncoming":
            _place(agents, rng, lambda: _cruiser(
                rng, T, dt, float(rng.uniform(30.0, 150.0)), LANE_WIDTH,
                -1, float(rng.uniform(5.0, 12.0))))
        elif kind == "parked":
            _place(agents, rng, lambda: _stationary(
                rng, T, float(rng.uniform(10.0, 120.0)), float(-2.0 * LANE_WIDTH + rng.uniform(-0.3, 0.3))))
        elif kind == "sidewalk_ped":
            side = 1.0 if rng.random() < 0.5 else -1.0
            _place(agents, rng, lambda: _walker(
                rng, T, dt, (float(rng.uniform(5.0, 80.0)), float(side * rng.uniform(5.5, 7.0))),
                (1.0, 0.0), float(rng.uniform(0.9, 1.5))))
        elif kind == "cyclist":
            _place(agents, rng, lambda: _cruiser(
                rng, T, dt, float(rng.uniform(0.0, 60.0)), -5.2,
                1, float(rng.uniform(3.0, 6.0)), cls_name="cyclist"))
        elif kind == "cone":
            _place(agents, rng, lambda: _stationary(
                rng, T, float(rng.uniform(15.0, 100.0)), float(rng.uniform(-6.0, -5.0)),
                cls_name="cone"))
        if len(agents) >= cfg.dims.max_tracks - 1:
            break


def _build_straight_road(cfg, rng, hazard, severity) -> _Draft:
    T = cfg.dims.num_steps
    dt = cfg.dt
    v_target = float(rng.uniform(*cfg.speed_range))
    route = _straight_route()
    specs = []
    _lane_polylines(specs, 0.0, -ROUTE_BEHIND, ROUTE_AHEAD)
    _lane_polylines(specs, -LANE_WIDTH, -ROUTE_BEHIND, ROUTE_AHEAD)
    _lane_polylines(specs, LANE_WIDTH, ROUTE_AHEAD, -ROUTE_BEHIND)  # oncoming
    if rng.random() < 0.4:
        specs.append(("parking", np.array([[0.0, -2.0 * LANE_WIDTH], [120.0, -2.0 * LANE_WIDTH]]), 2.5))

    agents: list = []
    draft = _Draft("straight_road", route, v_target, agents, specs,
                   _roadside_signals(rng, T, cfg.dims.num_signals))
    structural = 0
    if hazard:
        if rng.random() < 0.5:
            gap0 = 35.0 - 27.0 * severity + float(rng.uniform(-1.5, 1.5))
            v_a = max(1.0, v_target - (2.0 + 6.0 * severity))
            agents.append(_cut_in(rng, T, dt, v_target, max(8.0, gap0), v_a,
                                  float(rng.uniform(0.5, 1.5)), -LANE_WIDTH))
        else:
            gap0 = 42.0 - 30.0 * severity + float(rng.uniform(-2.0, 2.0))
            agents.append(_braking_lead(rng, T, dt, max(9.0, gap0),
                                        v_target * float(rng.uniform(0.9, 1.05)),
                                        float(rng.uniform(0.8, 1.8)),
                                        5.0 + 3.5 * severity))
        structural = 1
    n_extra = _extra_agents(cfg, rng, structural)
    _generic_fillers(rng, agents, draft, cfg, n_extra)
    return draft


def _build_intersection(cfg, rng, hazard, severity) -> _Draft:
    T = cfg.dims.num_steps
    dt = cfg.dt
    v_target = float(rng.uniform(*cfg.speed_range))
    x_int = float(rng.uniform(32.0, 58.0))
    route = _straight_route()
    specs = []
    _lane_polylines(specs, 0.0, -ROUTE_BEHIND, ROUTE_AHEAD)
    _lane_polylines(specs, LANE_WIDTH, ROUTE_AHEAD, -ROUTE_BEHIND)
    # crossing road, one lane each way
    specs.append(("lane_center", np.array([[x_int - 0.5 * LANE_WIDTH, 60.0],
                                           [x_int - 0.5 * LANE_WIDTH, -60.0]]), LANE_WIDTH))
    specs.append(("lane_center", np.array([[x_int + 0.5 * LANE_WIDTH, -60.0],
                                           [x_int + 0.5 * LANE_WIDTH, 60.0]]), LANE_WIDTH))
    specs.append(("stop_line", np.array([[x_int - 8.0, -LANE_WIDTH / 2],
                                         [x_int - 8.0, LANE_WIDTH / 2]]), 0.4))
    specs.append(("stop_line", np.array([[x_int - LANE_WIDTH - 1.75, 8.0],
                                         [x_int + LANE_WIDTH + 1.75, 8.0]]), 0.4))
    specs.append(("crosswalk", np.array([[x_int - 10.0, -6.0], [x_int - 10.0, 6.0]]), 3.0))
    specs.append(("crosswalk", np.array([[x_int + 10.0, -6.0], [x_int + 10.0, 6.0]]), 3.0))

    green = _STATE_INDEX["green"]
    red = _STATE_INDEX["red"]
    signals = [
        ((x_int - 6.0, -6.0, 0.0, -1.0), np.full(T, green, dtype=int)),
        ((x_int + 6.0, 6.0, 0.0, 1.0), np.full(T, green, dtype=int)),
        ((x_int - 6.0, 6.0, -1.0, 0.0), np.full(T, red, dtype=int)),
        ((x_int + 6.0, -6.0, 1.0, 0.0), np.full(T, red, dtype=int)),
    ]
    _pad_signals(signals, T, cfg.dims.num_signals)
    signals = signals[: cfg.dims.num_signals]

    agents: list = []
    draft = _Draft("intersection", route, v_target, agents, specs, signals)
    structural = 0
    if hazard:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        v_c = float(rng.uniform(5.5, 8.5))
        eta_ego = x_int / v_target
        delta = (1.0 - severity) * 3.0 + float(rng.uniform(-0.3, 0.3))
        y0 = sign * max(12.0, v_c * (eta_ego + delta))
        x_lane = x_int - 0.5 * LANE_WIDTH if sign > 0 else x_int + 0.5 * LANE_WIDTH
        agents.append(_crossing_vehicle(rng, T, dt, x_lane, y0, v_c, sign))
        structural = 1
    n_extra = _extra_agents(cfg, rng, structural)
    if n_extra > 0 and rng.random() < 0.5:
        # benign cross traffic timed to clear well after the ego; early
        # crossings only when the ego is far enough for real margin
        sign = 1.0 if rng.random() < 0.5 else -1.0
        v_c = float(rng.uniform(5.5, 8.5))
        eta_ego = x_int / v_target
        if eta_ego >= 5.5 and rng.random() < 0.5:
            delta = -float(rng.uniform(3.5, min(7.0, eta_ego - 1.8)))
        else:
            delta = float(rng.uniform(3.5, 7.0))
        y0 = sign * max(12.0, v_c * (eta_ego + delta))
        x_lane = x_int - 0.5 * LANE_WIDTH if sign > 0 else x_int + 0.5 * LANE_WIDTH
        agents.append(_crossing_vehicle(rng, T, dt, x_lane, y0, v_c, sign))
        n_extra -= 1
    _generic_fillers(rng, agents, draft, cfg, n_extra)
    return draft


def _build_double_parked(cfg, rng, hazard, severity) -> _Draft:
    T = cfg.dims.num_steps
    dt = cfg.dt
    v_target = float(rng.uniform(*cfg.speed_range))
    route = _straight_route()
    specs = []
    _lane_polylines(specs, 0.0, -ROUTE_BEHIND, ROUTE_AHEAD)
    _lane_polylines(specs, LANE_WIDTH, ROUTE_AHEAD, -ROUTE_BEHIND)
    specs.append(("parking", np.array([[0.0, -2.0 * LANE_WIDTH], [150.0, -2.0 * LANE_WIDTH]]), 2.5))

    agents: list = []
    x_b = float(rng.uniform(35.0, 70.0))
    reveal_step = 0
    if hazard:
        d_r = max(5.0, 30.0 - 24.0 * severity + float(rng.uniform(-1.0, 1.0)))
        # reveal when the cruising ego would be d_r meters from the blocker
        t_hit = max(0.0, (x_b - d_r) / v_target)
        reveal_step = min(T - 1, int(math.ceil(t_hit / dt)))
    agents.append(_stationary(rng, T, x_b, float(rng.uniform(-0.4, 0.4)),
                              reveal_step=reveal_step))
    draft = _Draft("double_parked", route, v_target, agents, specs,
                   _roadside_signals(rng, T, cfg.dims.num_signals))
    n_extra = _extra_agents(cfg, rng, 1)
    _generic_fillers(rng, agents, draft, cfg, n_extra)
    return draft


def _build_crosswalk(cfg, rng, hazard, severity) -> _Draft:
    T = cfg.dims.num_steps
    dt = cfg.dt
    v_target = float(rng.uniform(*cfg.speed_range))
    x_c = float(rng.uniform(30.0, 55.0))
    route = _straight_route()
    specs = []
    _lane_polylines(specs, 0.0, -ROUTE_BEHIND, ROUTE_AHEAD)
    _lane_polylines(specs, LANE_WIDTH, ROUTE_AHEAD, -ROUTE_BEHIND)
    specs.append(("crosswalk", np.array([[x_c, -6.0], [x_c, 6.0]]), 3.0))
    specs.append(("stop_line", np.array([[x_c - 4.0, -LANE_WIDTH / 2],
                                         [x_c - 4.0, LANE_WIDTH / 2]]), 0.4))

    agents: list = []
    draft = _Draft("crosswalk", route, v_target, agents, specs,
                   _roadside_signals(rng, T, cfg.dims.num_signals))
    structural = 0
    if hazard:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        v_p = float(rng.uniform(1.2, 2.0))
        eta_ego = x_c / v_target
        delta = (1.0 - severity) * 2.5 + float(rng.uniform(-0.2, 0.2))
        arrive = max(0.6, eta_ego + delta)
        y0 = sign * min(6.0, v_p * arrive)
        walk_from = max(0.0, arrive - abs(y0) / v_p)
        reveal_gate = None
        if severity > 0.85:
            # occluded step-out: a parked van hides the pedestrian until late
            agents.append(_stationary(rng, T, x_c - 3.0, sign * 3.2, length=6.0, width=2.2))
            reveal_gate = lambda xy: np.abs(xy[:, 1]) < 3.2
        agents.append(_walker(rng, T, dt, (x_c + float(rng.uniform(-0.4, 0.4)), float(y0)),
                              (0.0, -sign), v_p, walk_from=walk_from,
                              reveal_gate=reveal_gate))
        structural = len(agents)
    else:
        if rng.random() < 0.6:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            v_p = float(rng.uniform(1.0, 1.8))
            if rng.random() < 0.5:
                # crosses well after the ego has passed
                arrive = x_c / v_target + float(rng.uniform(3.0, 6.0))
                y0 = sign * min(6.0, v_p * arrive)
                walk_from = max(0.0, arrive - abs(y0) / v_p)
                agents.append(_walker(rng, T, dt, (x_c, float(y0)), (0.0, -sign), v_p,
                                      walk_from=walk_from))
            else:
                # already crossed, walking away from the road
                y0 = sign * float(rng.uniform(2.8, 5.0))
                agents.append(_walker(rng, T, dt, (x_c, float(y0)), (0.0, sign), v_p))
            structural = 1
    n_extra = _extra_agents(cfg, rng, structural)
    _generic_fillers(rng, agents, draft, cfg, n_extra)
    return draft


_BUILDERS = {
    "straight_road": _build_straight_road,
    "intersection": _build_intersection,
    "double_parked": _build_double_parked,
    "crosswalk": _build_crosswalk,
}


def _extra_agents(cfg, rng, structural: int) -> int:
    lo, hi = cfg.agent_count
    n = int(rng.integers(lo, hi + 1))
    return max(0, min(n - structural, cfg.dims.max_tracks - 1 - structural))


def _straight_route() -> np.ndarray:
    x = np.arange(-ROUTE_BEHIND, ROUTE_AHEAD + 1.0, 1.0)
    return np.stack([x, np.zeros_like(x)], axis=1)


# ---------------------------------------------------------------------------
# Rollout and tensor assembly
# ---------------------------------------------------------------------------


def _route_arrays(route: np.ndarray):
    rx = np.ascontiguousarray(route[:, 0], dtype=np.float64)
    ry = np.ascontiguousarray(route[:, 1], dtype=np.float64)
    seg = np.hypot(np.diff(rx), np.diff(ry))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return rx, ry, cum


def _project_arclength(rx, ry, cum, x, y) -> float:
    d2 = (rx - x) ** 2 + (ry - y) ** 2
    k = int(np.argmin(d2))
    return float(cum[k])


def _agent_replay_arrays(agents: list, T: int):
    n = len(agents)
    tx = np.zeros((n, T))
    ty = np.zeros((n, T))
    tsin = np.zeros((n, T))
    tcos = np.zeros((n, T))
    tvx = np.zeros((n, T))
    tvy = np.zeros((n, T))
    tlen = np.zeros((n, T))
    twid = np.zeros((n, T))
    texist = np.zeros((n, T), dtype=np.uint8)
    for i, a in enumerate(agents):
        tx[i] = a.xy[:, 0]
        ty[i] = a.xy[:, 1]
        tsin[i] = a.heading[:, 0]
        tcos[i] = a.heading[:, 1]
        tvx[i] = a.vel[:, 0]
        tvy[i] = a.vel[:, 1]
        tlen[i] = a.length
        twid[i] = a.width
        texist[i] = a.exist.astype(np.uint8)
    return tx, ty, tsin, tcos, tvx, tvy, tlen, twid, texist


def _run_policy(route, s0, v0, v_target, dt, agents_arrays, policy: EgoPolicyParams):
    rx, ry, cum = _route_arrays(route)
    tx, ty, tsin, tcos, tvx, tvy, tlen, twid, texist = agents_arrays
    return kernels.drive(
        rx, ry, cum,
        float(s0), float(v0), float(v_target), float(dt),
        EGO_LENGTH, EGO_WIDTH,
        tx, ty, tsin, tcos, tvx, tvy, tlen, twid, texist,
        policy.ttc_threshold, policy.decel_limit, policy.accel_limit,
        policy.standstill_gap, policy.horizon, policy.lat_margin,
    )


def _pack_polylines(specs: list, dims: ScenarioDims):
    frames = np.zeros((dims.num_polylines, dims.frame_width), dtype=np.float64)
    labels = np.zeros((dims.num_polylines, dims.polyline_classes), dtype=np.float64)
    points = np.zeros((dims.num_polylines, dims.points_per_polyline, dims.point_width),
                      dtype=np.float64)
    slot = 0
    for cls_name, pts, width in specs:
        pts = np.asarray(pts, dtype=np.float64)
        # densify long straight segments so each chunk spans <= ~90 m
        length = float(np.hypot(*(pts[-1] - pts[0])))
        n_pts = max(2, int(math.ceil(length / 9.5)) + 1)
        dense = np.stack([
            np.linspace(pts[0, 0], pts[-1, 0], n_pts),
            np.linspace(pts[0, 1], pts[-1, 1], n_pts),
        ], axis=1)
        for start in range(0, len(dense) - 1, dims.points_per_polyline - 1):
            chunk = dense[start: start + dims.points_per_polyline]
            if len(chunk) < 2:
                break
            if slot >= dims.num_polylines:
                break
            origin = chunk[0]
            span = chunk[-1] - chunk[0]
            norm = float(np.hypot(span[0], span[1]))
            if norm < 1e-9:
                hx, hy = 1.0, 0.0
            else:
                hx, hy = span[0] / norm, span[1] / norm
            frames[slot] = (origin[0], origin[1], hy, hx)
            labels[slot, _POLY_INDEX[cls_name]] = 1.0
            local = chunk - origin
            lx = local[:, 0] * hx + local[:, 1] * hy
            ly = -local[:, 0] * hy + local[:, 1] * hx
            points[slot, : len(chunk), 0] = lx
            points[slot, : len(chunk), 1] = ly
            points[slot, : len(chunk), 2] = width
            points[slot, : len(chunk), 3] = 1.0
            slot += 1
        if slot >= dims.num_polylines:
            break
    return frames, labels, points


def _assemble(cfg: WorldConfig, draft: _Draft, ego_states, scenario_id: str) -> Scenario:
    dims = cfg.dims
    T = dims.num_steps
    dt = cfg.dt
    ex, ey, esin, ecos, ev, _, _ = ego_states

    tracks = np.zeros((dims.max_tracks, T, dims.track_width), dtype=np.float64)
    tracks[0, :, 0] = ex
    tracks[0, :, 1] = ey
    tracks[0, :, 2] = esin
    tracks[0, :, 3] = ecos
    tracks[0, :, 4] = ev * ecos
    tracks[0, :, 5] = ev * esin
    tracks[0, 1:, 6] = np.diff(tracks[0, :, 4]) / dt
    tracks[0, 1:, 7] = np.diff(tracks[0, :, 5]) / dt
    tracks[0, :, 8] = EGO_LENGTH
    tracks[0, :, 9] = EGO_WIDTH
    tracks[0, :, 10 + _CLS_INDEX["vehicle"]] = 1.0
    tracks[0, :, TRACK_EXIST] = 1.0

    for i, a in enumerate(draft.agents[: dims.max_tracks - 1], start=1):
        e = a.exist
        tracks[i, e, 0] = a.xy[e, 0]
        tracks[i, e, 1] = a.xy[e, 1]
        tracks[i, e, 2] = a.heading[e, 0]
        tracks[i, e, 3] = a.heading[e, 1]
        tracks[i, e, 4] = a.vel[e, 0]
        tracks[i, e, 5] = a.vel[e, 1]
        # accel by backward difference inside existing runs
        acc = np.zeros((T, 2))
        both = e.copy()
        both[1:] &= e[:-1]
        both[0] = False
        idx = np.nonzero(both)[0]
        acc[idx] = (a.vel[idx] - a.vel[idx - 1]) / dt
        tracks[i, e, 6] = acc[e, 0]
        tracks[i, e, 7] = acc[e, 1]
        tracks[i, e, 8] = a.length
        tracks[i, e, 9] = a.width
        tracks[i, e, 10 + _CLS_INDEX[a.cls_name]] = 1.0
        tracks[i, e, TRACK_EXIST] = 1.0

    signals = np.zeros((dims.num_signals, T, dims.signal_width), dtype=np.float64)
    for i, (pose, states) in enumerate(draft.signals[: dims.num_signals]):
        signals[i, :, 0] = pose[0]
        signals[i, :, 1] = pose[1]
        signals[i, :, 2] = pose[2]
        signals[i, :, 3] = pose[3]
        signals[i, np.arange(T), 4 + states] = 1.0

    frames, labels, points = _pack_polylines(draft.poly_specs, dims)
    return Scenario(
        scenario_id=scenario_id,
        dt=dt,
        dims=dims,
        tracks=TrackTensor(tracks),
        signals=SignalTensor(signals),
        polylines=Polylines(frames, labels, points),
    )


def scenario_rng(cfg: WorldConfig, index: int) -> np.random.Generator:
    """Independent stream per (seed, index); order of generation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(int(index),)))


def scenario_id_for(cfg: WorldConfig, index: int) -> str:
    return f"s{cfg.seed & 0xFFFFFFFF:08x}-{int(index):06d}"


def generate_scenario(cfg: WorldConfig, index: int) -> Scenario:
    """Draft a world, roll out the logging driver, and pack the tensors."""
    rng = scenario_rng(cfg, index)
    names = list(ARCHETYPES)
    probs = np.array([cfg.archetype_mix.get(n, 0.0) for n in names])
    pick = float(rng.random())
    arch = names[int(np.searchsorted(np.cumsum(probs), pick, side="right").clip(0, len(names) - 1))]
    hazard = bool(rng.random() < cfg.hazard)
    severity = float(rng.random()) if hazard else 0.0
    draft = _BUILDERS[arch](cfg, rng, hazard, severity)
    arrays = _agent_replay_arrays(draft.agents[: cfg.dims.max_tracks - 1], cfg.dims.num_steps)
    rx, ry, cum = _route_arrays(draft.route)
    s0 = _project_arclength(rx, ry, cum, 0.0, 0.0)
    ego_states = _run_policy(draft.route, s0, draft.v_target, draft.v_target,
                             cfg.dt, arrays, LOGGING_DRIVER)
    return _assemble(cfg, draft, ego_states, scenario_id_for(cfg, index))


# ---------------------------------------------------------------------------
# Replay simulation
# ---------------------------------------------------------------------------


def _polyline_points_global(scenario: Scenario):
    pl = scenario.polylines
    live = pl.points[:, :, POINT_EXIST] == 1.0
    out = []
    for i in range(pl.frames.shape[0]):
        if not live[i].any():
            continue
        ox, oy, hs, hc = (float(v) for v in pl.frames[i])
        pts = pl.points[i][live[i]][:, :2].astype(np.float64)
        gx = ox + pts[:, 0] * hc - pts[:, 1] * hs
        gy = oy + pts[:, 0] * hs + pts[:, 1] * hc
        out.append((i, np.stack([gx, gy], axis=1), (hs, hc)))
    return out


def route_from_polylines(scenario: Scenario) -> np.ndarray:
    """Reconstruct the ego route: forward-aligned lane centerline near y=0.

    Falls back to a straight line along the ego's initial heading when the
    map holds no usable lane ahead of the ego.
    """
    ego = scenario.tracks.data[0, 0]
    ex, ey = float(ego[0]), float(ego[1])
    ehs, ehc = float(ego[2]), float(ego[3])
    labels = scenario.polylines.labels
    lane_cls = _POLY_INDEX["lane_center"]
    xs = []
    ys = []
    for i, pts, (hs, hc) in _polyline_points_global(scenario):
        if labels[i, lane_cls] != 1.0:
            continue
        if hc * ehc + hs * ehs < 0.7:  # aligned with the ego heading
            continue
        keep = np.abs(pts[:, 1] - ey) < 0.52 * LANE_WIDTH
        xs.extend(pts[keep, 0].tolist())
        ys.extend(pts[keep, 1].tolist())
    if len(xs) < 2:
        x = np.arange(0.0, ROUTE_AHEAD + 1.0, 1.0)
        gx = ex - ROUTE_BEHIND * ehc + x * ehc
        gy = ey - ROUTE_BEHIND * ehs + x * ehs
        return np.stack([gx, gy], axis=1)
    order = np.argsort(np.asarray(xs))
    sx = np.asarray(xs)[order]
    sy = np.asarray(ys)[order]
    sx, uniq = np.unique(sx, return_index=True)
    sy = sy[uniq]
    lo = min(float(sx[0]), ex - ROUTE_BEHIND)
    hi = max(float(sx[-1]), ex + ROUTE_AHEAD)
    grid = np.arange(lo, hi + 1.0, 1.0)
    return np.stack([grid, np.interp(grid, sx, sy)], axis=1)


def simulate(scenario: Scenario, policy: EgoPolicyParams | None = None) -> SimOutcome:
    """Re-drive the ego with ``policy``; other tracks replay their logs."""
    if policy is None:
        policy = EgoPolicyParams()
    tr = scenario.tracks.data.astype(np.float64)
    T = scenario.dims.num_steps
    others = tr[1:]
    arrays = (
        np.ascontiguousarray(others[:, :, 0]),
        np.ascontiguousarray(others[:, :, 1]),
        np.ascontiguousarray(others[:, :, 2]),
        np.ascontiguousarray(others[:, :, 3]),
        np.ascontiguousarray(others[:, :, 4]),
        np.ascontiguousarray(others[:, :, 5]),
        np.ascontiguousarray(others[:, :, 8]),
        np.ascontiguousarray(others[:, :, 9]),
        np.ascontiguousarray(others[:, :, TRACK_EXIST] != 0.0).astype(np.uint8),
    )
    route = route_from_polylines(scenario)
    rx, ry, cum = _route_arrays(route)
    ego0 = tr[0, 0]
    s0 = _project_arclength(rx, ry, cum, float(ego0[0]), float(ego0[1]))
    speeds = np.hypot(tr[0, :, 4], tr[0, :, 5])
    v0 = float(speeds[0])
    v_target = float(speeds.max())
    _, _, _, _, _, coll_t, min_clear = _run_policy(
        route, s0, v0, v_target, scenario.dt, arrays, policy
    )
    collided = coll_t >= 0
    return SimOutcome(
        scenario_id=scenario.scenario_id,
        collision=collided,
        collision_time=int(coll_t) if collided else None,
        min_clearance=float(min_clear),
        policy_version=policy.version,
    )


# ---------------------------------------------------------------------------
# Outcome files
# ---------------------------------------------------------------------------


def write_outcomes(path, outcomes: list[SimOutcome], meta: dict | None = None) -> None:
    """Columnar outcome container: ids, labels, collision steps, clearances."""
    with open(path, "wb") as f:
        w = Writer(f, str(path))
        w.raw(MAGIC_OUTCOMES)
        w.u32(OUTCOME_FORMAT_VERSION)
        w.u32(len(outcomes))
        w.json_blob(meta)
        for o in outcomes:
            w.str16(o.scenario_id)
        w.typed_array(np.array([o.label for o in outcomes], dtype=np.uint8), "<u1")
        w.typed_array(
            np.array([-1 if o.collision_time is None else o.collision_time for o in outcomes],
                     dtype=np.int32), "<i4")
        w.f32_array(np.array([o.min_clearance for o in outcomes], dtype=np.float32))
        w.str16(outcomes[0].policy_version if outcomes else "")


def read_outcomes(path) -> tuple[list[SimOutcome], dict]:
    with open(path, "rb") as f:
        r = Reader(f, str(path))
        r.expect_magic(MAGIC_OUTCOMES, "outcome file")
        r.expect_version(OUTCOME_FORMAT_VERSION, "outcome file")
        count = r.u32("outcome count")
        meta = r.json_blob("outcome metadata")
        ids = [r.str16(f"scenario id {i}") for i in range(count)]
        labels = r.typed_array("<u1", count, "labels")
        coll_t = r.typed_array("<i4", count, "collision times")
        clear = r.typed_array("<f4", count, "min clearances")
        version = r.str16("policy version")
    out = []
    for i in range(count):
        collided = labels[i] != 0
        out.append(SimOutcome(
            scenario_id=ids[i],
            collision=bool(collided),
            collision_time=int(coll_t[i]) if collided else None,
            min_clearance=float(clear[i]),
            policy_version=version,
        ))
    return out, meta


def outcomes_to_csv(path, outcomes: list[SimOutcome], config_comment: str | None = None) -> None:
    lines = []
    if config_comment:
        lines.append(f"# config: {config_comment}")
    lines.append("scenario_id,label,collision_time,min_clearance")
    for o in outcomes:
        t = "" if o.collision_time is None else str(o.collision_time)
        lines.append(f"{o.scenario_id},{o.label},{t},{o.min_clearance:.6g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Corpus building
# ---------------------------------------------------------------------------


def _gen_worker(args):
    cfg, index = args
    return generate_scenario(cfg, index)


def build_corpus(
    cfg: WorldConfig,
    count: int,
    scenarios_path,
    jobs: int = 1,
    meta: dict | None = None,
    start_index: int = 0,
) -> dict:
    """Generate ``count`` scenarios and stream them to a .scn file."""
    from .scene import ScenarioWriter

    if count <= 0:
        raise ValueError(f"corpus count must be positive, got {count}")
    indices = range(start_index, start_index + count)
    with ScenarioWriter(scenarios_path, cfg.dims, count, meta) as w:
        if jobs <= 1:
            for i in indices:
                w.add(generate_scenario(cfg, i))
        else:
            with Pool(jobs) as pool:
                for s in pool.imap(_gen_worker, [(cfg, i) for i in indices], chunksize=16):
                    w.add(s)
    return {"count": count, "path": str(scenarios_path)}


def _sim_worker(args):
    scenario, policy = args
    return simulate(scenario, policy)


def simulate_corpus(
    scenarios: Iterable[Scenario],
    policy: EgoPolicyParams | None = None,
    jobs: int = 1,
) -> list[SimOutcome]:
    """Replay every scenario under one policy version."""
    if policy is None:
        policy = EgoPolicyParams()
    if jobs <= 1:
        return [simulate(s, policy) for s in scenarios]
    with Pool(jobs) as pool:
        return list(pool.imap(_sim_worker, [(s, policy) for s in scenarios], chunksize=16))
