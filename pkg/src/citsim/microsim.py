"""Discrete-time microscopic traffic engine: car following, lane changes,
collision bookkeeping, and demand generation.

The car-following rule is the classic safe-speed family: a vehicle never
plans to exceed the speed from which it could stop, braking comfortably,
behind a leader who does the same.  Planned speeds are additionally capped by
the local effective limit (speed limit x driver-response factor x event
friction) and randomly dawdled by the imperfection term.

Collisions are endogenous and information-driven.  Realized braking is
bounded by an emergency deceleration, and drivers who were NOT notified of a
hazard suffer two surprise effects near it: they only perceive an unexpected
standing blockage within sight distance, and their reaction to the leader
lags by roughly one headway time (stale leader speed), which is how braking
waves turn into rear-end chains.  Notified drivers anticipate and keep the
comfortable-braking guarantee, and with no active hazard the plan is provably
collision-free at any demand and imperfection level.

All per-step state lives in flat numpy arrays indexed by vehicle slot, which
keeps full-corridor runs (thousands of vehicles) fast enough for multi-seed
experiment grids.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import v2x
from .kpi import DEFAULT_CO2_MODEL, Co2Model, StepAccumulator
from .network import (
    BLOCKING_KINDS,
    EventOrigin,
    HazardEvent,
    HazardKind,
    LinearRef,
    RoadNetwork,
)
from .response import ResponseProfile, speed_factor_array
from .tcs import DetectionConfig, TrafficControlServer
from .v2x import Cam, ChannelKind, ChannelModel, Denm


class ConfigError(ValueError):
    pass


# Vehicle status codes.
PENDING, DRIVING, COLLIDED, FINISHED, REMOVED = 0, 1, 2, 3, 4

#: A standing obstacle physically occupies at most this much lane length;
#: the event extent beyond it is the zone drivers treat as affected.
OBSTACLE_FOOTPRINT = 20.0

#: Surprise zones: the braking wave lives just upstream of the on-sight
#: reaction point of a hazard, and right behind fresh crash sites.  Keeping
#: the crash-site zone short is what lets rear-end chains die out instead of
#: marching up the whole corridor.
EVENT_SURPRISE_UPSTREAM = 300.0
EVENT_SURPRISE_DOWNSTREAM = 100.0
CRASH_SURPRISE_UPSTREAM = 200.0
CRASH_SURPRISE_DOWNSTREAM = 50.0


@dataclass(frozen=True)
class VehicleParams:
    vclass: str  # "car" | "hgv"
    length: float
    v_max: float
    accel_a: float
    decel_b: float
    decel_emergency: float
    tau: float
    sigma: float

    def __post_init__(self):
        if min(self.length, self.v_max, self.accel_a, self.decel_b, self.decel_emergency, self.tau) <= 0:
            raise ConfigError("vehicle parameters must be positive")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError("sigma must be in [0, 1]")


def car_params(speed_limit: float, sigma: float = 0.5) -> VehicleParams:
    return VehicleParams("car", 5.0, speed_limit, 2.6, 4.5, 8.0, 1.0, sigma)


def hgv_params(speed_limit: float, sigma: float = 0.5) -> VehicleParams:
    return VehicleParams("hgv", 12.0, min(speed_limit, 25.0), 1.3, 4.0, 6.5, 1.0, sigma)


@dataclass(frozen=True)
class SimConfig:
    total_vehicles: int
    duration: float = 1800.0
    dt: float = 0.5
    insertion_rate: float | None = None  # veh/s; default paces total into ~80% of duration
    hgv_share: float = 0.0
    equipped_fraction: float = 0.0
    seed: int = 0
    sigma: float = 0.5
    warmup: float = 300.0
    speed_factor_dev: float = 0.10  # per-driver desired-speed spread around the limit
    # lane changing
    lc_lookahead: float = 300.0  # m, blocked-lane look-ahead for non-event blockers
    lc_gain: float = 0.5  # m/s anticipated-speed gain needed for a discretionary change
    lc_cooldown: float = 5.0  # s between changes of one vehicle
    lc_urgent_distance: float = 100.0  # m, below this a mandatory merge accepts harder braking
    lc_decision_period: float = 1.0  # s between lane-change planning passes
    # collision and stall handling
    collision_hold: float = 45.0  # s a collided vehicle blocks its lane before removal
    teleport_after: float = 60.0  # s at standstill before a stuck vehicle is removed
    surprise_reaction: float = 2.0  # s of stale leader perception for a lapsed driver
    attention_lapse_share: float = 0.08  # fraction of drivers prone to lapses near hazards
    # messaging
    cam_period: float = 1.0
    rebroadcast_period: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.dt <= 1.0:
            raise ConfigError("dt must be in (0, 1]")
        if self.total_vehicles <= 0:
            raise ConfigError("total_vehicles must be > 0")
        for name in ("hgv_share", "equipped_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError("sigma must be in [0, 1]")
        if self.duration <= 0:
            raise ConfigError("duration must be > 0")

    def effective_rate(self) -> float:
        if self.insertion_rate is not None:
            return self.insertion_rate
        return 1.25 * self.total_vehicles / self.duration

    def with_overrides(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class CollisionRecord:
    time: float
    location: LinearRef
    lane: int
    follower_id: str
    leader_id: str


def safe_speed(gap: float, leader_speed: float, decel_b: float, tau: float) -> float:
    """Highest speed from which the follower can stay behind a leader braking
    at the same comfortable rate; nondecreasing in gap and leader speed."""
    g = max(gap, 0.0)
    vl = max(leader_speed, 0.0)
    bt = decel_b * tau
    return max(0.0, -bt + math.sqrt(bt * bt + vl * vl + 2.0 * decel_b * g))


def _safe_speed_array(gap: np.ndarray, leader_speed: np.ndarray, b: np.ndarray, tau: np.ndarray) -> np.ndarray:
    g = np.maximum(gap, 0.0)
    vl = np.maximum(leader_speed, 0.0)
    bt = b * tau
    return np.maximum(0.0, -bt + np.sqrt(bt * bt + vl * vl + 2.0 * b * g))


@dataclass
class _Phantom:
    """Static lane blockage (closure cones, obstacle) acting as a zero-speed leader."""

    event_id: str
    lane: int
    front: float
    length: float

    @property
    def rear(self) -> float:
        return self.front - self.length


@dataclass
class _Advisory:
    """Active notification relevant to driver response (event-backed or detected)."""

    denm: Denm
    start_abs: float
    extent: float
    kind: HazardKind
    physical: bool  # True when backed by an on-road hazard visible to everyone


class _LaneTable:
    """Sorted per-lane occupancy snapshot including phantom blockers."""

    __slots__ = ("front", "rear", "speed", "idx", "ph_ids", "has_phantom")

    def __init__(self, front, rear, speed, idx, ph_ids):
        order = np.argsort(front, kind="stable")
        self.front = front[order]
        self.rear = rear[order]
        self.speed = speed[order]
        self.idx = idx[order]
        self.ph_ids = ph_ids
        self.has_phantom = bool((self.idx < 0).any())

    def without_phantoms(self) -> "_LaneTable":
        keep = self.idx >= 0
        return _LaneTable(self.front[keep], self.rear[keep], self.speed[keep], self.idx[keep], {})


class World:
    """One corridor simulation run; single-owner, advanced by exactly one loop."""

    def __init__(
        self,
        net: RoadNetwork,
        config: SimConfig,
        events: tuple[HazardEvent, ...] = (),
        profile: ResponseProfile = ResponseProfile(),
        channel: ChannelModel | None = None,
        tcs_enabled: bool = False,
        detection: DetectionConfig = DetectionConfig(),
        co2_model: Co2Model = DEFAULT_CO2_MODEL,
        collect_trajectories: bool = False,
        trace_hash: bool = False,
        message_log: v2x.MessageLog | None = None,
    ):
        self.net = net
        self.config = config
        self.profile = profile
        self.lane_count = net.uniform_lane_count
        self.channel = channel if channel is not None else v2x.make_channel(ChannelKind.CELLULAR)
        self.tcs_enabled = tcs_enabled
        self.tcs = TrafficControlServer(net, detection) if tcs_enabled else None
        self.message_log = message_log
        for ev in events:
            ev.validate_on(net)
        self.scenario_events: dict[str, HazardEvent] = {ev.id: ev for ev in events}
        if len(self.scenario_events) != len(events):
            raise ConfigError("duplicate event ids")

        n = config.total_vehicles
        ss = np.random.SeedSequence(config.seed)
        k_demand, k_driver, k_channel = ss.spawn(3)
        self.rng_demand = np.random.default_rng(k_demand)
        self.rng_driver = np.random.default_rng(k_driver)
        self.rng_channel = np.random.default_rng(k_channel)

        rate = config.effective_rate()
        gaps = self.rng_demand.exponential(1.0 / rate, size=n)
        self.arrival_time = np.cumsum(gaps)
        self.is_hgv = self.rng_demand.random(n) < config.hgv_share
        self.equipped = self.rng_demand.random(n) < config.equipped_fraction
        # Vigilance trait: most drivers track braking waves promptly even when
        # surprised; a lapse-prone few run on a stale picture near hazards.
        self.lapse_prone = self.rng_demand.random(n) < config.attention_lapse_share
        dev = config.speed_factor_dev
        sf = self.rng_demand.normal(1.0, dev, size=n)
        sf_car = np.clip(sf, 1.0 - 2.5 * dev, 1.0 + 2.5 * dev)
        sf_hgv = np.clip(sf, 1.0 - 1.25 * dev, 1.0 + 0.5 * dev)
        self.desired_factor = np.where(self.is_hgv, sf_hgv, sf_car)

        limit = float(np.max(net.speed_limits))
        car = car_params(limit, config.sigma)
        hgv = hgv_params(limit, config.sigma)
        self.params_car, self.params_hgv = car, hgv

        def pick(fc, fh):
            return np.where(self.is_hgv, fh, fc)

        self.length = pick(car.length, hgv.length)
        self.v_cap = pick(car.v_max, hgv.v_max)  # hard per-class ceiling
        self.accel_a = pick(car.accel_a, hgv.accel_a)
        self.decel_b = pick(car.decel_b, hgv.decel_b)
        self.decel_emg = pick(car.decel_emergency, hgv.decel_emergency)
        self.tau = pick(car.tau, hgv.tau)
        self.sigma = np.full(n, config.sigma)

        self.status = np.full(n, PENDING, dtype=np.int8)
        self.pos = np.full(n, -1.0)  # front bumper, absolute meters
        self.lane = np.zeros(n, dtype=np.int16)
        self.speed = np.zeros(n)
        # Speed/position history rings for the surprise perception lag.
        self._lag_steps = max(1, round(config.surprise_reaction / config.dt))
        self._speed_hist: list[np.ndarray] = [np.zeros(n) for _ in range(self._lag_steps)]
        self._pos_hist: list[np.ndarray] = [np.full(n, -1.0) for _ in range(self._lag_steps)]
        self.accel = np.zeros(n)
        self.entry_time = np.full(n, np.nan)
        self.exit_time = np.full(n, np.nan)
        self.lc_block_until = np.zeros(n)
        self.stop_since = np.full(n, np.nan)
        self.collided_until = np.full(n, np.nan)
        self.last_cam_time = np.full(n, -np.inf)

        self.clock = 0.0
        self.step_count = 0
        self._insert_ptr = 0
        self.blocked_insertions = 0
        self.teleported = 0

        self.active_phantoms: list[_Phantom] = []
        self.active_friction: list[HazardEvent] = []
        self.advisories: dict[str, _Advisory] = {}
        self._event_abs: dict[str, float] = {}
        self._informed: dict[str, np.ndarray] = {}
        self._pending_mask: dict[str, np.ndarray] = {}
        self._pending_deliveries: list[tuple[float, str, int]] = []
        self._next_broadcast: dict[str, float] = {}
        self._started_events: set[str] = set()
        self._ended_events: set[str] = set()
        self._next_tcs_time = 0.0

        self.collision_records: list[CollisionRecord] = []
        self.lane_change_times: list[float] = []
        self.kpis = StepAccumulator(config.warmup, config.duration, co2_model)
        self.collect_trajectories = collect_trajectories
        self.trajectory: list[tuple[float, str, float, float]] = []
        self._hash = hashlib.sha256() if trace_hash else None

    # -- small accessors ------------------------------------------------------

    def vehicle_id(self, i: int) -> str:
        return f"v{i}"

    def driving_mask(self) -> np.ndarray:
        return self.status == DRIVING

    def present_mask(self) -> np.ndarray:
        return (self.status == DRIVING) | (self.status == COLLIDED)

    def denm_candidates(self, event_id: str) -> np.ndarray:
        informed = self._informed.get(event_id)
        pending = self._pending_mask.get(event_id)
        mask = self.equipped & self.driving_mask()
        if informed is not None:
            mask &= ~informed
        if pending is not None:
            mask &= ~pending
        return mask

    def informed_mask(self, event_id: str) -> np.ndarray:
        m = self._informed.get(event_id)
        return m if m is not None else np.zeros(self.status.size, dtype=bool)

    def inserted_count(self) -> int:
        return self._insert_ptr

    def counts(self) -> dict[str, int]:
        return {
            "pending": int(np.count_nonzero(self.status == PENDING)),
            "driving": int(np.count_nonzero(self.status == DRIVING)),
            "collided": int(np.count_nonzero(self.status == COLLIDED)),
            "finished": int(np.count_nonzero(self.status == FINISHED)),
            "removed": int(np.count_nonzero(self.status == REMOVED)),
        }

    # -- events ---------------------------------------------------------------

    def add_event(self, event: HazardEvent) -> None:
        """Register a hazard (operator injection path); takes effect at its start time."""
        if event.id in self.scenario_events:
            raise ConfigError(f"event id {event.id!r} already exists")
        event.validate_on(self.net)
        self.scenario_events[event.id] = event

    def end_event(self, event_id: str, at: float) -> None:
        ev = self.scenario_events.get(event_id)
        if ev is None or event_id in self._ended_events or event_id not in self._started_events:
            raise ConfigError(f"no active event {event_id!r}")
        self.scenario_events[event_id] = replace(ev, end_time=max(at, ev.start_time + 1e-6))

    def active_events(self) -> list[HazardEvent]:
        t = self.clock
        return [
            ev
            for ev in self.scenario_events.values()
            if ev.id in self._started_events and ev.id not in self._ended_events and ev.start_time <= t
        ]

    def _activate_events(self, t: float) -> None:
        for ev in list(self.scenario_events.values()):
            if ev.id not in self._started_events and ev.start_time <= t < ev.end_time:
                self._started_events.add(ev.id)
                self._realize_event(ev, t)
            elif ev.id in self._started_events and ev.id not in self._ended_events and t >= ev.end_time:
                self._ended_events.add(ev.id)
                self._retire_event(ev, t)

    def _realize_event(self, ev: HazardEvent, t: float) -> None:
        start = self.net.abs_pos(ev.location)
        end = min(start + ev.extent, self.net.total_length)
        self._event_abs[ev.id] = start
        if ev.kind == HazardKind.OBSTACLE_ON_ROAD:
            foot = min(ev.extent, OBSTACLE_FOOTPRINT) if ev.extent > 0 else OBSTACLE_FOOTPRINT
            foot_end = min(start + foot, self.net.total_length)
            for lane in sorted(ev.affected_lanes):
                self.active_phantoms.append(_Phantom(ev.id, lane, foot_end, foot_end - start))
        elif ev.kind == HazardKind.LANE_CLOSURE:
            present = self.present_mask()
            for lane in sorted(ev.affected_lanes):
                inside = present & (self.lane == lane) & (self.pos > start) & (self.pos <= end)
                # Cones go up just ahead of anyone already inside the zone.
                rear = start if not inside.any() else min(end - 1.0, float(self.pos[inside].max()) + 2.0)
                self.active_phantoms.append(_Phantom(ev.id, lane, end, end - rear))
        elif ev.kind in (HazardKind.SLIPPERY_ROAD, HazardKind.TRAFFIC_JAM_AHEAD):
            self.active_friction.append(ev)
        # FreeTextIvs: informational only.
        if self.tcs_enabled and ev.origin == EventOrigin.OPERATOR:
            denm = self.tcs.publish_denm(ev, t)
            self._track_advisory(denm, physical=ev.kind != HazardKind.FREE_TEXT_IVS)

    def _retire_event(self, ev: HazardEvent, t: float) -> None:
        self.active_phantoms = [p for p in self.active_phantoms if p.event_id != ev.id]
        self.active_friction = [e for e in self.active_friction if e.id != ev.id]
        self._event_abs.pop(ev.id, None)
        if self.tcs_enabled and ev.id in self.tcs.active_denms:
            self.tcs.cancel_denm(ev.id, t)
        self._drop_advisory(ev.id)

    def _track_advisory(self, denm: Denm, physical: bool) -> None:
        if denm.cause == HazardKind.FREE_TEXT_IVS:
            physical = False
        self.advisories[denm.event_id] = _Advisory(
            denm=denm,
            start_abs=self.net.abs_pos(denm.location),
            extent=denm.extent,
            kind=denm.cause,
            physical=physical,
        )
        n = self.status.size
        self._informed.setdefault(denm.event_id, np.zeros(n, dtype=bool))
        self._pending_mask.setdefault(denm.event_id, np.zeros(n, dtype=bool))
        self._next_broadcast.setdefault(denm.event_id, self.clock)

    def _drop_advisory(self, event_id: str) -> None:
        self.advisories.pop(event_id, None)
        self._informed.pop(event_id, None)
        self._pending_mask.pop(event_id, None)
        self._next_broadcast.pop(event_id, None)
        self._pending_deliveries = [p for p in self._pending_deliveries if p[1] != event_id]

    # -- demand -----------------------------------------------------------------

    def _insert_vehicles(self, t: float) -> None:
        n = self.status.size
        if self._insert_ptr >= n or self.arrival_time[self._insert_ptr] > t:
            return
        present = self.present_mask()
        lane_min_rear = np.full(self.lane_count, np.inf)
        lane_min_speed = np.zeros(self.lane_count)
        near = np.flatnonzero(present & (self.pos < 400.0))
        for lane in range(self.lane_count):
            in_lane = near[self.lane[near] == lane]
            if in_lane.size:
                i = in_lane[np.argmin(self.pos[in_lane])]
                lane_min_rear[lane] = self.pos[i] - self.length[i]
                lane_min_speed[lane] = self.speed[i]
        limit0 = float(self.net.speed_limits[0])
        while self._insert_ptr < n and self.arrival_time[self._insert_ptr] <= t:
            i = self._insert_ptr
            entry_front = self.length[i]
            gaps = lane_min_rear - entry_front
            lane = int(np.argmax(gaps))
            gap = float(gaps[lane])
            v0 = min(
                self.v_cap[i],
                self.desired_factor[i] * limit0,
                safe_speed(gap, lane_min_speed[lane], self.decel_b[i], self.tau[i]),
            )
            if gap < v0 * self.tau[i] + 2.0 or v0 < 2.0:
                self.blocked_insertions += 1
                break  # entry is full; the queue waits
            self.status[i] = DRIVING
            self.pos[i] = entry_front
            self.lane[i] = lane
            self.speed[i] = v0
            for k in range(self._lag_steps):
                self._speed_hist[k][i] = v0
                # Backfill as if the vehicle had been cruising in.
                self._pos_hist[k][i] = entry_front - v0 * self.config.dt * (self._lag_steps - k)
            self.accel[i] = 0.0
            self.entry_time[i] = t
            lane_min_rear[lane] = 0.0
            lane_min_speed[lane] = v0
            self._insert_ptr += 1

    # -- messaging ----------------------------------------------------------------

    def _apply_due_deliveries(self, t: float) -> None:
        if not self._pending_deliveries:
            return
        due = [p for p in self._pending_deliveries if p[0] <= t]
        if not due:
            return
        self._pending_deliveries = [p for p in self._pending_deliveries if p[0] > t]
        for _when, event_id, idx in due:
            informed = self._informed.get(event_id)
            pending = self._pending_mask.get(event_id)
            if informed is None:
                continue  # advisory retired while in flight
            informed[idx] = True
            if pending is not None:
                pending[idx] = False

    def _broadcast_denms(self, t: float) -> None:
        for event_id, adv in list(self.advisories.items()):
            nxt = self._next_broadcast.get(event_id, t)
            if t < nxt:
                continue
            self._next_broadcast[event_id] = nxt + self.config.rebroadcast_period
            deliveries = v2x.deliver(adv.denm, self, self.channel, t, self.rng_channel)
            if not deliveries:
                continue
            pending = self._pending_mask[event_id]
            for vid, when in deliveries:
                idx = int(vid[1:])
                pending[idx] = True
                self._pending_deliveries.append((when, event_id, idx))
                if self.message_log is not None:
                    self.message_log.record_denm_delivery(adv.denm, vid, when)

    def _tcs_cycle(self, t: float) -> None:
        tcs = self.tcs
        due = v2x.cam_due_mask(self.equipped, self.driving_mask(), self.last_cam_time, t, self.config.cam_period)
        idx = np.flatnonzero(due)
        if idx.size:
            self.last_cam_time[idx] = t
            tcs.ingest_indexed(idx, np.full(idx.size, t), self.pos[idx], self.speed[idx], self.lane[idx])
            if self.message_log is not None:
                for i in idx:
                    cam = Cam(
                        station_id=self.vehicle_id(int(i)),
                        gen_time=t,
                        pos=self.net.linear_ref(float(self.pos[i])),
                        lane=int(self.lane[i]),
                        speed=float(self.speed[i]),
                        accel=float(self.accel[i]),
                        vclass="hgv" if self.is_hgv[i] else "car",
                    )
                    self.message_log.record_cam(cam)
        confirmed = tcs.detect_incidents(t)
        for cand in confirmed:
            denm = tcs.publish_denm(cand, t)
            if denm.event_id not in self.advisories:
                self._track_advisory(denm, physical=False)
        # Operator-backed notifications stay valid while their event is active.
        for ev in self.active_events():
            if ev.id in self.advisories:
                tcs.publish_denm(ev, t)
        tcs.refresh_denms(t)
        for event_id in list(self.advisories):
            if event_id not in tcs.active_denms:
                if event_id not in self.scenario_events or event_id in self._ended_events:
                    self._drop_advisory(event_id)

    # -- driving ---------------------------------------------------------------

    def _effective_limits(self, idx: np.ndarray) -> np.ndarray:
        """Speed limit x desired factor x response factor x friction."""
        pos = self.pos[idx]
        lim = self.net.limit_at(pos) * self.desired_factor[idx]
        factor = np.ones(idx.size)
        for adv in self.advisories.values():
            informed = self._informed[adv.denm.event_id][idx]
            if not adv.physical and not informed.any():
                continue
            d_up = adv.start_abs - pos
            on_extent = (pos >= adv.start_abs) & (pos <= adv.start_abs + adv.extent)
            f = speed_factor_array(informed, d_up, on_extent, self.profile)
            if not adv.physical:
                f = np.where(informed, f, 1.0)  # nothing to see on the road
            factor = np.minimum(factor, f)
        # Physical events without an advisory entry (no TCS, or expired) are
        # still visible on sight to everyone.
        nobody = np.zeros(idx.size, dtype=bool)
        for ev in self.active_events():
            if ev.kind == HazardKind.FREE_TEXT_IVS or ev.id in self.advisories:
                continue
            start = self._event_abs[ev.id]
            d_up = start - pos
            on_extent = (pos >= start) & (pos <= start + ev.extent)
            f = speed_factor_array(nobody, d_up, on_extent, self.profile)
            factor = np.minimum(factor, f)
        friction = np.ones(idx.size)
        for ev in self.active_friction:
            start = self._event_abs[ev.id]
            on_extent = (pos >= start) & (pos <= start + ev.extent)
            if ev.affected_lanes:
                on_extent &= np.isin(self.lane[idx], list(ev.affected_lanes))
            friction = np.minimum(friction, np.where(on_extent, ev.severity, 1.0))
        return lim * factor * friction

    def _lane_tables(self) -> list[_LaneTable]:
        present = np.flatnonzero(self.present_mask())
        tables = []
        for lane in range(self.lane_count):
            sel = present[self.lane[present] == lane]
            fronts = self.pos[sel]
            rears = fronts - self.length[sel]
            speeds = self.speed[sel]
            ph = [p for p in self.active_phantoms if p.lane == lane]
            ph_ids = {}
            if ph:
                fronts = np.concatenate([fronts, [p.front for p in ph]])
                rears = np.concatenate([rears, [p.rear for p in ph]])
                speeds = np.concatenate([speeds, np.zeros(len(ph))])
                sel = np.concatenate([sel, np.array([-(k + 1) for k in range(len(ph))])])
                ph_ids = {-(k + 1): p.event_id for k, p in enumerate(ph)}
            tables.append(_LaneTable(fronts, rears, speeds, sel.astype(int), ph_ids))
        return tables

    def _leader_info(self, tables: list[_LaneTable], idx: np.ndarray):
        """Gap to, speed of, and slot of the leader in each vehicle's own lane."""
        gap = np.full(idx.size, np.inf)
        lead_v = np.zeros(idx.size)
        lead_slot = np.full(idx.size, -(10**9), dtype=int)
        for lane in range(self.lane_count):
            tab = tables[lane]
            mine = np.flatnonzero(self.lane[idx] == lane)
            if mine.size == 0 or tab.front.size == 0:
                continue
            my_pos = self.pos[idx[mine]]
            # side="right" skips every entity at the same front position,
            # including the vehicle itself, so the leader is strictly ahead.
            j = np.searchsorted(tab.front, my_pos, side="right")
            has = j < tab.front.size
            jj = np.minimum(j, tab.front.size - 1)
            gap[mine] = np.where(has, tab.rear[jj] - my_pos, np.inf)
            lead_v[mine] = np.where(has, tab.speed[jj], 0.0)
            lead_slot[mine] = np.where(has, tab.idx[jj], -(10**9))
        return gap, lead_v, lead_slot

    def _neighbor_info(self, tables: list[_LaneTable], idx: np.ndarray, target_lane: np.ndarray):
        """Lead/lag gaps and speeds each vehicle would have in a target lane."""
        n = idx.size
        lead_gap = np.full(n, np.inf)
        lead_speed = np.zeros(n)
        lag_gap = np.full(n, np.inf)
        lag_speed = np.zeros(n)
        lag_b = np.full(n, 4.5)
        lag_tau = np.ones(n)
        for lane in range(self.lane_count):
            sel = np.flatnonzero(target_lane == lane)
            if sel.size == 0:
                continue
            tab = tables[lane]
            if tab.front.size == 0:
                continue
            my_pos = self.pos[idx[sel]]
            my_rear = my_pos - self.length[idx[sel]]
            j = np.searchsorted(tab.front, my_pos, side="right")
            has_lead = j < tab.front.size
            jj = np.minimum(j, tab.front.size - 1)
            lead_gap[sel] = np.where(has_lead, tab.rear[jj] - my_pos, np.inf)
            lead_speed[sel] = np.where(has_lead, tab.speed[jj], 0.0)
            k = j - 1
            has_lag = k >= 0
            kk = np.maximum(k, 0)
            lag_idx = tab.idx[kk]
            real_lag = has_lag & (lag_idx >= 0)
            lag_gap[sel] = np.where(has_lag, my_rear - tab.front[kk], np.inf)
            lag_speed[sel] = np.where(has_lag, tab.speed[kk], 0.0)
            safe_idx = np.maximum(lag_idx, 0)
            lag_b[sel] = np.where(real_lag, self.decel_b[safe_idx], 4.5)
            lag_tau[sel] = np.where(real_lag, self.tau[safe_idx], 1.0)
        return lead_gap, lead_speed, lag_gap, lag_speed, lag_b, lag_tau

    def _blocker_distance(self, tables: list[_LaneTable], idx: np.ndarray):
        """Distance to the nearest hard blockage ahead in the own lane, split
        into event blockages (phantoms) and crashed vehicles; slow traffic is
        not a blockage and only feeds the discretionary incentive."""
        d_event = np.full(idx.size, np.inf)
        d_stopped = np.full(idx.size, np.inf)
        any_crashed = bool((self.status == COLLIDED).any())
        for lane in range(self.lane_count):
            tab = tables[lane]
            if not tab.has_phantom and not any_crashed:
                continue
            mine = np.flatnonzero(self.lane[idx] == lane)
            if mine.size == 0 or tab.front.size == 0:
                continue
            is_ph = tab.idx < 0
            crashed = ~is_ph & (self.status[np.maximum(tab.idx, 0)] == COLLIDED)
            my_pos = self.pos[idx[mine]]
            for kind_mask, out in ((is_ph, d_event), (crashed, d_stopped)):
                cols = np.flatnonzero(kind_mask)
                if cols.size == 0:
                    continue
                rears = np.sort(tab.rear[cols])
                j = np.searchsorted(rears, my_pos, side="left")
                has = j < rears.size
                jj = np.minimum(j, rears.size - 1)
                out[mine] = np.where(has, rears[jj] - my_pos, np.inf)
        return d_event, d_stopped

    def _informed_of_blockage(self, idx: np.ndarray) -> np.ndarray:
        """Holds a notification for any active blocking hazard."""
        informed = np.zeros(idx.size, dtype=bool)
        for adv in self.advisories.values():
            if adv.kind in BLOCKING_KINDS:
                informed |= self._informed[adv.denm.event_id][idx]
        return informed

    def _surprise_zones(self) -> list[tuple[float, float, str | None]]:
        """(lo, hi, event_id-or-None) stretches where an unannounced hazard
        can catch drivers out.  Fresh crash sites count as hazards too; their
        zone is keyed to whichever advisory covers the site, if any."""
        zones: list[tuple[float, float, str | None]] = []
        for ev in self.active_events():
            if ev.kind == HazardKind.FREE_TEXT_IVS:
                continue
            start = self._event_abs[ev.id]
            zones.append(
                (start - EVENT_SURPRISE_UPSTREAM, start + ev.extent + EVENT_SURPRISE_DOWNSTREAM, ev.id)
            )
        crashed = np.flatnonzero(self.status == COLLIDED)
        if crashed.size:
            # Cluster crash sites so a pileup yields one zone, not dozens.
            sites = np.unique(np.round(self.pos[crashed] / 200.0) * 200.0)
            adv_at = [(a.denm.event_id, a.start_abs, a.extent) for a in self.advisories.values()]
            for site in sites:
                cover = None
                for event_id, start, extent in adv_at:
                    if start - 300.0 <= site <= start + extent + 300.0:
                        cover = event_id
                        break
                zones.append((site - CRASH_SURPRISE_UPSTREAM, site + CRASH_SURPRISE_DOWNSTREAM, cover))
        return zones

    def _surprised_mask(self, idx: np.ndarray) -> np.ndarray:
        """Imperfect drivers near a hazard they were not notified of: their
        perception of the traffic ahead lags behind reality."""
        out = np.zeros(idx.size, dtype=bool)
        zones = self._surprise_zones()
        if not zones:
            return out
        pos = self.pos[idx]
        imperfect = self.sigma[idx] > 0.0
        for lo, hi, event_id in zones:
            zone = (pos >= lo) & (pos <= hi)
            if event_id is not None and event_id in self._informed:
                zone &= ~self._informed[event_id][idx]
            out |= zone
        return out & imperfect

    def _suppression_mask(self, idx: np.ndarray) -> np.ndarray:
        """Discretionary changes advised against near hazards the driver knows of."""
        sup = np.zeros(idx.size, dtype=bool)
        pos = self.pos[idx]
        for adv in self.advisories.values():
            if not self.profile.suppress_discretionary_lc.get(adv.kind, False):
                continue
            informed = self._informed[adv.denm.event_id][idx]
            d_up = adv.start_abs - pos
            in_zone = (d_up <= self.profile.informed_ramp_start) & (pos <= adv.start_abs + adv.extent)
            sup |= informed & in_zone
        return sup

    def _plan_lane_changes(self, tables: list[_LaneTable], idx: np.ndarray, v_lim: np.ndarray) -> np.ndarray:
        """Target lane per vehicle (or -1 to keep); pure planning, no mutation."""
        cfg = self.config
        n = idx.size
        target = np.full(n, -1, dtype=int)
        if self.lane_count == 1 or n == 0:
            return target

        own_gap, own_lead_v, _slot = self._leader_info(tables, idx)
        b = self.decel_b[idx]
        tau = self.tau[idx]
        v = self.speed[idx]
        a = self.accel_a[idx]
        v_ant_own = np.minimum(np.minimum(v + a * cfg.dt, v_lim), _safe_speed_array(own_gap, own_lead_v, b, tau))

        d_event, d_stopped = self._blocker_distance(tables, idx)
        informed_blk = self._informed_of_blockage(idx)
        trigger = np.where(
            informed_blk, self.profile.informed_mandatory_lc_distance, self.profile.uninformed_sight_distance
        )
        need_mandatory = (d_event <= trigger) | (d_stopped <= cfg.lc_lookahead)
        urgent = np.minimum(d_event, d_stopped) <= cfg.lc_urgent_distance

        cooldown_ok = self.clock >= self.lc_block_until[idx]
        suppressed = self._suppression_mask(idx)

        my_lane = self.lane[idx]
        cand = []
        for tlane in (my_lane + 1, my_lane - 1):
            valid = (tlane >= 0) & (tlane < self.lane_count)
            lead_gap, lead_v, lag_gap, lag_v, lag_b, lag_tau = self._neighbor_info(
                tables, idx, np.where(valid, tlane, 0)
            )
            v_ant = np.minimum(np.minimum(v + a * cfg.dt, v_lim), _safe_speed_array(lead_gap, lead_v, b, tau))
            fits = (lead_gap > 0.5) & (lag_gap > 0.5)
            my_safe_after = _safe_speed_array(lead_gap, lead_v, b, tau)
            lag_safe_after = _safe_speed_array(lag_gap, v, lag_b, lag_tau)
            comfort = fits & (my_safe_after >= v - b * cfg.dt) & (lag_safe_after >= lag_v - lag_b * cfg.dt)
            relaxed = fits & (my_safe_after >= v - self.decel_emg[idx] * cfg.dt) & (
                lag_safe_after >= lag_v - lag_b * 2.0 * cfg.dt
            )
            cand.append(
                {"lane": tlane, "valid": valid, "v_ant": v_ant, "comfort": comfort, "relaxed": relaxed,
                 "lead_gap": lead_gap}
            )
        lc_left, lc_right = cand

        # Mandatory merges out of a blocked lane take whatever adjacent lane is safe.
        for c in (lc_left, lc_right):
            ok = need_mandatory & c["valid"] & np.where(urgent, c["relaxed"], c["comfort"])
            pick = ok & (target == -1)
            target = np.where(pick, c["lane"], target)
        better_right = (
            need_mandatory
            & lc_left["valid"]
            & lc_right["valid"]
            & (target == lc_left["lane"])
            & np.where(urgent, lc_right["relaxed"], lc_right["comfort"])
            & (lc_right["v_ant"] > lc_left["v_ant"])
        )
        target = np.where(better_right, lc_right["lane"], target)
        mandatory_chosen = target != -1

        # Discretionary: overtake when an adjacent lane is distinctly faster.
        free = ~need_mandatory & cooldown_ok & ~suppressed
        gain_left = lc_left["valid"] & lc_left["comfort"] & (lc_left["v_ant"] - v_ant_own > cfg.lc_gain)
        gain_right = lc_right["valid"] & lc_right["comfort"] & (lc_right["v_ant"] - v_ant_own > cfg.lc_gain)
        pick_right_gain = gain_right & (~gain_left | (lc_right["v_ant"] >= lc_left["v_ant"]))
        target = np.where(free & pick_right_gain, lc_right["lane"], target)
        target = np.where(free & gain_left & ~pick_right_gain, lc_left["lane"], target)

        # Keep-right: return when the slower lane costs nothing.
        undecided = free & (target == -1)
        keep_right = (
            undecided
            & lc_right["valid"]
            & lc_right["comfort"]
            & (lc_right["v_ant"] >= v_ant_own - 0.1)
            & (lc_right["lead_gap"] >= np.maximum(30.0, 1.8 * v))
        )
        target = np.where(keep_right, lc_right["lane"], target)

        allowed = mandatory_chosen | (cooldown_ok & ~suppressed)
        return np.where(allowed, target, -1)

    def _apply_lane_changes(self, idx: np.ndarray, target: np.ndarray, t: float) -> int:
        movers = np.flatnonzero(target >= 0)
        if movers.size == 0:
            return 0
        # Resolve conflicts: nearby movers into the same lane keep only the leader.
        order = np.argsort(-self.pos[idx[movers]], kind="stable")
        taken: dict[int, list[tuple[float, float]]] = {}
        count = 0
        for m in movers[order]:
            slot = int(idx[m])
            lane_to = int(target[m])
            front = float(self.pos[slot])
            rear = front - float(self.length[slot])
            clash = False
            for f, r in taken.get(lane_to, []):
                if front > r - 2.0 and rear < f + 2.0:
                    clash = True
                    break
            if clash:
                continue
            taken.setdefault(lane_to, []).append((front, rear))
            self.lane[slot] = lane_to
            self.lc_block_until[slot] = t + self.config.lc_cooldown
            count += 1
        if count:
            self.lane_change_times.extend([t] * count)
            self.kpis.add_lane_changes(t, count)
        return count

    def _update_motion(self, tables: list[_LaneTable], idx: np.ndarray, v_lim: np.ndarray, t: float) -> None:
        cfg = self.config
        gap, lead_v, lead_slot = self._leader_info(tables, idx)
        surprised = self._surprised_mask(idx)

        if surprised.any():
            # An unexpected standing blockage registers only on sight.
            is_phantom_lead = lead_slot <= -(10**8)
            hidden = surprised & is_phantom_lead & (gap > self.profile.uninformed_sight_distance)
            if hidden.any():
                no_ph = [tab.without_phantoms() if tab.has_phantom else tab for tab in tables]
                gap2, lead_v2, _s2 = self._leader_info(no_ph, idx)
                gap = np.where(hidden, gap2, gap)
                lead_v = np.where(hidden, lead_v2, lead_v)

        v = self.speed[idx]
        eta = self.rng_driver.random(idx.size)
        if surprised.any():
            # A lapse-prone driver caught out near a hazard runs on a
            # dead-reckoned picture of the leader: its speed and position as
            # of surprise_reaction ago, extrapolated forward at that
            # remembered speed.  In steady following the extrapolation is
            # exact and nothing changes; when the leader brakes hard both the
            # perceived gap and speed read high for the lag window, which is
            # how braking waves turn into rear-end chains.
            sub = np.flatnonzero(surprised & self.lapse_prone[idx] & (lead_slot >= 0))
            if sub.size:
                slot = lead_slot[sub]
                lag_v = self._speed_hist[0][slot]
                horizon = self._lag_steps * self.config.dt
                extrap_rear = self._pos_hist[0][slot] + lag_v * horizon - self.length[slot]
                extrap_gap = extrap_rear - self.pos[idx[sub]]
                lead_v[sub] = np.maximum(lead_v[sub], lag_v)
                gap[sub] = np.maximum(gap[sub], extrap_gap)
        v_safe = _safe_speed_array(gap, lead_v, self.decel_b[idx], self.tau[idx])
        v_des = np.minimum(np.minimum(v + self.accel_a[idx] * cfg.dt, v_lim), v_safe)
        v_new = v_des - eta * self.sigma[idx] * self.accel_a[idx] * cfg.dt
        v_new = np.maximum(v_new, v - self.decel_emg[idx] * cfg.dt)  # braking is physical
        v_new = np.maximum(v_new, 0.0)
        self.accel[idx] = (v_new - v) / cfg.dt
        self.speed[idx] = v_new
        self.pos[idx] += v_new * cfg.dt

        stopped = v_new < 0.3
        cur = self.stop_since[idx]
        self.stop_since[idx] = np.where(stopped, np.where(np.isnan(cur), t, cur), np.nan)

    def _apply_collisions(self, t: float) -> None:
        total_new = 0
        for _ in range(6):  # chain pileups settle within a few passes
            tables = self._lane_tables()
            new = 0
            for lane in range(self.lane_count):
                tab = tables[lane]
                if tab.front.size < 2:
                    continue
                overlap = tab.front[:-1] > tab.rear[1:] + 1e-9
                for k in np.flatnonzero(overlap):
                    follower = int(tab.idx[k])
                    if follower < 0 or self.status[follower] != DRIVING:
                        continue
                    leader = int(tab.idx[k + 1])
                    leader_id = (
                        self.vehicle_id(leader) if leader >= 0 else tab.ph_ids.get(leader, "blockage")
                    )
                    clamp = float(tab.rear[k + 1])
                    self.status[follower] = COLLIDED
                    self.speed[follower] = 0.0
                    self.accel[follower] = 0.0
                    self.pos[follower] = clamp
                    self.collided_until[follower] = t + self.config.collision_hold
                    self.collision_records.append(
                        CollisionRecord(
                            time=t,
                            location=self.net.linear_ref(clamp),
                            lane=lane,
                            follower_id=self.vehicle_id(follower),
                            leader_id=leader_id,
                        )
                    )
                    new += 1
            if new == 0:
                break
            total_new += new
        if total_new:
            self.kpis.add_collisions(t, total_new)

    def _retire_vehicles(self, t: float) -> None:
        driving = self.driving_mask()
        done = driving & (self.pos >= self.net.total_length)
        if done.any():
            self.status[done] = FINISHED
            self.exit_time[done] = t
            self.speed[done] = 0.0
        held = (self.status == COLLIDED) & (t >= self.collided_until)
        if held.any():
            self.status[held] = REMOVED
            self.exit_time[held] = t
        stuck = self.driving_mask() & ~np.isnan(self.stop_since) & (
            t - self.stop_since > self.config.teleport_after
        )
        if stuck.any():
            self.status[stuck] = REMOVED
            self.exit_time[stuck] = t
            self.teleported += int(np.count_nonzero(stuck))

    # -- main loop ------------------------------------------------------------

    def step(self) -> None:
        t = self.clock
        cfg = self.config
        self._activate_events(t)
        self._insert_vehicles(t)
        if self.tcs_enabled:
            self._apply_due_deliveries(t)
            if t >= self._next_tcs_time:
                self._tcs_cycle(t)
                self._next_tcs_time = t + cfg.cam_period
            self._broadcast_denms(t)

        idx = np.flatnonzero(self.driving_mask())
        if idx.size:
            v_lim = self._effective_limits(idx)
            tables = self._lane_tables()
            lc_every = max(1, round(cfg.lc_decision_period / cfg.dt))
            if self.step_count % lc_every == 0:
                target = self._plan_lane_changes(tables, idx, v_lim)
                if self._apply_lane_changes(idx, target, t):
                    tables = self._lane_tables()
            self._update_motion(tables, idx, v_lim, t)
        # Rotate the perception rings: oldest entry is surprise_reaction ago.
        self._speed_hist.pop(0)
        self._speed_hist.append(self.speed.copy())
        self._pos_hist.pop(0)
        self._pos_hist.append(self.pos.copy())
        self._apply_collisions(t)
        self._retire_vehicles(t)

        moving = np.flatnonzero(self.driving_mask())
        n_present = int(np.count_nonzero(self.present_mask()))
        self.kpis.add_step(t, cfg.dt, self.speed[moving], self.accel[moving], n_present)
        if self.collect_trajectories:
            for i in moving:
                self.trajectory.append((t, self.vehicle_id(int(i)), float(self.speed[i]), float(self.accel[i])))
        if self._hash is not None:
            self._hash.update(np.float64(t).tobytes())
            self._hash.update(self.status.tobytes())
            self._hash.update(self.pos.tobytes())
            self._hash.update(self.speed.tobytes())
            self._hash.update(self.lane.tobytes())
        self.clock = t + cfg.dt
        self.step_count += 1

    def run(self, until: float | None = None) -> None:
        stop = self.config.duration if until is None else until
        while self.clock < stop - 1e-9:
            self.step()

    def trace_digest(self) -> str:
        if self._hash is None:
            raise ConfigError("world was not created with trace_hash=True")
        return self._hash.hexdigest()

    # -- single-vehicle views (used by tests and the service API) -----------------

    def plan_lane_change(self, slot: int) -> str:
        """Planned maneuver for one vehicle: 'keep', 'left', or 'right'."""
        if self.status[slot] != DRIVING:
            return "keep"
        idx = np.flatnonzero(self.driving_mask())
        v_lim = self._effective_limits(idx)
        tables = self._lane_tables()
        target = self._plan_lane_changes(tables, idx, v_lim)
        where = np.flatnonzero(idx == slot)
        if where.size == 0 or target[where[0]] < 0:
            return "keep"
        return "left" if target[where[0]] > self.lane[slot] else "right"


def step(world: World, dt: float) -> World:
    if abs(dt - world.config.dt) > 1e-12:
        raise ConfigError("step dt must equal the configured dt")
    world.step()
    return world


def detect_collisions(world: World) -> list[CollisionRecord]:
    """Scan the current state for overlaps without mutating anything."""
    records = []
    for lane_tab in world._lane_tables():
        if lane_tab.front.size < 2:
            continue
        overlap = lane_tab.front[:-1] > lane_tab.rear[1:] + 1e-9
        for k in np.flatnonzero(overlap):
            follower = int(lane_tab.idx[k])
            if follower < 0 or world.status[follower] != DRIVING:
                continue
            leader = int(lane_tab.idx[k + 1])
            leader_id = world.vehicle_id(leader) if leader >= 0 else lane_tab.ph_ids.get(leader, "blockage")
            records.append(
                CollisionRecord(
                    time=world.clock,
                    location=world.net.linear_ref(float(lane_tab.rear[k + 1])),
                    lane=int(world.lane[follower]),
                    follower_id=world.vehicle_id(follower),
                    leader_id=leader_id,
                )
            )
    return records


def spawn_demand(world: World, clock: float) -> int:
    """Insert due vehicles at the chain start; returns how many entered."""
    before = world.inserted_count()
    world._insert_vehicles(clock)
    return world.inserted_count() - before
