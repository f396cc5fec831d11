"""Traffic Control Server: tracks CAM streams, flags incidents, manages DENMs.

Three triggers mirror how a control center reads probe traffic: sustained
abrupt deceleration, a station falling silent mid-corridor, and a vehicle
standing still on the carriageway.  Stationary vehicles confirm immediately;
the other two need corroboration from a second station nearby.  Confirmed
candidates map to obstacle notifications; operator-injected events bypass
detection and publish directly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .network import EventOrigin, HazardEvent, HazardKind, LinearRef, RoadNetwork
from .v2x import Cam, Denm


class TcsError(ValueError):
    pass


class IncidentKind(str, enum.Enum):
    ABRUPT_DECELERATION = "AbruptDeceleration"
    CAM_SILENCE = "CamSilence"
    STATIONARY_VEHICLE = "StationaryVehicle"


@dataclass(frozen=True)
class TrackedStation:
    station_id: str
    last_cam: Cam
    last_seen: float
    smoothed_decel: float
    decel_onset: float | None
    low_speed_onset: float | None


@dataclass
class IncidentCandidate:
    kind: IncidentKind
    station_id: str
    location: LinearRef
    raised_at: float
    confirmed: bool = False
    last_raised: float = 0.0
    denm_id: str | None = None


@dataclass(frozen=True)
class PvdAggregate:
    edge_id: str
    window: tuple[float, float]
    mean_speed: float
    vehicle_count: int
    hgv_count: int


@dataclass(frozen=True)
class DetectionConfig:
    alpha: float = 0.5  # CAM-to-CAM deceleration smoothing
    a_th: float = 4.0  # m/s^2, abrupt-deceleration threshold
    d_th: float = 2.0  # s, sustained-deceleration duration
    s_th: float = 5.0  # s, CAM-silence timeout
    v_min: float = 5.0  # m/s, silence only suspicious above this last speed
    v_stop: float = 1.0  # m/s, standstill threshold
    p_th: float = 10.0  # s, standstill duration before raising
    n_conf: int = 2  # corroborating stations
    r_conf: float = 200.0  # m, corroboration / clustering radius
    exit_margin: float = 200.0  # m, silence ignored near the chain end
    v_clear: float = 10.0  # m/s, speed at which an incident reads as cleared
    c_th: float = 15.0  # s, sustained clear speed before auto-cancel
    candidate_ttl: float = 30.0  # s without re-raise before a candidate lapses
    evict_after: float = 60.0  # s of silence before a station is dropped
    denm_validity: float = 30.0  # s, refreshed while the incident persists
    detected_extent: float = 30.0  # m, advisory extent around a detected obstacle
    max_detected_active: int = 24


class TrafficControlServer:
    """Single-corridor TCS; owned and stepped by one simulation loop."""

    def __init__(self, net: RoadNetwork, config: DetectionConfig = DetectionConfig(), relevance_distance: float = 2000.0):
        self.net = net
        self.config = config
        self.relevance_distance = relevance_distance
        self._slots: dict[str, int] = {}
        self._ids: list[str] = []
        n = 64
        self._last_seen = np.full(n, np.nan)
        self._last_gen = np.full(n, np.nan)
        self._last_speed = np.zeros(n)
        self._last_pos = np.zeros(n)
        self._last_lane = np.zeros(n, dtype=int)
        self._smoothed = np.zeros(n)
        self._decel_onset = np.full(n, np.nan)
        self._low_onset = np.full(n, np.nan)
        self._clear_onset = np.full(n, np.nan)
        self._tracked = np.zeros(n, dtype=bool)
        self.stale_count = 0
        self.candidates: dict[tuple[IncidentKind, str], IncidentCandidate] = {}
        self.active_denms: dict[str, Denm] = {}
        self._operator_events: dict[str, str] = {}  # event id -> denm id (1:1)
        self._detected_seq = 0
        self.decision_log: list[str] = []

    # -- bookkeeping --------------------------------------------------------

    def _grow(self, need: int) -> None:
        cur = self._last_seen.size
        if need <= cur:
            return
        new = max(need, cur * 2)

        def ext(arr, fill):
            out = np.full(new, fill, dtype=arr.dtype)
            out[:cur] = arr
            return out

        self._last_seen = ext(self._last_seen, np.nan)
        self._last_gen = ext(self._last_gen, np.nan)
        self._last_speed = ext(self._last_speed, 0.0)
        self._last_pos = ext(self._last_pos, 0.0)
        self._last_lane = ext(self._last_lane, 0)
        self._smoothed = ext(self._smoothed, 0.0)
        self._decel_onset = ext(self._decel_onset, np.nan)
        self._low_onset = ext(self._low_onset, np.nan)
        self._clear_onset = ext(self._clear_onset, np.nan)
        self._tracked = ext(self._tracked, False)

    def _slot(self, station_id: str) -> int:
        s = self._slots.get(station_id)
        if s is None:
            s = len(self._ids)
            self._slots[station_id] = s
            self._ids.append(station_id)
            self._grow(s + 1)
        return s

    def _log(self, clock: float, action: str, **fields) -> None:
        self.decision_log.append(json.dumps({"t": clock, "action": action, **fields}, separators=(",", ":")))

    @property
    def tracked_count(self) -> int:
        return int(np.count_nonzero(self._tracked))

    def station(self, station_id: str) -> TrackedStation:
        s = self._slots[station_id]
        cam = Cam(
            station_id=station_id,
            gen_time=float(self._last_gen[s]),
            pos=self.net.linear_ref(float(self._last_pos[s])),
            lane=int(self._last_lane[s]),
            speed=float(self._last_speed[s]),
            accel=0.0,
            vclass="car",
        )
        return TrackedStation(
            station_id=station_id,
            last_cam=cam,
            last_seen=float(self._last_seen[s]),
            smoothed_decel=float(self._smoothed[s]),
            decel_onset=None if np.isnan(self._decel_onset[s]) else float(self._decel_onset[s]),
            low_speed_onset=None if np.isnan(self._low_onset[s]) else float(self._low_onset[s]),
        )

    # -- ingest ---------------------------------------------------------------

    def ingest_cam(self, cam: Cam) -> None:
        pos = self.net.abs_pos(cam.pos)
        self.ingest_batch([cam.station_id], np.array([cam.gen_time]), np.array([pos]), np.array([cam.speed]), np.array([cam.lane]))

    def ingest_batch(
        self,
        station_ids: list[str],
        gen_times: np.ndarray,
        positions: np.ndarray,
        speeds: np.ndarray,
        lanes: np.ndarray,
    ) -> None:
        """Vectorized CAM ingest; the object API wraps a one-element batch."""
        if not station_ids:
            return
        slots = np.fromiter((self._slot(sid) for sid in station_ids), dtype=int, count=len(station_ids))
        self._ingest_core(slots, gen_times, positions, speeds, lanes)

    def ingest_indexed(
        self,
        slots: np.ndarray,
        gen_times: np.ndarray,
        positions: np.ndarray,
        speeds: np.ndarray,
        lanes: np.ndarray,
    ) -> None:
        """Hot-path ingest where station slot i is the vehicle named "v{i}".

        Not to be mixed with string-id ingest on the same server instance.
        """
        if slots.size == 0:
            return
        max_slot = int(slots.max())
        while len(self._ids) <= max_slot:
            sid = f"v{len(self._ids)}"
            self._slots[sid] = len(self._ids)
            self._ids.append(sid)
        self._grow(max_slot + 1)
        self._ingest_core(slots, gen_times, positions, speeds, lanes)

    def _ingest_core(
        self,
        slots: np.ndarray,
        gen_times: np.ndarray,
        positions: np.ndarray,
        speeds: np.ndarray,
        lanes: np.ndarray,
    ) -> None:
        known = self._tracked[slots]
        stale = known & (gen_times < self._last_gen[slots])
        dup = known & (gen_times == self._last_gen[slots])
        self.stale_count += int(np.count_nonzero(stale))
        ok = ~(stale | dup)
        s = slots[ok]
        if s.size == 0:
            return
        gt, sp, px, ln = gen_times[ok], speeds[ok], positions[ok], lanes[ok]
        first = ~self._tracked[s]
        dt = gt - self._last_gen[s]
        with np.errstate(invalid="ignore", divide="ignore"):
            inst = np.where(first | (dt <= 0), 0.0, (sp - self._last_speed[s]) / np.where(dt > 0, dt, 1.0))
        cfg = self.config
        prev = np.where(first, 0.0, self._smoothed[s])
        self._smoothed[s] = np.where(first, 0.0, cfg.alpha * inst + (1 - cfg.alpha) * prev)

        decel_now = self._smoothed[s] <= -cfg.a_th
        cur_onset = self._decel_onset[s]
        self._decel_onset[s] = np.where(decel_now, np.where(np.isnan(cur_onset), gt, cur_onset), np.nan)

        low_now = sp < cfg.v_stop
        cur_low = self._low_onset[s]
        self._low_onset[s] = np.where(low_now, np.where(np.isnan(cur_low), gt, cur_low), np.nan)

        clear_now = sp > cfg.v_clear
        cur_clear = self._clear_onset[s]
        self._clear_onset[s] = np.where(clear_now, np.where(np.isnan(cur_clear), gt, cur_clear), np.nan)

        self._last_seen[s] = gt
        self._last_gen[s] = gt
        self._last_speed[s] = sp
        self._last_pos[s] = px
        self._last_lane[s] = ln
        self._tracked[s] = True

    # -- detection --------------------------------------------------------------

    def detect_incidents(self, clock: float) -> list[IncidentCandidate]:
        """Raise/refresh candidates from tracked state; returns confirmed ones."""
        cfg = self.config
        tracked = self._tracked
        n = len(self._ids)
        tr = tracked[:n]

        abrupt = tr & ~np.isnan(self._decel_onset[:n]) & (clock - self._decel_onset[:n] >= cfg.d_th)
        silent = (
            tr
            & (clock - self._last_seen[:n] > cfg.s_th)
            & (self._last_speed[:n] > cfg.v_min)
            & (self._last_pos[:n] < self.net.total_length - cfg.exit_margin)
        )
        still = (
            tr
            & ~np.isnan(self._low_onset[:n])
            & (clock - self._low_onset[:n] >= cfg.p_th)
            & (clock - self._last_seen[:n] <= 3.0)  # must still be transmitting
        )

        for kind, mask in (
            (IncidentKind.ABRUPT_DECELERATION, abrupt),
            (IncidentKind.CAM_SILENCE, silent),
            (IncidentKind.STATIONARY_VEHICLE, still),
        ):
            for s in np.flatnonzero(mask):
                sid = self._ids[s]
                key = (kind, sid)
                cand = self.candidates.get(key)
                if cand is None:
                    cand = IncidentCandidate(
                        kind=kind,
                        station_id=sid,
                        location=self.net.linear_ref(float(self._last_pos[s])),
                        raised_at=clock,
                    )
                    self.candidates[key] = cand
                    self._log(clock, "raised", kind=kind.value, station=sid,
                              pos=round(float(self._last_pos[s]), 1))
                cand.last_raised = clock

        self._expire_and_autocancel(clock)
        self._confirm(clock)
        self._evict_stale(clock)
        return [c for c in self.candidates.values() if c.confirmed]

    def _confirm(self, clock: float) -> None:
        cfg = self.config
        by_kind: dict[IncidentKind, list[IncidentCandidate]] = {}
        for cand in self.candidates.values():
            by_kind.setdefault(cand.kind, []).append(cand)
        for kind, cands in by_kind.items():
            for cand in cands:
                if cand.confirmed:
                    continue
                if kind == IncidentKind.STATIONARY_VEHICLE:
                    cand.confirmed = True
                else:
                    here = self.net.abs_pos(cand.location)
                    near = [
                        o
                        for o in cands
                        if abs(self.net.abs_pos(o.location) - here) <= cfg.r_conf
                    ]
                    if len({o.station_id for o in near}) >= cfg.n_conf:
                        cand.confirmed = True
                if cand.confirmed:
                    self._log(clock, "confirmed", kind=kind.value, station=cand.station_id)

    def _expire_and_autocancel(self, clock: float) -> None:
        cfg = self.config
        gone: list[tuple[IncidentKind, str]] = []
        for key, cand in self.candidates.items():
            s = self._slots.get(cand.station_id)
            resumed = (
                s is not None
                and not np.isnan(self._clear_onset[s])
                and clock - self._clear_onset[s] >= cfg.c_th
            )
            lapsed = clock - cand.last_raised > cfg.candidate_ttl
            if resumed or lapsed:
                gone.append(key)
                self._log(clock, "cleared", kind=cand.kind.value, station=cand.station_id,
                          reason="resumed" if resumed else "lapsed")
        for key in gone:
            cand = self.candidates.pop(key)
            if cand.denm_id and not any(
                c.denm_id == cand.denm_id for c in self.candidates.values()
            ):
                if cand.denm_id in self.active_denms:
                    self.cancel_denm(cand.denm_id, clock)

    def _evict_stale(self, clock: float) -> None:
        n = len(self._ids)
        stale = self._tracked[:n] & (clock - self._last_seen[:n] > self.config.evict_after)
        self._tracked[np.flatnonzero(stale)] = False

    # -- DENM lifecycle -----------------------------------------------------------

    def publish_denm(self, source: HazardEvent | IncidentCandidate, clock: float) -> Denm:
        cfg = self.config
        if isinstance(source, HazardEvent):
            event_id = source.id
            denm = Denm(
                event_id=event_id,
                cause=source.kind,
                location=source.location,
                extent=source.extent,
                affected_lanes=source.affected_lanes,
                relevance_distance=self.relevance_distance,
                gen_time=clock,
                valid_until=min(source.end_time, clock + cfg.denm_validity)
                if source.end_time != float("inf")
                else clock + cfg.denm_validity,
                free_text=source.free_text,
            )
            prior = self.active_denms.get(event_id)
            if prior is not None:
                denm = prior if prior.valid_until >= denm.valid_until else denm
            self.active_denms[event_id] = denm
            self._operator_events[event_id] = event_id
            self._log(clock, "published", event=event_id, cause=source.kind.value)
            return denm

        if not source.confirmed:
            raise TcsError("cannot publish an unconfirmed candidate")
        here = self.net.abs_pos(source.location)
        if source.denm_id is None:
            # Fold into an existing detected advisory covering the same spot.
            for did, d in self.active_denms.items():
                if did.startswith("det:") and d.cause == HazardKind.OBSTACLE_ON_ROAD:
                    if abs(self.net.abs_pos(d.location) - here) <= cfg.r_conf:
                        source.denm_id = did
                        break
        if source.denm_id is None:
            n_detected = sum(1 for d in self.active_denms if d.startswith("det:"))
            if n_detected >= cfg.max_detected_active:
                return next(d for did, d in self.active_denms.items() if did.startswith("det:"))
            self._detected_seq += 1
            source.denm_id = f"det:{self._detected_seq}"
        event_id = source.denm_id
        s = self._slots.get(source.station_id)
        lane = int(self._last_lane[s]) if s is not None else 0
        denm = Denm(
            event_id=event_id,
            cause=HazardKind.OBSTACLE_ON_ROAD,
            location=source.location,
            extent=cfg.detected_extent,
            affected_lanes=frozenset({lane}),
            relevance_distance=self.relevance_distance,
            gen_time=clock,
            valid_until=clock + cfg.denm_validity,
        )
        fresh = event_id not in self.active_denms
        self.active_denms[event_id] = denm
        if fresh:
            self._log(clock, "published", event=event_id, cause=denm.cause.value,
                      station=source.station_id)
        return denm

    def refresh_denms(self, clock: float) -> None:
        """Extend validity of DENMs whose backing condition still holds."""
        live_ids = {c.denm_id for c in self.candidates.values() if c.denm_id}
        for event_id, denm in list(self.active_denms.items()):
            if event_id in live_ids:
                self.active_denms[event_id] = Denm(
                    **{**denm.__dict__, "valid_until": clock + self.config.denm_validity}
                )
            elif denm.valid_until <= clock and not denm.cancellation:
                self.cancel_denm(event_id, clock)

    def cancel_denm(self, event_id: str, clock: float) -> Denm:
        denm = self.active_denms.get(event_id)
        if denm is None or denm.cancellation:
            raise TcsError(f"no active notification for event {event_id!r}")
        cancellation = Denm(
            **{**denm.__dict__, "gen_time": clock, "valid_until": clock + 1.0, "cancellation": True}
        )
        del self.active_denms[event_id]
        self._log(clock, "cancelled", event=event_id)
        return cancellation


def aggregate_pvd(
    cams: list[Cam],
    window: tuple[float, float],
    net: RoadNetwork,
) -> list[PvdAggregate]:
    """Per-edge probe summaries over a time window; edges without CAMs omitted."""
    lo, hi = window
    if hi <= lo:
        raise TcsError("window must have positive duration")
    speeds: dict[str, list[float]] = {}
    hgv: dict[str, int] = {}
    for cam in cams:
        if not lo <= cam.gen_time < hi:
            continue
        speeds.setdefault(cam.pos.edge_id, []).append(cam.speed)
        if cam.vclass == "hgv":
            hgv[cam.pos.edge_id] = hgv.get(cam.pos.edge_id, 0) + 1
    order = {e.id: i for i, e in enumerate(net.edges)}
    out = []
    for edge_id in sorted(speeds, key=lambda e: order.get(e, 1 << 30)):
        vals = speeds[edge_id]
        out.append(
            PvdAggregate(
                edge_id=edge_id,
                window=window,
                mean_speed=float(np.mean(vals)),
                vehicle_count=len(vals),
                hgv_count=hgv.get(edge_id, 0),
            )
        )
    return out
