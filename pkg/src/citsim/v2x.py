"""CAM/DENM message records and the two delivery channels.

Everything here is a pure function over a world snapshot plus a seeded
random stream; the simulation loop owns all mutation.  ITS-G5 delivery is
gated on roadside-unit coverage, cellular reaches the whole relevance window;
the ITS-G5 delivery set is therefore always a subset of the cellular one for
the same message and geometry.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .network import HazardKind, LinearRef, RoadNetwork, RsuLayout


class ChannelKind(str, enum.Enum):
    ITSG5 = "itsg5"
    CELLULAR = "cellular"


@dataclass(frozen=True)
class Cam:
    """Periodic vehicle status beacon."""

    station_id: str
    gen_time: float
    pos: LinearRef
    lane: int
    speed: float
    accel: float
    vclass: str  # "car" | "hgv"

    def to_json(self) -> dict:
        return {
            "station_id": self.station_id,
            "gen_time": self.gen_time,
            "pos": self.pos.to_json(),
            "lane": self.lane,
            "speed": self.speed,
            "accel": self.accel,
            "vclass": self.vclass,
        }


@dataclass(frozen=True)
class Denm:
    """Event-triggered hazard notification with a relevance area."""

    event_id: str
    cause: HazardKind
    location: LinearRef
    extent: float
    affected_lanes: frozenset[int] = frozenset()
    relevance_distance: float = 2000.0
    gen_time: float = 0.0
    valid_until: float = float("inf")
    advised_profile: str = "default"
    free_text: str | None = None
    cancellation: bool = False

    def __post_init__(self):
        if self.relevance_distance <= 0:
            raise ValueError("relevance_distance must be > 0")
        if self.valid_until <= self.gen_time:
            raise ValueError("valid_until must be after gen_time")

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "cause": self.cause.value,
            "location": self.location.to_json(),
            "extent": self.extent,
            "affected_lanes": sorted(self.affected_lanes),
            "relevance_distance": self.relevance_distance,
            "gen_time": self.gen_time,
            "valid_until": self.valid_until if self.valid_until != float("inf") else None,
            "advised_profile": self.advised_profile,
            "free_text": self.free_text,
            "cancellation": self.cancellation,
        }


@dataclass(frozen=True)
class ChannelModel:
    kind: ChannelKind
    rsus: RsuLayout | None = None
    latency: float = 0.2
    loss_prob: float = 0.005

    def __post_init__(self):
        if self.kind == ChannelKind.ITSG5 and self.rsus is None:
            raise ValueError("itsg5 channel requires an RSU layout")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must be in [0, 1)")


#: Representative channel defaults; no field measurements behind them.
ITSG5_LATENCY = 0.02
ITSG5_LOSS = 0.01
CELLULAR_LATENCY = 0.2
CELLULAR_LOSS = 0.005
CAM_PERIOD = 1.0
REBROADCAST_PERIOD = 5.0
RELEVANCE_DISTANCE = 2000.0


def make_channel(kind: ChannelKind | str, rsus: RsuLayout | None = None) -> ChannelModel:
    kind = ChannelKind(kind)
    if kind == ChannelKind.ITSG5:
        return ChannelModel(kind=kind, rsus=rsus, latency=ITSG5_LATENCY, loss_prob=ITSG5_LOSS)
    return ChannelModel(kind=kind, rsus=None, latency=CELLULAR_LATENCY, loss_prob=CELLULAR_LOSS)


def cam_due_mask(
    equipped: np.ndarray,
    driving: np.ndarray,
    last_emit: np.ndarray,
    clock: float,
    period: float,
) -> np.ndarray:
    """Which vehicles emit a CAM this step: equipped, driving, period elapsed."""
    if period <= 0:
        raise ValueError("CAM period must be > 0")
    return equipped & driving & (clock - last_emit >= period - 1e-9)


def emit_cams(world, clock: float, period: float = CAM_PERIOD) -> list[Cam]:
    """Sample one CAM per due equipped vehicle and stamp their emission times."""
    due = cam_due_mask(world.equipped, world.driving_mask(), world.last_cam_time, clock, period)
    idx = np.flatnonzero(due)
    cams = []
    for i in idx:
        cams.append(
            Cam(
                station_id=world.vehicle_id(int(i)),
                gen_time=clock,
                pos=world.net.linear_ref(float(world.pos[i])),
                lane=int(world.lane[i]),
                speed=float(world.speed[i]),
                accel=float(world.accel[i]),
                vclass="hgv" if world.is_hgv[i] else "car",
            )
        )
    world.last_cam_time[idx] = clock
    return cams


def coverage_mask(pos: np.ndarray, rsus: RsuLayout, net: RoadNetwork) -> np.ndarray:
    """True where a position lies within radio range of at least one RSU."""
    covered = np.zeros(pos.shape, dtype=bool)
    for rsu_pos in rsus.abs_positions(net):
        covered |= np.abs(pos - rsu_pos) <= rsus.range
    return covered


def deliver(
    denm: Denm,
    world,
    channel: ChannelModel,
    clock: float,
    rng: np.random.Generator,
) -> list[tuple[str, float]]:
    """Resolve one broadcast attempt of a DENM into (vehicle_id, delivery_time).

    Only equipped, driving vehicles inside the relevance window that do not
    already hold (or await) this event's notification are candidates; each
    candidate is lost independently with the channel's loss probability.
    The caller applies the deliveries at their delivery times.
    """
    loc = world.net.abs_pos(denm.location)
    lo, hi = loc - denm.relevance_distance, loc + denm.extent
    candidates = world.denm_candidates(denm.event_id)
    in_window = (world.pos >= lo) & (world.pos <= hi)
    mask = candidates & in_window
    if channel.kind == ChannelKind.ITSG5:
        mask &= coverage_mask(world.pos, channel.rsus, world.net)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    kept = idx if channel.loss_prob == 0 else idx[rng.random(idx.size) >= channel.loss_prob]
    t = clock + channel.latency
    return [(world.vehicle_id(int(i)), t) for i in kept]


# -- message log -------------------------------------------------------------


@dataclass
class MessageLog:
    """Line-delimited CAM/DENM record sink shared with the pilot-log tooling."""

    session_id: str
    base_epoch: str = "2022-06-20T00:00:00"
    lines: list[str] = field(default_factory=list)

    def _ts(self, sim_time: float) -> str:
        from datetime import datetime, timedelta

        t0 = datetime.fromisoformat(self.base_epoch)
        return (t0 + timedelta(seconds=sim_time)).isoformat()

    def record(self, msg_type: str, sim_time: float, station_id: str, payload: dict) -> None:
        import json

        self.lines.append(
            json.dumps(
                {
                    "v": 1,
                    "ts": self._ts(sim_time),
                    "session_id": self.session_id,
                    "station_id": station_id,
                    "msg_type": msg_type,
                    "payload": payload,
                },
                separators=(",", ":"),
            )
        )

    def record_cam(self, cam: Cam) -> None:
        self.record("CAM", cam.gen_time, cam.station_id, cam.to_json())

    def record_denm_delivery(self, denm: Denm, vehicle_id: str, t: float) -> None:
        self.record("DENM", t, vehicle_id, denm.to_json())
