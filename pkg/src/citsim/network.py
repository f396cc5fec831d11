"""Corridor road network: a one-directional chain of edges with linear referencing.

Each carriageway is modeled as an independent chain, so positions can be
expressed either as (edge_id, offset) pairs or as absolute meters from the
corridor start.  Networks are immutable after load and safe to share between
concurrently running simulations.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1


class DocumentError(ValueError):
    """Malformed network-description document."""


class ValidationError(ValueError):
    """Structurally parseable document that violates a network invariant."""


@dataclass(frozen=True)
class Edge:
    id: str
    length: float
    lane_count: int
    speed_limit: float  # m/s
    gradient: float = 0.0  # percent, signed
    successors: tuple[str, ...] = ()

    def __post_init__(self):
        if self.length <= 0:
            raise ValidationError(f"edge {self.id}: length must be > 0, got {self.length}")
        if self.lane_count < 1:
            raise ValidationError(f"edge {self.id}: lane_count must be >= 1")
        if self.speed_limit <= 0:
            raise ValidationError(f"edge {self.id}: speed_limit must be > 0")


@dataclass(frozen=True)
class LinearRef:
    """Position on the network as an offset from the start of one edge."""

    edge_id: str
    offset: float

    def to_json(self) -> dict:
        return {"edge_id": self.edge_id, "offset": self.offset}

    @classmethod
    def from_json(cls, obj: dict) -> "LinearRef":
        return cls(edge_id=str(obj["edge_id"]), offset=float(obj["offset"]))


class RoadNetwork:
    """Ordered chain of edges forming one carriageway."""

    def __init__(self, name: str, edges: Sequence[Edge]):
        if not edges:
            raise ValidationError("network must contain at least one edge")
        ids = [e.id for e in edges]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate edge ids")
        known = set(ids)
        for e in edges:
            for s in e.successors:
                if s not in known:
                    raise ValidationError(f"edge {e.id}: dangling successor {s!r}")
        # The edges must chain in listed order: each one's successors point at
        # the next edge, the last one has none.
        for prev, nxt in zip(edges, edges[1:]):
            if nxt.id not in prev.successors:
                raise ValidationError(
                    f"edges do not form a connected chain: {prev.id} does not lead to {nxt.id}"
                )
        if edges[-1].successors:
            raise ValidationError("last edge must not have successors")

        self.name = name
        self.edges: tuple[Edge, ...] = tuple(edges)
        self._index = {e.id: i for i, e in enumerate(self.edges)}
        lengths = np.array([e.length for e in self.edges], dtype=float)
        self.cum_start = np.concatenate(([0.0], np.cumsum(lengths)))  # len n+1
        self.total_length = float(self.cum_start[-1])
        self.speed_limits = np.array([e.speed_limit for e in self.edges], dtype=float)
        self.lane_counts = np.array([e.lane_count for e in self.edges], dtype=int)

    # -- linear referencing ------------------------------------------------

    def edge_index(self, edge_id: str) -> int:
        try:
            return self._index[edge_id]
        except KeyError:
            raise ValidationError(f"edge {edge_id!r} not on network {self.name!r}") from None

    def abs_pos(self, ref: LinearRef) -> float:
        i = self.edge_index(ref.edge_id)
        edge = self.edges[i]
        if not 0.0 <= ref.offset <= edge.length:
            raise ValidationError(
                f"offset {ref.offset} outside edge {ref.edge_id} (length {edge.length})"
            )
        return float(self.cum_start[i] + ref.offset)

    def linear_ref(self, pos: float) -> LinearRef:
        pos = min(max(pos, 0.0), self.total_length)
        i = int(np.searchsorted(self.cum_start, pos, side="right") - 1)
        i = min(i, len(self.edges) - 1)
        return LinearRef(self.edges[i].id, pos - float(self.cum_start[i]))

    def edge_index_at(self, pos: np.ndarray) -> np.ndarray:
        """Vectorized edge lookup for absolute positions (clipped to network)."""
        idx = np.searchsorted(self.cum_start, np.clip(pos, 0.0, self.total_length), side="right") - 1
        return np.clip(idx, 0, len(self.edges) - 1)

    def limit_at(self, pos: np.ndarray) -> np.ndarray:
        return self.speed_limits[self.edge_index_at(pos)]

    def lanes_at_ref(self, ref: LinearRef) -> int:
        return int(self.lane_counts[self.edge_index(ref.edge_id)])

    @property
    def uniform_lane_count(self) -> int:
        """Lane count when constant along the chain; simulation requires this."""
        counts = set(int(c) for c in self.lane_counts)
        if len(counts) != 1:
            raise ValidationError("network has varying lane counts; simulation needs a uniform profile")
        return counts.pop()

    def to_document(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "name": self.name,
            "edges": [
                {
                    "id": e.id,
                    "length": e.length,
                    "lane_count": e.lane_count,
                    "speed_limit": e.speed_limit,
                    "gradient": e.gradient,
                    "successors": list(e.successors),
                }
                for e in self.edges
            ],
        }


def distance_along(a: LinearRef, b: LinearRef, net: RoadNetwork) -> float:
    """Signed distance in meters from a to b; positive when b is downstream."""
    return net.abs_pos(b) - net.abs_pos(a)


# -- hazard events ---------------------------------------------------------


class HazardKind(str, enum.Enum):
    SLIPPERY_ROAD = "SlipperyRoad"
    TRAFFIC_JAM_AHEAD = "TrafficJamAhead"
    LANE_CLOSURE = "LaneClosure"
    OBSTACLE_ON_ROAD = "ObstacleOnRoad"
    FREE_TEXT_IVS = "FreeTextIvs"


class EventOrigin(str, enum.Enum):
    OPERATOR = "Operator"
    TCS_DETECTED = "TcsDetected"


#: Kinds realized as a physical blockage of the affected lanes.
BLOCKING_KINDS = frozenset({HazardKind.LANE_CLOSURE, HazardKind.OBSTACLE_ON_ROAD})


@dataclass(frozen=True)
class HazardEvent:
    """One active disturbance on the corridor.

    ``severity`` is a friction/capacity multiplier: effective speed inside the
    extent is scaled by it for kinds realized as slow zones.  Blocking kinds
    (lane closure, obstacle) ignore it and occupy their lanes instead.
    """

    id: str
    kind: HazardKind
    location: LinearRef
    extent: float
    affected_lanes: frozenset[int] = frozenset()  # empty = all lanes
    start_time: float = 0.0
    end_time: float = float("inf")
    severity: float = 1.0
    free_text: str | None = None
    origin: EventOrigin = EventOrigin.OPERATOR

    def __post_init__(self):
        if self.start_time >= self.end_time:
            raise ValidationError(f"event {self.id}: start_time must be < end_time")
        if not 0.0 < self.severity <= 1.0:
            raise ValidationError(f"event {self.id}: severity must be in (0, 1]")
        if self.kind == HazardKind.SLIPPERY_ROAD and self.severity >= 1.0:
            raise ValidationError(f"event {self.id}: slippery-road severity must be < 1")
        if self.kind in BLOCKING_KINDS and not self.affected_lanes:
            raise ValidationError(f"event {self.id}: {self.kind.value} must name at least one lane")
        if self.extent < 0:
            raise ValidationError(f"event {self.id}: extent must be >= 0")

    def validate_on(self, net: RoadNetwork) -> None:
        lanes_here = net.lanes_at_ref(self.location)
        bad = [l for l in self.affected_lanes if not 0 <= l < lanes_here]
        if bad:
            raise ValidationError(f"event {self.id}: lanes {bad} not valid at {self.location.edge_id}")
        net.abs_pos(self.location)  # raises if the ref is off-network

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "location": self.location.to_json(),
            "extent": self.extent,
            "affected_lanes": sorted(self.affected_lanes),
            "start_time": self.start_time,
            "end_time": self.end_time if self.end_time != float("inf") else None,
            "severity": self.severity,
            "free_text": self.free_text,
            "origin": self.origin.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HazardEvent":
        end = obj.get("end_time")
        return cls(
            id=str(obj["id"]),
            kind=HazardKind(obj["kind"]),
            location=LinearRef.from_json(obj["location"]),
            extent=float(obj["extent"]),
            affected_lanes=frozenset(int(l) for l in obj.get("affected_lanes", [])),
            start_time=float(obj.get("start_time", 0.0)),
            end_time=float(end) if end is not None else float("inf"),
            severity=float(obj.get("severity", 1.0)),
            free_text=obj.get("free_text"),
            origin=EventOrigin(obj.get("origin", "Operator")),
        )


@dataclass(frozen=True)
class RsuLayout:
    positions: tuple[LinearRef, ...]
    range: float

    def __post_init__(self):
        if self.range <= 0:
            raise ValidationError("RSU range must be > 0")

    def abs_positions(self, net: RoadNetwork) -> np.ndarray:
        return np.array([net.abs_pos(p) for p in self.positions], dtype=float)


@dataclass(frozen=True)
class DemandDefaults:
    """Per-preset demand levels (total vehicles per run) and fleet mix."""

    levels: dict[str, int] = field(default_factory=dict)
    hgv_share: float = 0.0


# -- document I/O ----------------------------------------------------------


def load_network(text: str) -> RoadNetwork:
    """Parse a network-description document (JSON text) into a RoadNetwork."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"malformed network document: {exc}") from exc
    if not isinstance(doc, dict) or "edges" not in doc:
        raise DocumentError("network document must be an object with an 'edges' array")
    try:
        edges = [
            Edge(
                id=str(e["id"]),
                length=float(e["length"]),
                lane_count=int(e["lane_count"]),
                speed_limit=float(e["speed_limit"]),
                gradient=float(e.get("gradient", 0.0)),
                successors=tuple(str(s) for s in e.get("successors", [])),
            )
            for e in doc["edges"]
        ]
    except (KeyError, TypeError) as exc:
        raise DocumentError(f"edge record missing or malformed field: {exc}") from exc
    return RoadNetwork(name=str(doc.get("name", "unnamed")), edges=edges)


def save_network(net: RoadNetwork) -> str:
    return json.dumps(net.to_document(), indent=2)


PRESET_NAMES = ("attica", "egnatia")


def _preset_text(name: str) -> str:
    return resources.files("citsim").joinpath(f"presets/{name}").read_text(encoding="utf-8")


def corridor_preset(name: str) -> tuple[RoadNetwork, RsuLayout, DemandDefaults]:
    """Load one of the shipped corridor presets by name."""
    if name not in PRESET_NAMES:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    doc = json.loads(_preset_text(name))
    net = load_network(json.dumps(doc))
    rsu_doc = doc["rsu"]
    layout = RsuLayout(
        positions=tuple(LinearRef.from_json(p) for p in rsu_doc["positions"]),
        range=float(rsu_doc["range"]),
    )
    for p in layout.positions:
        net.abs_pos(p)
    demand_doc = doc.get("demand", {})
    demand = DemandDefaults(
        levels={str(k): int(v) for k, v in demand_doc.get("levels", {}).items()},
        hgv_share=float(demand_doc.get("hgv_share", 0.0)),
    )
    return net, layout, demand


def events_from_json(items: Iterable[dict]) -> list[HazardEvent]:
    return [HazardEvent.from_json(o) for o in items]
