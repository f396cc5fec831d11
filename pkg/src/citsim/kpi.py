"""The five corridor KPIs and the CO2 emission model behind one of them.

KPIs are aggregated per run over a measurement window (warm-up excluded):
lane changes per vehicle-km, collision count, CO2 grams per vehicle-km,
space-mean speed in km/h, and travel time in min/km.  Space-mean speed is
total vehicle-km over total vehicle-hours, which makes speed and travel time
exact reciprocals (times 60).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class KpiError(ValueError):
    pass


@dataclass(frozen=True)
class Co2Model:
    """CO2 emission rate r(v, a) = max(r_idle, c0 + c1*v + c2*v^3 + c3*v*max(a, 0)).

    Speeds in m/s, accelerations in m/s^2, rates in g/s.  The cubic term
    captures aerodynamic load at motorway speeds, the acceleration term the
    extra fuel burned regaining speed; braking and coasting fall back toward
    the idle floor.
    """

    r_idle: float = 0.9
    c0: float = 0.5
    c1: float = 0.12
    c2: float = 0.00025
    c3: float = 0.38

    def __post_init__(self):
        if self.r_idle <= 0:
            raise KpiError("r_idle must be > 0")

    def rate(self, v: float, a: float) -> float:
        r = self.c0 + self.c1 * v + self.c2 * v**3 + self.c3 * v * max(a, 0.0)
        return max(self.r_idle, r)

    def rate_array(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        r = self.c0 + self.c1 * v + self.c2 * v**3 + self.c3 * v * np.maximum(a, 0.0)
        return np.maximum(self.r_idle, r)

    def grams_per_km_at_cruise(self, speed_ms: float) -> float:
        if speed_ms <= 0:
            raise KpiError("cruise speed must be > 0")
        return self.rate(speed_ms, 0.0) / speed_ms * 1000.0


def co2_rate(v: float, a: float, model: Co2Model) -> float:
    return model.rate(v, a)


#: Default model, fixed by calibrate_co2(310 g/km at 80 km/h) on the base shape.
DEFAULT_CO2_MODEL = Co2Model(
    r_idle=0.9,
    c0=0.5828014390158988,
    c1=0.1398723453638157,
    c2=0.0002914007195079494,
    c3=0.44292909365208305,
)


def _integrated_g_per_km(model: Co2Model, speeds: np.ndarray, accels: np.ndarray, dt: float) -> float:
    grams = float(np.sum(model.rate_array(speeds, accels)) * dt)
    km = float(np.sum(speeds) * dt) / 1000.0
    if km <= 0:
        raise KpiError("zero distance in emission integration")
    return grams / km


def calibrate_co2(
    target_g_per_km: float,
    ref_speed_kmh: float = 80.0,
    base: Co2Model = Co2Model(),
) -> Co2Model:
    """Scale the base coefficient shape so a steady cruise at the reference
    speed emits the target grams per km, then verify by numeric integration."""
    if target_g_per_km <= 0 or ref_speed_kmh <= 0:
        raise KpiError("target and reference speed must be > 0")
    v = ref_speed_kmh / 3.6
    needed_rate = target_g_per_km * v / 1000.0  # g/s at cruise
    if needed_rate < base.r_idle:
        floor = base.r_idle / v * 1000.0
        raise KpiError(
            f"target {target_g_per_km} g/km below idle-implied floor {floor:.1f} g/km at {ref_speed_kmh} km/h"
        )
    base_rate = base.c0 + base.c1 * v + base.c2 * v**3
    scale = needed_rate / base_rate
    model = Co2Model(
        r_idle=base.r_idle,
        c0=base.c0 * scale,
        c1=base.c1 * scale,
        c2=base.c2 * scale,
        c3=base.c3 * scale,
    )
    # Independent check: integrate a 10-minute constant-speed trajectory.
    n = int(600.0 / 0.5)
    got = _integrated_g_per_km(model, np.full(n, v), np.zeros(n), 0.5)
    if abs(got - target_g_per_km) / target_g_per_km >= 0.01:
        raise KpiError(f"calibration check failed: {got:.2f} g/km vs target {target_g_per_km}")
    return model


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class KpiReport:
    lane_changes_per_vkm: float
    collisions: float
    co2_g_per_km: float
    avg_speed_kmh: float
    travel_time_min_per_km: float
    vehicle_km: float
    vehicle_hours: float

    @classmethod
    def from_totals(
        cls,
        vehicle_km: float,
        vehicle_hours: float,
        co2_grams: float,
        lane_changes: float,
        collisions: float,
    ) -> "KpiReport":
        if vehicle_km <= 0 or vehicle_hours <= 0:
            raise KpiError("report undefined: zero vehicle-km in measurement window")
        avg = vehicle_km / vehicle_hours
        return cls(
            lane_changes_per_vkm=lane_changes / vehicle_km,
            collisions=collisions,
            co2_g_per_km=co2_grams / vehicle_km,
            avg_speed_kmh=avg,
            travel_time_min_per_km=60.0 / avg,
            vehicle_km=vehicle_km,
            vehicle_hours=vehicle_hours,
        )

    def to_json(self) -> dict:
        return {
            "lane_changes_per_vkm": self.lane_changes_per_vkm,
            "collisions": self.collisions,
            "co2_g_per_km": self.co2_g_per_km,
            "avg_speed_kmh": self.avg_speed_kmh,
            "travel_time_min_per_km": self.travel_time_min_per_km,
            "vehicle_km": self.vehicle_km,
            "vehicle_hours": self.vehicle_hours,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KpiReport":
        return cls(**{k: float(obj[k]) for k in cls.__dataclass_fields__})


KPI_FIELDS = tuple(KpiReport.__dataclass_fields__)


def mean_report(reports: Sequence[KpiReport]) -> KpiReport:
    """Field-wise arithmetic mean across replications (summary row, not a run)."""
    if not reports:
        raise KpiError("no reports to average")
    return KpiReport(**{f: float(np.mean([getattr(r, f) for r in reports])) for f in KPI_FIELDS})


class StepAccumulator:
    """Online KPI accumulation inside the measurement window of one run."""

    def __init__(self, window_start: float, window_end: float, model: Co2Model = DEFAULT_CO2_MODEL):
        self.window = (window_start, window_end)
        self.model = model
        self.vkm = 0.0
        self.vh = 0.0
        self.co2_g = 0.0
        self.lane_changes = 0
        self.collisions = 0

    def in_window(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]

    def add_step(self, t: float, dt: float, speeds: np.ndarray, accels: np.ndarray, n_present: int) -> None:
        """Record one step; ``speeds`` covers moving vehicles, ``n_present``
        counts every vehicle on the road (queued and stopped ones included)."""
        if not self.in_window(t):
            return
        if speeds.size:
            self.vkm += float(np.sum(speeds)) * dt / 1000.0
            self.co2_g += float(np.sum(self.model.rate_array(speeds, accels))) * dt
        self.vh += n_present * dt / 3600.0
        # Stopped vehicles idle at the floor rate.
        self.co2_g += (n_present - speeds.size) * self.model.r_idle * dt

    def add_lane_changes(self, t: float, count: int) -> None:
        if self.in_window(t):
            self.lane_changes += count

    def add_collisions(self, t: float, count: int) -> None:
        if self.in_window(t):
            self.collisions += count

    def to_report(self) -> KpiReport:
        return KpiReport.from_totals(self.vkm, self.vh, self.co2_g, self.lane_changes, self.collisions)


def aggregate(
    samples: Iterable[tuple[float, str, float, float]],
    collision_times: Iterable[float],
    lane_change_times: Iterable[float],
    window: tuple[float, float],
    dt: float,
    model: Co2Model = DEFAULT_CO2_MODEL,
) -> KpiReport:
    """Aggregate a trajectory record stream into one KpiReport.

    ``samples`` are (time, vehicle_id, speed, accel) step records; distance
    per record is speed*dt.  Records outside the window are ignored, so the
    result is independent of record ordering and vehicle interleaving.
    """
    lo, hi = window
    vkm = vh = co2 = 0.0
    for t, _vid, v, a in samples:
        if not lo <= t < hi:
            continue
        vkm += v * dt / 1000.0
        vh += dt / 3600.0
        co2 += model.rate(v, a) * dt
    n_coll = sum(1 for t in collision_times if lo <= t < hi)
    n_lc = sum(1 for t in lane_change_times if lo <= t < hi)
    return KpiReport.from_totals(vkm, vh, co2, n_lc, n_coll)
