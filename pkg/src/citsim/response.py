"""Driver-response rules: how informed vs uninformed drivers adapt to a hazard.

Informed drivers (equipped vehicles holding the hazard notification) ease off
early: full speed outside the approach ramp, a linear ramp down to 0.8x the
limit at the hazard start, and 0.6x while inside the hazard extent.
Uninformed drivers only react on sight, dropping to 0.6x within 150 m of the
hazard and through its extent.  All functions here are stateless and are
called both per-vehicle (scalar) and per-step over whole vehicle arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .network import HazardKind


@dataclass(frozen=True)
class ResponseProfile:
    informed_ramp_start: float = 500.0  # m upstream where the informed ramp begins
    informed_factor_at_event_approach: float = 0.8
    informed_factor_on_event_edge: float = 0.6
    uninformed_sight_distance: float = 150.0
    uninformed_factor: float = 0.6
    informed_mandatory_lc_distance: float = 500.0
    suppress_discretionary_lc: dict[HazardKind, bool] = field(
        default_factory=lambda: {
            HazardKind.SLIPPERY_ROAD: True,
            HazardKind.TRAFFIC_JAM_AHEAD: True,
            HazardKind.LANE_CLOSURE: True,
            HazardKind.OBSTACLE_ON_ROAD: True,
            HazardKind.FREE_TEXT_IVS: False,
        }
    )

    def __post_init__(self):
        for name in ("informed_factor_at_event_approach", "informed_factor_on_event_edge", "uninformed_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        for name in ("informed_ramp_start", "uninformed_sight_distance", "informed_mandatory_lc_distance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def with_overrides(self, **kwargs) -> "ResponseProfile":
        return replace(self, **kwargs)


class LaneAdvice(enum.Enum):
    NORMAL = "normal"
    SUPPRESS_DISCRETIONARY = "suppress_discretionary"
    BEGIN_MANDATORY = "begin_mandatory"


def speed_factor(
    informed: bool,
    d_upstream: float,
    on_extent: bool,
    profile: ResponseProfile,
) -> float:
    """Multiplier applied to the local speed limit while approaching a hazard.

    ``d_upstream`` is the distance in meters to the hazard start (0 at the
    approach point); ``on_extent`` is True while the vehicle is inside the
    hazard extent, where the 0.6 factor holds for both driver kinds.
    """
    if on_extent:
        return profile.informed_factor_on_event_edge if informed else profile.uninformed_factor
    if d_upstream < 0:
        return 1.0  # already past the hazard
    if informed:
        ramp = profile.informed_ramp_start
        if d_upstream > ramp:
            return 1.0
        lo = profile.informed_factor_at_event_approach
        if ramp == 0:
            return lo
        return lo + (1.0 - lo) * (d_upstream / ramp)
    if d_upstream <= profile.uninformed_sight_distance:
        return profile.uninformed_factor
    return 1.0


def speed_factor_array(
    informed: np.ndarray,
    d_upstream: np.ndarray,
    on_extent: np.ndarray,
    profile: ResponseProfile,
) -> np.ndarray:
    """Vectorized :func:`speed_factor` over per-vehicle arrays."""
    ramp = profile.informed_ramp_start
    lo = profile.informed_factor_at_event_approach
    if ramp > 0:
        ramp_factor = np.clip(lo + (1.0 - lo) * (d_upstream / ramp), lo, 1.0)
    else:
        ramp_factor = np.full_like(d_upstream, lo)
    f_inf = np.where(d_upstream > ramp, 1.0, ramp_factor)
    f_inf = np.where(on_extent, profile.informed_factor_on_event_edge, f_inf)

    f_uninf = np.where(d_upstream <= profile.uninformed_sight_distance, profile.uninformed_factor, 1.0)
    f_uninf = np.where(on_extent, profile.uninformed_factor, f_uninf)

    out = np.where(informed, f_inf, f_uninf)
    # Past the hazard (and not inside it) there is no response either way.
    return np.where((d_upstream < 0) & ~on_extent, 1.0, out)


def lane_policy(
    kind: HazardKind,
    informed: bool,
    d_upstream: float,
    in_affected_lane: bool,
    profile: ResponseProfile,
) -> LaneAdvice:
    """Lane-keeping advice for one vehicle relative to one active hazard."""
    blocking = kind in (HazardKind.LANE_CLOSURE, HazardKind.OBSTACLE_ON_ROAD)
    if blocking and in_affected_lane:
        trigger = profile.informed_mandatory_lc_distance if informed else profile.uninformed_sight_distance
        if 0 <= d_upstream <= trigger:
            return LaneAdvice.BEGIN_MANDATORY
    if informed and profile.suppress_discretionary_lc.get(kind, False):
        if d_upstream <= profile.informed_ramp_start:
            return LaneAdvice.SUPPRESS_DISCRETIONARY
    return LaneAdvice.NORMAL


def max_required_decel(
    informed: bool,
    approach_speed: float,
    profile: ResponseProfile,
    extent: float = 1000.0,
    dt: float = 0.5,
) -> float:
    """Worst instantaneous deceleration needed to track the factor profile.

    Walks the approach at simulation resolution: the vehicle holds
    ``factor(d) * approach_speed`` at every point, so each factor drop between
    consecutive steps demands ``dv/dt`` of braking.  Informed profiles ramp
    down smoothly and should always need strictly less than the uninformed
    step at the sight distance.
    """
    d = profile.informed_ramp_start + 200.0
    v = speed_factor(informed, d, False, profile) * approach_speed
    worst = 0.0
    travelled = 0.0
    while d > -extent:
        step = max(v * dt, 0.1)
        d_next = d - step
        on_extent = d_next <= 0 and -d_next <= extent
        v_next = speed_factor(informed, max(d_next, 0.0) if not on_extent else 0.0, on_extent, profile) * approach_speed
        worst = max(worst, (v - v_next) / dt)
        v = v_next
        d = d_next
        travelled += step
        if travelled > 10 * (profile.informed_ramp_start + extent) + 1000:
            break  # safety net; cannot happen for sane profiles
    return worst
