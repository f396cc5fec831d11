"""Corridor traffic simulator with a cooperative-ITS message layer."""

from .network import (
    DemandDefaults,
    Edge,
    EventOrigin,
    HazardEvent,
    HazardKind,
    LinearRef,
    RoadNetwork,
    RsuLayout,
    corridor_preset,
    distance_along,
    load_network,
    save_network,
)
from .response import LaneAdvice, ResponseProfile, lane_policy, speed_factor
from .kpi import Co2Model, DEFAULT_CO2_MODEL, KpiReport, calibrate_co2, co2_rate
from .microsim import CollisionRecord, SimConfig, VehicleParams, World, safe_speed
from .v2x import Cam, ChannelKind, ChannelModel, Denm, deliver, emit_cams, make_channel
from .tcs import DetectionConfig, IncidentCandidate, PvdAggregate, TrafficControlServer, aggregate_pvd
from .harness import ArmResult, ExperimentSpec, compare_arms, check_directions, run_experiment

__version__ = "0.1.0"
