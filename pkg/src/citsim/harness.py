"""Experiment orchestration: manual vs C-ITS arm pairs over seeded replications.

The two arms share corridor, demand, event, and seeds.  The manual arm has no
equipped vehicles and no control server, so drivers only react on sight; the
C-ITS arm enables the control server and notification dissemination.  The
only difference between the arms is information.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .kpi import KPI_FIELDS, KpiReport, mean_report
from .microsim import SimConfig, World
from .network import HazardEvent, HazardKind, RoadNetwork, corridor_preset
from .response import ResponseProfile
from .v2x import ChannelKind, make_channel


class HarnessError(ValueError):
    pass


SERVICES = ("hln_wcw", "tja", "rww_lc", "hln_or")
SERVICE_KIND = {
    "hln_wcw": HazardKind.SLIPPERY_ROAD,
    "tja": HazardKind.TRAFFIC_JAM_AHEAD,
    "rww_lc": HazardKind.LANE_CLOSURE,
    "hln_or": HazardKind.OBSTACLE_ON_ROAD,
}
DEMANDS = ("baseline", "high")
ARMS = ("manual", "cits")

KPI_KEYS = {
    "lane_changes": "lane_changes_per_vkm",
    "collisions": "collisions",
    "co2": "co2_g_per_km",
    "speed": "avg_speed_kmh",
    "travel_time": "travel_time_min_per_km",
}


def default_event(service: str, net: RoadNetwork, start_time: float = 600.0, end_time: float = 1500.0) -> HazardEvent:
    """Scenario event template for a service on a given corridor.

    Events sit at ~60% of the corridor, snapped to an edge start so that the
    affected stretch corresponds to whole edges.  The extent is the zone
    drivers treat as affected; a standing obstacle physically occupies only
    its footprint at the start of that zone.
    """
    kind = SERVICE_KIND[service]
    loc = net.linear_ref(0.6 * net.total_length)
    loc = net.linear_ref(net.abs_pos(loc) - loc.offset)  # snap to edge start
    if kind == HazardKind.SLIPPERY_ROAD:
        return HazardEvent("ev1", kind, loc, extent=1500.0, severity=0.85,
                           start_time=start_time, end_time=end_time)
    if kind == HazardKind.TRAFFIC_JAM_AHEAD:
        # A transient jam: short zone, clears before the event window ends.
        return HazardEvent("ev1", kind, loc, extent=500.0, severity=0.3,
                           start_time=start_time, end_time=min(end_time, start_time + 300.0))
    if kind == HazardKind.LANE_CLOSURE:
        # A static works zone; shorter than the full event window keeps the
        # bottleneck queue from dominating the whole measurement window.
        return HazardEvent("ev1", kind, loc, extent=500.0, affected_lanes=frozenset({0}),
                           start_time=start_time, end_time=min(end_time, start_time + 600.0))
    return HazardEvent("ev1", kind, loc, extent=1000.0, affected_lanes=frozenset({0}),
                       start_time=start_time, end_time=end_time)


@dataclass(frozen=True)
class ExperimentSpec:
    corridor: str
    service: str
    demand: str = "baseline"
    channel: str = "cellular"
    seeds: tuple[int, ...] = tuple(range(10))
    equipped_fraction: float = 1.0  # penetration in the C-ITS arm
    tcs_in_cits: bool = True
    event: HazardEvent | None = None  # None -> service template
    profile: ResponseProfile = ResponseProfile()
    sim_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.service not in SERVICES:
            raise HarnessError(f"unknown service {self.service!r}")
        if self.demand not in DEMANDS:
            raise HarnessError(f"unknown demand level {self.demand!r}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise HarnessError("seeds must be nonempty and distinct")
        if self.event is not None and self.event.kind != SERVICE_KIND[self.service]:
            raise HarnessError(
                f"event kind {self.event.kind.value} inconsistent with service {self.service}"
            )
        ChannelKind(self.channel)

    @property
    def label(self) -> str:
        return f"{self.corridor}-{self.service}-{self.demand}"


@dataclass(frozen=True)
class ArmResult:
    arm: str
    seeds: tuple[int, ...]
    per_seed: tuple[KpiReport, ...]
    mean: KpiReport


@dataclass(frozen=True)
class DirectionalExpectation:
    corridor: str
    service: str
    demand: str
    kpi: str
    manual: float
    cits: float

    def expected_sign(self, band: float = 0.02) -> str:
        return classify_sign(self.manual, self.cits, band)


def classify_sign(manual: float, cits: float, band: float = 0.02) -> str:
    if manual == 0:
        return "≈" if cits == 0 else ("+" if cits > 0 else "-")
    rel = (cits - manual) / abs(manual)
    if abs(rel) < band:
        return "≈"
    return "+" if rel > 0 else "-"


def load_expectations() -> list[DirectionalExpectation]:
    raw = json.loads(resources.files("citsim").joinpath("data/expectations.json").read_text())
    return [DirectionalExpectation(**row) for row in raw["rows"]]


def build_world(spec: ExperimentSpec, arm: str, seed: int, **world_kwargs) -> World:
    if arm not in ARMS:
        raise HarnessError(f"unknown arm {arm!r}")
    net, rsus, demand = corridor_preset(spec.corridor)
    if spec.demand not in demand.levels:
        raise HarnessError(f"preset {spec.corridor} has no demand level {spec.demand!r}")
    event = spec.event if spec.event is not None else default_event(spec.service, net)
    event.validate_on(net)
    cfg = SimConfig(
        total_vehicles=demand.levels[spec.demand],
        hgv_share=demand.hgv_share,
        equipped_fraction=spec.equipped_fraction if arm == "cits" else 0.0,
        seed=seed,
        **spec.sim_overrides,
    )
    channel = make_channel(spec.channel, rsus)
    return World(
        net,
        cfg,
        events=(event,),
        profile=spec.profile,
        channel=channel,
        tcs_enabled=(arm == "cits" and spec.tcs_in_cits),
        **world_kwargs,
    )


def run_single(spec: ExperimentSpec, arm: str, seed: int) -> KpiReport:
    world = build_world(spec, arm, seed)
    world.run()
    return world.kpis.to_report()


def _run_payload(payload: tuple[ExperimentSpec, str, int]) -> tuple[str, int, KpiReport]:
    spec, arm, seed = payload
    return arm, seed, run_single(spec, arm, seed)


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> tuple[ArmResult, ArmResult]:
    """Run both arms over all seeds; deterministic output ordering by (arm, seed)."""
    jobs = [(spec, arm, seed) for arm in ARMS for seed in spec.seeds]
    results: dict[tuple[str, int], KpiReport] = {}
    if workers is None:
        workers = min(os.cpu_count() or 1, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for arm, seed, report in pool.map(_run_payload, jobs, chunksize=1):
                results[(arm, seed)] = report
    else:
        for job in jobs:
            arm, seed, report = _run_payload(job)
            results[(arm, seed)] = report
    out = []
    for arm in ARMS:
        per_seed = tuple(results[(arm, seed)] for seed in spec.seeds)
        out.append(ArmResult(arm=arm, seeds=spec.seeds, per_seed=per_seed, mean=mean_report(per_seed)))
    return out[0], out[1]


def compare_arms(manual: ArmResult, cits: ArmResult, band: float = 0.02) -> dict[str, dict]:
    """Per-KPI delta (cits - manual) and sign, with the approx band applied."""
    if manual.seeds != cits.seeds:
        raise HarnessError("arm results cover different seed sets")
    out = {}
    for kpi, attr in KPI_KEYS.items():
        m = getattr(manual.mean, attr)
        c = getattr(cits.mean, attr)
        out[kpi] = {
            "manual": m,
            "cits": c,
            "delta": c - m,
            "sign": classify_sign(m, c, band),
        }
    return out


def check_directions(
    comparison: dict[str, dict],
    expectations: list[DirectionalExpectation],
    corridor: str,
    service: str,
    demand: str = "baseline",
    band: float = 0.02,
) -> list[dict]:
    """Pass/fail per KPI against the published-table expectations.

    KPIs without a published value are reported as skipped, never synthesized.
    """
    block = [e for e in expectations if (e.corridor, e.service, e.demand) == (corridor, service, demand)]
    if not block:
        raise HarnessError(f"no expectation rows for {corridor}/{service}/{demand}")
    by_kpi = {e.kpi: e for e in block}
    verdicts = []
    for kpi, measured in comparison.items():
        exp = by_kpi.get(kpi)
        if exp is None:
            verdicts.append({"kpi": kpi, "verdict": "skipped", "reason": "no published value"})
            continue
        expected = exp.expected_sign(band)
        got = measured["sign"]
        verdicts.append(
            {
                "kpi": kpi,
                "verdict": "pass" if got == expected else "fail",
                "expected_sign": expected,
                "measured_sign": got,
                "expected_values": (exp.manual, exp.cits),
                "measured_values": (measured["manual"], measured["cits"]),
            }
        )
    return verdicts


@dataclass(frozen=True)
class ExperimentResult:
    spec: ExperimentSpec
    manual: ArmResult
    cits: ArmResult
    comparison: dict[str, dict]
    verdicts: list[dict]


def run_and_check(spec: ExperimentSpec, workers: int | None = None) -> ExperimentResult:
    manual, cits = run_experiment(spec, workers=workers)
    comparison = compare_arms(manual, cits)
    verdicts = check_directions(comparison, load_expectations(), spec.corridor, spec.service, spec.demand)
    return ExperimentResult(spec, manual, cits, comparison, verdicts)


def write_report(results: list[ExperimentResult], out_dir: str | Path, strict: bool = False) -> int:
    """Emit kpis.csv and summary.txt; returns the process exit status."""
    if not results:
        raise HarnessError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "kpis.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["experiment", "corridor", "service", "demand", "arm", "seed", *KPI_FIELDS])
        for res in results:
            for arm_result in (res.manual, res.cits):
                for seed, report in zip(arm_result.seeds, arm_result.per_seed):
                    w.writerow(
                        [
                            res.spec.label,
                            res.spec.corridor,
                            res.spec.service,
                            res.spec.demand,
                            arm_result.arm,
                            seed,
                            *[f"{getattr(report, k):.6f}" for k in KPI_FIELDS],
                        ]
                    )

    any_fail = False
    lines = []
    for res in results:
        lines.append(f"== {res.spec.label} (seeds: {len(res.spec.seeds)}) ==")
        lines.append(f"{'KPI':<14}{'manual':>12}{'cits':>12}{'delta':>12}  sign  expected  verdict")
        by_kpi = {v["kpi"]: v for v in res.verdicts}
        for kpi, cmpv in res.comparison.items():
            v = by_kpi.get(kpi, {"verdict": "skipped"})
            expected = v.get("expected_sign", "-")
            verdict = v["verdict"]
            if verdict == "fail":
                any_fail = True
            lines.append(
                f"{kpi:<14}{cmpv['manual']:>12.3f}{cmpv['cits']:>12.3f}{cmpv['delta']:>12.3f}"
                f"  {cmpv['sign']:^4}  {expected:^8}  {verdict}"
            )
        lines.append("")
    (out / "summary.txt").write_text("\n".join(lines), encoding="utf-8")
    return 1 if (strict and any_fail) else 0
