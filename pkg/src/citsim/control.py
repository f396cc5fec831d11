"""Service mode: live-run lifecycle, operator event injection, state streaming.

One background thread per run owns its world and advances it paced against
the wall clock (``realtime_factor`` simulated seconds per wall second).  The
control plane talks to the loop through a serialized command queue; commands
take effect at step boundaries only, and every frame handed outward is an
immutable snapshot taken at a step boundary, so no frame ever shows a
partially applied command.
"""

from __future__ import annotations

import itertools
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .harness import ExperimentSpec, build_world
from .kpi import KpiReport
from .microsim import COLLIDED, DRIVING, World
from .network import EventOrigin, HazardEvent, PRESET_NAMES

SCHEMA_V = 1
FRAME_VEHICLE_CAP = 2000


class ControlError(ValueError):
    pass


class UnknownRun(KeyError):
    pass


@dataclass(frozen=True)
class RunHandle:
    run_id: str
    status: str  # created | running | paused | finished
    clock: float
    realtime_factor: float

    def to_json(self) -> dict:
        return {
            "v": SCHEMA_V,
            "run_id": self.run_id,
            "status": self.status,
            "clock": self.clock,
            "realtime_factor": self.realtime_factor,
        }


def _frame_from_world(run_id: str, world: World, seq: int) -> dict:
    """Immutable state frame; decimated beyond the vehicle cap, keeping the
    vehicles nearest to active events."""
    idx = np.flatnonzero((world.status == DRIVING) | (world.status == COLLIDED))
    if idx.size > FRAME_VEHICLE_CAP:
        anchors = [world._event_abs[ev.id] for ev in world.active_events() if ev.id in world._event_abs]
        if anchors:
            score = np.min(np.abs(world.pos[idx][:, None] - np.array(anchors)[None, :]), axis=1)
        else:
            score = -world.pos[idx]
        idx = idx[np.argsort(score, kind="stable")[:FRAME_VEHICLE_CAP]]
        idx = np.sort(idx)
    informed_any = np.zeros(world.status.size, dtype=bool)
    for event_id in world.advisories:
        informed_any |= world.informed_mask(event_id)
    vehicles = []
    for i in idx:
        i = int(i)
        ref = world.net.linear_ref(float(world.pos[i]))
        vehicles.append(
            {
                "id": world.vehicle_id(i),
                "edge": ref.edge_id,
                "lane": int(world.lane[i]),
                "offset": round(ref.offset, 2),
                "speed": round(float(world.speed[i]), 3),
                "equipped": bool(world.equipped[i]),
                "informed": bool(informed_any[i]),
                "collided": bool(world.status[i] == COLLIDED),
            }
        )
    try:
        rolling = world.kpis.to_report().to_json()
        warming_up = False
    except Exception:
        rolling = None
        warming_up = True
    return {
        "v": SCHEMA_V,
        "run_id": run_id,
        "seq": seq,
        "clock": world.clock,
        "vehicles": vehicles,
        "active_events": [ev.to_json() for ev in world.active_events()],
        "pending_events": [
            ev.to_json()
            for ev in world.scenario_events.values()
            if ev.id not in world._started_events
        ],
        "rolling_kpi": rolling,
        "warming_up": warming_up,
        "counts": world.counts(),
    }


class RunControl:
    """Owns one world and its driver loop."""

    def __init__(self, run_id: str, spec: ExperimentSpec, arm: str, seed: int, realtime_factor: float):
        self.run_id = run_id
        self.realtime_factor = realtime_factor
        self.world = build_world(spec, arm, seed)
        self.commands: queue.Queue = queue.Queue()
        self.status = "created"
        self._frame_lock = threading.Lock()
        self._seq = itertools.count()
        self._frame = _frame_from_world(run_id, self.world, next(self._seq))
        self._frame_event = threading.Event()
        self._thread: threading.Thread | None = None
        self._wake = threading.Event()
        self._stop = False

    # -- frame plumbing -----------------------------------------------------

    def _publish_frame(self) -> None:
        frame = _frame_from_world(self.run_id, self.world, next(self._seq))
        with self._frame_lock:
            self._frame = frame
        self._frame_event.set()
        self._frame_event = threading.Event()

    def frame(self) -> dict:
        with self._frame_lock:
            return self._frame

    def wait_next_frame(self, timeout: float) -> dict:
        ev = self._frame_event
        ev.wait(timeout)
        return self.frame()

    # -- command handling -----------------------------------------------------

    def _drain_commands(self) -> None:
        while True:
            try:
                kind, payload, reply = self.commands.get_nowait()
            except queue.Empty:
                return
            try:
                if kind == "inject":
                    event = payload
                    if event.start_time < self.world.clock:
                        event = HazardEvent(
                            **{**event.__dict__, "start_time": self.world.clock}
                        )
                    self.world.add_event(event)
                    reply.put(("ok", event.id))
                elif kind == "cancel":
                    self.world.end_event(payload, self.world.clock)
                    reply.put(("ok", payload))
                else:
                    reply.put(("error", f"unknown command {kind!r}"))
            except Exception as exc:
                reply.put(("error", str(exc)))

    def submit(self, kind: str, payload) -> str:
        if self.status == "finished":
            raise ControlError("run already finished")
        reply: queue.Queue = queue.Queue()
        self.commands.put((kind, payload, reply))
        self._wake.set()
        status, detail = reply.get(timeout=10.0)
        if status != "ok":
            raise ControlError(detail)
        return detail

    # -- driver loop ------------------------------------------------------------

    def _loop(self) -> None:
        dt = self.world.config.dt
        frame_interval = 0.5  # wall seconds between published frames
        last_frame = time.monotonic()
        while not self._stop:
            if self.status != "running":
                self._drain_commands()
                self._wake.wait(0.05)
                self._wake.clear()
                self._publish_frame()
                continue
            self._drain_commands()
            self.world.step()
            if self.world.clock >= self.world.config.duration:
                self.status = "finished"
                self._publish_frame()
                return
            if self.realtime_factor > 0:
                time.sleep(dt / self.realtime_factor)
            now = time.monotonic()
            if now - last_frame >= frame_interval or self.realtime_factor == 0:
                self._publish_frame()
                last_frame = now

    def start(self) -> None:
        if self.status == "finished":
            raise ControlError("run already finished")
        self.status = "running"
        if self._thread is None:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()
        self._wake.set()

    def pause(self) -> None:
        if self.status == "finished":
            raise ControlError("run already finished")
        self.status = "paused"

    def stop(self) -> None:
        self._stop = True

    def handle(self) -> RunHandle:
        return RunHandle(
            run_id=self.run_id,
            status=self.status,
            clock=self.world.clock,
            realtime_factor=self.realtime_factor,
        )


class SimulationService:
    """Registry of live runs; the HTTP layer is a thin veneer over this."""

    def __init__(self):
        self.runs: dict[str, RunControl] = {}
        self._lock = threading.Lock()

    def create_run(
        self,
        spec: ExperimentSpec,
        arm: str = "cits",
        seed: int | None = None,
        realtime_factor: float = 10.0,
    ) -> RunHandle:
        if arm not in ("manual", "cits"):
            raise ControlError("service mode runs a single arm: 'manual' or 'cits'")
        if seed is None:
            seed = spec.seeds[0]
        run_id = f"run-{uuid.uuid4().hex[:10]}"
        ctl = RunControl(run_id, spec, arm, seed, realtime_factor)
        with self._lock:
            self.runs[run_id] = ctl
        return ctl.handle()

    def _get(self, run_id: str) -> RunControl:
        try:
            return self.runs[run_id]
        except KeyError:
            raise UnknownRun(run_id) from None

    def start(self, run_id: str) -> RunHandle:
        ctl = self._get(run_id)
        ctl.start()
        return ctl.handle()

    def pause(self, run_id: str) -> RunHandle:
        ctl = self._get(run_id)
        ctl.pause()
        return ctl.handle()

    def snapshot(self, run_id: str) -> dict:
        return self._get(run_id).frame()

    def inject_event(self, run_id: str, event: HazardEvent) -> str:
        ctl = self._get(run_id)
        if event.origin != EventOrigin.OPERATOR:
            event = HazardEvent(**{**event.__dict__, "origin": EventOrigin.OPERATOR})
        event.validate_on(ctl.world.net)
        return ctl.submit("inject", event)

    def cancel_event(self, run_id: str, event_id: str) -> str:
        return self._get(run_id).submit("cancel", event_id)

    def rolling_kpi(self, run_id: str) -> KpiReport | None:
        frame = self._get(run_id).frame()
        return None if frame["rolling_kpi"] is None else KpiReport.from_json(frame["rolling_kpi"])

    def stream_frames(self, run_id: str, max_frames: int | None = None, timeout: float = 30.0):
        """Yield frames as they are published (long-poll on the frame event)."""
        ctl = self._get(run_id)
        seen = -1
        sent = 0
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            frame = ctl.frame()
            if frame["seq"] != seen:
                seen = frame["seq"]
                sent += 1
                yield frame
                if max_frames is not None and sent >= max_frames:
                    return
                if ctl.status == "finished":
                    return
            ctl.wait_next_frame(0.25)

    def shutdown(self) -> None:
        for ctl in self.runs.values():
            ctl.stop()


# -- HTTP layer ---------------------------------------------------------------


def spec_from_json(obj: dict) -> tuple[ExperimentSpec, str, int, float]:
    """Parse a run-creation document: {"v":1, "spec": {...}, "arm": ..., "seed": ...}."""
    if obj.get("v") != SCHEMA_V:
        raise ControlError(f"unsupported schema version {obj.get('v')!r}")
    raw = obj.get("spec", {})
    arms = obj.get("arm", "cits")
    if isinstance(arms, (list, tuple)):
        raise ControlError("service mode is single-arm")
    event = HazardEvent.from_json(raw["event"]) if raw.get("event") else None
    spec = ExperimentSpec(
        corridor=raw.get("corridor", "attica"),
        service=raw.get("service", "hln_or"),
        demand=raw.get("demand", "baseline"),
        channel=raw.get("channel", "cellular"),
        seeds=tuple(raw.get("seeds", (0,))),
        equipped_fraction=float(raw.get("equipped_fraction", 1.0)),
        event=event,
        sim_overrides=dict(raw.get("sim_overrides", {})),
    )
    seed = int(obj.get("seed", spec.seeds[0]))
    realtime = float(obj.get("realtime_factor", 10.0))
    return spec, str(arms), seed, realtime


def create_app(service: SimulationService | None = None):
    """FastAPI application exposing the documented endpoints."""
    from fastapi import FastAPI, HTTPException, Request
    from fastapi.responses import JSONResponse, StreamingResponse

    app = FastAPI(title="corridor-sim control", version="0.1.0")
    svc = service if service is not None else SimulationService()
    app.state.service = svc

    def bail(exc: Exception) -> HTTPException:
        if isinstance(exc, UnknownRun):
            return HTTPException(status_code=404, detail=f"unknown run {exc.args[0]!r}")
        return HTTPException(status_code=422, detail=str(exc))

    @app.get("/presets")
    def presets():
        return {"v": SCHEMA_V, "presets": list(PRESET_NAMES)}

    @app.post("/runs")
    async def create_run(request: Request):
        try:
            payload = await request.json()
            spec, arm, seed, realtime = spec_from_json(payload)
            handle = svc.create_run(spec, arm=arm, seed=seed, realtime_factor=realtime)
        except (ControlError, ValueError, KeyError) as exc:
            raise bail(exc)
        return handle.to_json()

    @app.post("/runs/{run_id}/start")
    def start(run_id: str):
        try:
            return svc.start(run_id).to_json()
        except (ControlError, UnknownRun) as exc:
            raise bail(exc)

    @app.post("/runs/{run_id}/pause")
    def pause(run_id: str):
        try:
            return svc.pause(run_id).to_json()
        except (ControlError, UnknownRun) as exc:
            raise bail(exc)

    @app.get("/runs/{run_id}/state")
    def state(run_id: str):
        try:
            return svc.snapshot(run_id)
        except UnknownRun as exc:
            raise bail(exc)

    @app.post("/runs/{run_id}/events")
    async def inject(run_id: str, request: Request):
        try:
            payload = await request.json()
            if payload.get("v") != SCHEMA_V:
                raise ControlError(f"unsupported schema version {payload.get('v')!r}")
            event = HazardEvent.from_json(payload["event"])
            event_id = svc.inject_event(run_id, event)
        except (ControlError, UnknownRun) as exc:
            raise bail(exc)
        except (ValueError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"v": SCHEMA_V, "event_id": event_id}

    @app.delete("/runs/{run_id}/events/{event_id}")
    def cancel(run_id: str, event_id: str):
        try:
            svc.cancel_event(run_id, event_id)
        except (ControlError, UnknownRun) as exc:
            raise bail(exc)
        return {"v": SCHEMA_V, "cancelled": event_id}

    @app.get("/runs/{run_id}/kpi")
    def kpi(run_id: str):
        try:
            report = svc.rolling_kpi(run_id)
        except UnknownRun as exc:
            raise bail(exc)
        return {"v": SCHEMA_V, "kpi": None if report is None else report.to_json()}

    @app.get("/runs/{run_id}/stream")
    def stream(run_id: str, frames: int = 0, timeout: float = 30.0):
        try:
            svc._get(run_id)
        except UnknownRun as exc:
            raise bail(exc)

        def gen():
            limit = frames if frames > 0 else None
            for frame in svc.stream_frames(run_id, max_frames=limit, timeout=timeout):
                yield f"data: {json.dumps(frame, separators=(',', ':'))}\n\n"

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.exception_handler(UnknownRun)
    def unknown_run_handler(_req, exc):
        return JSONResponse(status_code=404, content={"detail": f"unknown run {exc.args[0]!r}"})

    return app


def serve(host: str = "127.0.0.1", port: int = 8211) -> None:
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port, log_level="warning")
