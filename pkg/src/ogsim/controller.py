"""Pass orchestration: the acquisition/tracking state machine and the
virtual-time runner tying ephemeris, turbulence, tracking, polarization
correction, QKD counting and beacon pointing to the message bus.

Timing: the fast tracking loop runs at the control rate inside
simulate_tracking; everything else (orchestration, polarization correction,
offload bookkeeping, uplink pointing, telemetry publication) happens on a
10 Hz slow tick. A pass run is computed deterministically first and then
published in time order, optionally paced against the wall clock so a live
console can follow; commands arriving mid-run (abort) take effect at slow
tick granularity.
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import qkd as qkd_mod
from .beacon import BeaconConfig, UplinkPointing, compute_uplink_pointing, validate_beacon
from .bus import InProcessBus, VirtualClock
from .constants import APERTURE_M
from .ephemeris import GroundSite, OrbitSpec, PassEphemeris, generate_pass
from .errors import ConfigurationError, OgsimError
from .frontend import compute_qkd_fov
from .polarization import rotator
from .qkd import SessionConfig
from .tracking import (
    LoopGains,
    SensorConfig,
    TrackingTelemetry,
    simulate_tracking,
)
from .turbulence import TurbulenceParams, generate_jitter


class StationState(enum.Enum):
    IDLE = "IDLE"
    SLEW = "SLEW"
    COARSE_ACQ = "COARSE_ACQ"
    FINE_ACQ = "FINE_ACQ"
    TRACK = "TRACK"
    QKD_ACTIVE = "QKD_ACTIVE"
    FAULT = "FAULT"
    PASS_END = "PASS_END"


EVENTS = frozenset(
    {
        "pass_start",
        "above_mask",
        "beacon_detected",
        "fine_lock",
        "lock_lost",
        "qkd_go",
        "pass_over",
        "fault",
        "reset",
    }
)

# documented edge table; `fault` additionally fires from any state
TRANSITIONS: dict[tuple[StationState, str], StationState] = {
    (StationState.IDLE, "pass_start"): StationState.SLEW,
    (StationState.SLEW, "above_mask"): StationState.COARSE_ACQ,
    (StationState.COARSE_ACQ, "beacon_detected"): StationState.FINE_ACQ,
    (StationState.FINE_ACQ, "fine_lock"): StationState.TRACK,
    (StationState.TRACK, "qkd_go"): StationState.QKD_ACTIVE,
    (StationState.QKD_ACTIVE, "lock_lost"): StationState.TRACK,
    (StationState.COARSE_ACQ, "pass_over"): StationState.PASS_END,
    (StationState.FINE_ACQ, "pass_over"): StationState.PASS_END,
    (StationState.TRACK, "pass_over"): StationState.PASS_END,
    (StationState.QKD_ACTIVE, "pass_over"): StationState.PASS_END,
    (StationState.FAULT, "reset"): StationState.IDLE,
    (StationState.PASS_END, "reset"): StationState.IDLE,
}


def is_defined(state: StationState, event: str) -> bool:
    return event == "fault" or (state, event) in TRANSITIONS


def transition(state: StationState, event: str) -> StationState:
    """Pure edge-table step; undefined pairs leave the state unchanged."""
    if event not in EVENTS:
        raise ConfigurationError(f"unknown event: {event}")
    if event == "fault":
        return StationState.FAULT
    return TRANSITIONS.get((state, event), state)


@dataclass
class PassPlan:
    """Everything one pass run needs, resolved to concrete objects."""

    site: GroundSite
    orbit: OrbitSpec
    turbulence: TurbulenceParams
    gains: LoopGains = field(default_factory=LoopGains)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    beacon: BeaconConfig | None = None
    correction_mode: str = "closed_loop"
    track_lambda_nm: float = 1550.0
    seed: int = 1
    pass_id: str = "pass-0001"
    ephemeris_step_s: float = 1.0
    slow_tick_hz: float = 10.0
    acquisition_delay_s: float = 2.0
    qkd_go_delay_s: float = 2.0
    max_reacquisitions: int = 3
    static_rotation_deg: float = 0.0
    beacon_downlink_present: bool = True
    beacon_dropouts: tuple[tuple[float, float], ...] = ()
    duration_limit_s: float | None = None
    apply_point_ahead: bool = True

    def __post_init__(self) -> None:
        if self.beacon is not None:
            validate_beacon(self.beacon)
        qkd_mod.select_filter(self.session.qkd_lambda_nm)
        if self.correction_mode not in ("open_loop", "closed_loop", "off"):
            raise ConfigurationError(f"bad correction mode: {self.correction_mode}")

    def channel_schedule(self, eph: PassEphemeris):
        static = rotator(self.static_rotation_deg)

        def channel(t: float):
            rho = eph.interpolated(t).frame_rotation_deg
            return rotator(rho) @ static

        return channel


@dataclass
class PassResult:
    plan: PassPlan
    ephemeris: PassEphemeris | None
    tracking: TrackingTelemetry | None
    session_stats: qkd_mod.SessionStats
    state_log: list[tuple[float, str]]
    event_log: list[tuple[float, str, str]]
    qkd_segments: list[tuple[float, float]]
    uplink: list[UplinkPointing] = field(default_factory=list)
    t_end: float = 0.0
    fault_cause: str | None = None

    @property
    def final_state(self) -> str:
        return self.state_log[-1][1] if self.state_log else StationState.IDLE.value

    def qkd_dwell_fraction(self) -> float:
        """QKD_ACTIVE dwell as a fraction of the time after first lock."""
        first_lock = next((t for t, e, _ in self.event_log if e == "fine_lock"), None)
        if first_lock is None:
            return 0.0
        total = self.t_end - first_lock
        dwell = sum(t1 - t0 for t0, t1 in self.qkd_segments)
        return dwell / total if total > 0 else 0.0


class Station:
    """Bus-facing wrapper: command handlers plus the pass runner."""

    def __init__(self, bus: InProcessBus, plan: PassPlan):
        self.bus = bus
        self.plan = plan
        self.clock = VirtualClock(0.0)
        self.state = StationState.IDLE
        self._abort = threading.Event()
        self._start_requested = threading.Event()
        self._register_handlers()

    # ---- command handlers (idempotence handled by the bus) -------------
    def _register_handlers(self) -> None:
        self.bus.register_handler("ogs/controller/cmd", self._on_controller_cmd)
        self.bus.register_handler("ogs/track/cmd", self._on_track_cmd)
        self.bus.register_handler("ogs/qkd/cmd", self._on_qkd_cmd)
        self.bus.register_handler("ogs/boba/cmd", self._on_boba_cmd)

    def _on_controller_cmd(self, payload: dict) -> dict:
        action = payload.get("action")
        if action == "start_pass":
            self._start_requested.set()
            return {"pass_id": self.plan.pass_id}
        if action == "abort":
            self._abort.set()
            return {"aborted": True}
        if action == "set_mode":
            mode = payload.get("mode")
            if mode not in ("open_loop", "closed_loop", "off"):
                raise ConfigurationError(f"bad mode: {mode}")
            self.plan.correction_mode = mode
            return {"mode": mode}
        raise ConfigurationError(f"unknown action: {action}")

    def _on_track_cmd(self, payload: dict) -> dict:
        if payload.get("action") != "set_gains":
            raise ConfigurationError("unknown tracking action")
        gains = LoopGains(
            kp=float(payload.get("kp", self.plan.gains.kp)),
            ki=float(payload.get("ki", self.plan.gains.ki)),
            rate_hz=self.plan.gains.rate_hz,
        )
        self.plan.gains = gains
        return {"kp": gains.kp, "ki": gains.ki}

    def _on_qkd_cmd(self, payload: dict) -> dict:
        action = payload.get("action")
        if action == "set_filter":
            stage = qkd_mod.select_filter(float(payload["lambda_nm"]))
            self.plan.session = replace(
                self.plan.session, qkd_lambda_nm=float(payload["lambda_nm"])
            )
            return {"filter_id": stage.id, "center_nm": stage.center_nm}
        if action == "set_mode":
            mode = payload["mode"]
            self.plan.correction_mode = mode
            return {"mode": mode}
        raise ConfigurationError(f"unknown action: {action}")

    def _on_boba_cmd(self, payload: dict) -> dict:
        if payload.get("enable"):
            cfg = validate_beacon(
                BeaconConfig(
                    lambda_nm=float(payload["lambda_nm"]),
                    power_w=float(payload["power_w"]),
                )
            )
            self.plan.beacon = cfg
            state = {"enabled": True, "lambda_nm": cfg.lambda_nm, "power_w": cfg.power_w}
        else:
            self.plan.beacon = None
            state = {"enabled": False, "lambda_nm": 0.0, "power_w": 0.0}
        self.bus.publish("ogs/boba/state", dict(state), self.clock.t)
        return state

    # ---- pass execution --------------------------------------------------
    def run_pass(self, pace_s: float = 0.0) -> PassResult:
        """Compute a full pass and publish its telemetry in time order.

        pace_s > 0 sleeps that long per slow tick so live consoles can
        follow; determinism of the envelope log is unaffected. Subsystem
        contract errors surface as a FAULT state with the cause recorded.
        """
        self._abort.clear()
        try:
            result = _compute_pass(self.plan)
        except OgsimError as exc:
            result = PassResult(
                plan=self.plan,
                ephemeris=None,
                tracking=None,
                session_stats=qkd_mod.SessionStats(),
                state_log=[(0.0, StationState.IDLE.value), (0.0, StationState.FAULT.value)],
                event_log=[(0.0, "fault", str(exc))],
                qkd_segments=[],
                fault_cause=str(exc),
            )
            self.state = StationState.FAULT
            self.bus.publish(
                "ogs/controller/state",
                {"state": StationState.FAULT.value, "pass_id": self.plan.pass_id},
                self.clock.t,
            )
            return result
        self._publish_pass(result, pace_s)
        return result

    def serve(self, pace_s: float = 0.0, poll_s: float = 0.05) -> PassResult:
        """Publish idle state, wait for a start_pass command, then run."""
        self.bus.publish(
            "ogs/controller/state",
            {"state": StationState.IDLE.value, "pass_id": self.plan.pass_id},
            self.clock.t,
        )
        while not self._start_requested.wait(timeout=poll_s):
            pass
        self._start_requested.clear()
        return self.run_pass(pace_s=pace_s)

    def _publish_pass(self, result: PassResult, pace_s: float) -> None:
        plan = result.plan
        eph = result.ephemeris
        bus = self.bus
        t0 = eph.samples[0].t
        slow_dt = 1.0 / plan.slow_tick_hz

        bus.publish(
            "ogs/ephemeris/pass",
            {
                "pass_id": plan.pass_id,
                "start_t": eph.samples[0].t,
                "end_t": eph.samples[-1].t,
                "step_s": eph.step_s,
                "max_elevation_deg": plan.orbit.max_elevation_deg,
                "orbit_altitude_km": plan.orbit.altitude_km,
                "n_samples": len(eph.samples),
            },
            t0,
        )
        if plan.beacon is not None:
            bus.publish(
                "ogs/boba/state",
                {"enabled": True, "lambda_nm": plan.beacon.lambda_nm,
                 "power_w": plan.beacon.power_w},
                t0,
            )

        # time-ordered publication queues
        states = list(result.state_log)
        stats = list(result.session_stats.entries)
        plates = list(result.session_stats.waveplate_schedule)
        psi = {
            round(t, 6): measured
            for t, measured, _true in result.session_stats.measured_azimuth
        }
        ticks_per_slow = max(1, int(round(plan.gains.rate_hz / plan.slow_tick_hz)))
        telem = result.tracking

        n_slow = int(round((result.t_end - t0) * plan.slow_tick_hz))
        aborted = False
        for k in range(n_slow + 1):
            t = t0 + k * slow_dt
            self.clock.t = t
            while states and states[0][0] <= t + 1e-9:
                st_t, st = states.pop(0)
                self.state = StationState(st)
                bus.publish(
                    "ogs/controller/state",
                    {"state": st, "pass_id": plan.pass_id},
                    st_t,
                )
            if aborted:
                break
            i1 = min((k + 1) * ticks_per_slow, len(telem.resid_tip))
            i0 = min(k * ticks_per_slow, max(0, i1 - 1))
            if i1 > i0 and self.state in (
                StationState.FINE_ACQ, StationState.TRACK, StationState.QKD_ACTIVE
            ):
                rx = telem.resid_tip[i0:i1]
                ry = telem.resid_tilt[i0:i1]
                bus.publish(
                    "ogs/track/telemetry",
                    {
                        "rms_rad": float(np.sqrt(np.mean(rx * rx + ry * ry))),
                        "resid_tip_rad": float(rx[-1]),
                        "resid_tilt_rad": float(ry[-1]),
                        "fpm_tip_rad": float(telem.cmd_tip[i1 - 1]),
                        "fpm_tilt_rad": float(telem.cmd_tilt[i1 - 1]),
                        "mount_tip_rad": float(telem.mount_tip[i1 - 1]),
                        "mount_tilt_rad": float(telem.mount_tilt[i1 - 1]),
                        "lock": bool(telem.lock[i1 - 1]),
                    },
                    t,
                )
            while plates and plates[0][0] <= t + 1e-9:
                pt, q1, h, q2 = plates.pop(0)
                bus.publish(
                    "ogs/pol/cmd", {"q1_deg": q1, "h_deg": h, "q2_deg": q2}, pt
                )
                bus.publish(
                    "ogs/pol/telemetry",
                    {"psi_deg": psi.get(round(pt, 6)), "q1_deg": q1, "h_deg": h,
                     "q2_deg": q2},
                    pt,
                )
            while stats and stats[0].t <= t + 1e-9:
                entry = stats.pop(0)
                bus.publish("ogs/qkd/telemetry", entry.as_payload(), entry.t)
            if self._abort.is_set():
                # defined degraded path: abort rides the pass_over edge
                nxt = transition(self.state, "pass_over")
                if nxt is not self.state:
                    self.state = nxt
                    bus.publish(
                        "ogs/controller/state",
                        {"state": nxt.value, "pass_id": plan.pass_id},
                        t,
                    )
                aborted = True
            if pace_s > 0:
                time.sleep(pace_s)


def _beacon_intensity_series(plan: PassPlan, eph: PassEphemeris, n_ticks: int) -> np.ndarray:
    """Sensor intensity over the pass: dark until the beacon is found, then
    nominal, with configured dropout intervals forced dark."""
    t0 = eph.samples[0].t
    rate = plan.gains.rate_hz
    out = np.zeros(n_ticks)
    if plan.beacon_downlink_present:
        start = int(round((plan.acquisition_delay_s) * rate))
        out[start:] = plan.sensor.intensity
        for d0, d1 in plan.beacon_dropouts:
            a = max(0, int(round((d0 - t0) * rate)))
            b = max(0, int(round((d1 - t0) * rate)))
            out[a:b] = 0.0
    return out


def _walk_states(plan: PassPlan, lock_at, t0: float, t_end: float):
    """Drive the state machine over the slow ticks of one pass.

    lock_at: callable t -> bool, the tracking lock state at that time.
    Returns (state_log, event_log, qkd_segments, fault_cause).
    """
    slow_dt = 1.0 / plan.slow_tick_hz
    n_slow = int(round((t_end - t0) * plan.slow_tick_hz))

    state = StationState.IDLE
    state_log: list[tuple[float, str]] = []
    events: list[tuple[float, str, str]] = []
    qkd_segments: list[tuple[float, float]] = []
    fault_cause = None

    def fire(t: float, event: str, detail: str = "") -> None:
        nonlocal state
        nxt = transition(state, event)
        events.append((t, event, detail))
        if nxt is not state or event == "fault":
            state = nxt
            state_log.append((t, state.value))

    state_log.append((t0, state.value))
    fire(t0, "pass_start")
    fire(t0, "above_mask")

    beacon_found = False
    lock_stable_since: float | None = None
    qkd_start: float | None = None
    reacquisitions = 0

    for k in range(n_slow + 1):
        t = t0 + k * slow_dt
        locked = bool(lock_at(t))

        if state is StationState.COARSE_ACQ:
            if (
                plan.beacon_downlink_present
                and not beacon_found
                and (t - t0) >= plan.acquisition_delay_s
            ):
                beacon_found = True
                fire(t, "beacon_detected")
        elif state is StationState.FINE_ACQ:
            if locked:
                fire(t, "fine_lock")
                lock_stable_since = t
        elif state is StationState.TRACK:
            if locked:
                if lock_stable_since is None:
                    lock_stable_since = t
                elif t - lock_stable_since >= plan.qkd_go_delay_s:
                    fire(t, "qkd_go")
                    qkd_start = t
            else:
                lock_stable_since = None
        elif state is StationState.QKD_ACTIVE:
            if not locked:
                qkd_segments.append((qkd_start, t))
                qkd_start = None
                reacquisitions += 1
                if reacquisitions > plan.max_reacquisitions:
                    fire(t, "fault", f"lock lost {reacquisitions} times")
                    fault_cause = "reacquisition limit exceeded"
                    break
                fire(t, "lock_lost", f"reacquisition {reacquisitions}")
                lock_stable_since = None

    if state not in (StationState.FAULT, StationState.PASS_END):
        if qkd_start is not None:
            qkd_segments.append((qkd_start, t_end))
        fire(t_end, "pass_over")
    return state_log, events, qkd_segments, fault_cause


def _compute_pass(plan: PassPlan) -> PassResult:
    eph = generate_pass(plan.site, plan.orbit, plan.ephemeris_step_s)
    t0 = eph.samples[0].t
    t_end = eph.samples[-1].t
    if plan.duration_limit_s is not None:
        t_end = min(t_end, t0 + plan.duration_limit_s)
    duration = t_end - t0

    jitter = generate_jitter(
        plan.turbulence,
        aperture_m=APERTURE_M,
        lambda_m=plan.track_lambda_nm * 1e-9,
        duration_s=duration,
        rate_hz=plan.gains.rate_hz,
    )
    fov = compute_qkd_fov(plan.turbulence, plan.session.qkd_lambda_nm)
    intensity = _beacon_intensity_series(plan, eph, len(jitter))
    telem = simulate_tracking(
        jitter,
        plan.gains,
        plan.sensor,
        fov,
        intensity_series=intensity,
    )

    rate = plan.gains.rate_hz
    slow_dt = 1.0 / plan.slow_tick_hz
    n_slow = int(round(duration * plan.slow_tick_hz))
    state_log, events, qkd_segments, fault_cause = _walk_states(
        plan,
        lambda t: bool(
            telem.lock[min(int(round((t - t0) * rate)), len(telem.lock) - 1)]
        ),
        t0,
        t_end,
    )

    # QKD sessions over the active segments, plates chained across segments
    session_stats = qkd_mod.SessionStats()
    channel = plan.channel_schedule(eph)
    rng = np.random.default_rng(plan.seed + 2_000_003)
    plates = None
    window_rms = _windowed_rms(telem, rate, t0)
    for seg_t0, seg_t1 in qkd_segments:
        if seg_t1 - seg_t0 < plan.session.stats_window_s:
            continue
        seg = qkd_mod.run_session(
            eph,
            channel,
            plan.correction_mode,
            window_rms,
            plan.session,
            rng,
            t_start=seg_t0,
            t_end=seg_t1,
            initial_plates=plates,
        )
        plates = seg.final_plates
        session_stats.entries.extend(seg.entries)
        session_stats.waveplate_schedule.extend(seg.waveplate_schedule)
        session_stats.measured_azimuth.extend(seg.measured_azimuth)
        session_stats.final_plates = seg.final_plates

    # uplink pointing recomputed on the slow tick while the beacon runs
    uplink: list[UplinkPointing] = []
    if plan.beacon is not None:
        for k in range(n_slow + 1):
            t = t0 + k * slow_dt
            uplink.append(
                compute_uplink_pointing(
                    eph.interpolated(t), apply_point_ahead=plan.apply_point_ahead
                )
            )

    return PassResult(
        plan=plan,
        ephemeris=eph,
        tracking=telem,
        session_stats=session_stats,
        state_log=state_log,
        event_log=events,
        qkd_segments=qkd_segments,
        uplink=uplink,
        t_end=t_end,
        fault_cause=fault_cause,
    )


def _windowed_rms(telem: TrackingTelemetry, rate_hz: float, t0: float, window_s: float = 1.0):
    """Radial residual RMS per one-second bucket, as a lookup by pass time."""
    n = len(telem.resid_tip)
    per = max(1, int(round(window_s * rate_hz)))
    sq = telem.resid_tip**2 + telem.resid_tilt**2
    n_buckets = max(1, n // per)
    rms = np.array(
        [np.sqrt(np.mean(sq[i * per:(i + 1) * per])) for i in range(n_buckets)]
    )

    def lookup(t: float) -> float:
        idx = min(int((t - t0) / window_s), n_buckets - 1)
        return float(rms[max(0, idx)])

    return lookup
