"""Fine acquisition sensor, fine-pointing-mirror PI loop, mount offloading
and lock assessment.

Loop semantics, fixed here and relied on by the tests:

* The sensor measures the true residual plus Gaussian noise; frames below
  the intensity threshold are invalid.
* PI update per axis: command = previous + kp*e + ki*integral(e dt). An
  invalid frame freezes the integrator and holds the last command. Commands
  are clamped to the actuator range with the integrator halted while clamped
  (anti-windup).
* One-tick actuation latency: the command computed at tick n acts on the
  residual at tick n+1.
* Offloading moves the windowed mean of the FPM command to the telescope
  mount when it exceeds a fraction of the actuator range; mount offsets are
  accepted instantly, so the handoff is seamless.
* Lock: radial residual RMS per window below k * FoV for n consecutive
  windows; unlocking requires exceeding 1.5x that threshold for n
  consecutive windows, so the state changes only at window boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PreconditionError
from .turbulence import JitterSeries

DEFAULT_FPM_LIMIT_RAD = 1e-3
DEFAULT_LOCK_WINDOW_TICKS = 100
# lock radius as a fraction of the QKD field of view: small enough that an
# uncompensated beam (radial RMS ~ sqrt(2) * tilt_sigma) cannot hold lock,
# comfortably above the compensated residual
DEFAULT_LOCK_K_FRACTION = 1.0 / 8.0
DEFAULT_LOCK_N_CONSECUTIVE = 3
DEFAULT_OFFLOAD_THRESHOLD = 0.5
UNLOCK_HYSTERESIS = 1.5
DEGRADED_SATURATION_FRACTION = 0.10


@dataclass(frozen=True)
class SensorFrame:
    t: float
    cx_rad: float
    cy_rad: float
    intensity: float
    valid: bool


@dataclass(frozen=True)
class FpmState:
    tip_rad: float = 0.0
    tilt_rad: float = 0.0
    limits_rad: float = DEFAULT_FPM_LIMIT_RAD
    saturated: bool = False


@dataclass(frozen=True)
class LoopGains:
    kp: float = 0.5
    ki: float = 50.0
    rate_hz: float = 20000.0

    def __post_init__(self) -> None:
        if self.kp < 0 or self.ki < 0:
            raise PreconditionError("gains must be >= 0")
        if self.rate_hz <= 0:
            raise PreconditionError("control rate must be positive")


@dataclass(frozen=True)
class SensorConfig:
    noise_rms_rad: float = 0.2e-6
    intensity: float = 1.0
    detection_threshold: float = 0.1
    seed: int = 0


@dataclass
class TrackingTelemetry:
    """Per-tick record arrays of one tracking run."""

    rate_hz: float
    raw_tip: np.ndarray
    raw_tilt: np.ndarray
    cmd_tip: np.ndarray
    cmd_tilt: np.ndarray
    resid_tip: np.ndarray
    resid_tilt: np.ndarray
    lock: np.ndarray
    mount_tip: np.ndarray
    mount_tilt: np.ndarray
    offload_events: list = field(default_factory=list)
    saturated_ticks: int = 0
    degraded: bool = False

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.raw_tip)) / self.rate_hz

    def residual_rms(self, from_tick: int = 0) -> tuple[float, float]:
        return (
            float(np.sqrt(np.mean(self.resid_tip[from_tick:]**2))),
            float(np.sqrt(np.mean(self.resid_tilt[from_tick:]**2))),
        )

    def lock_fraction_post_acquisition(self) -> float:
        """Fraction of ticks locked, counted from the first locked tick."""
        idx = np.flatnonzero(self.lock)
        if len(idx) == 0:
            return 0.0
        tail = self.lock[idx[0]:]
        return float(np.mean(tail))


def sense_centroid(
    true_residual_rad: tuple[float, float],
    noise_rms_rad: float,
    intensity: float,
    rng: np.random.Generator,
    detection_threshold: float = 0.1,
    t: float = 0.0,
) -> SensorFrame:
    """Measure the line-of-sight residual with additive Gaussian noise."""
    if noise_rms_rad < 0:
        raise PreconditionError("noise_rms_rad must be >= 0")
    nx, ny = (rng.normal(0.0, noise_rms_rad, 2) if noise_rms_rad > 0 else (0.0, 0.0))
    return SensorFrame(
        t=t,
        cx_rad=float(true_residual_rad[0] + nx),
        cy_rad=float(true_residual_rad[1] + ny),
        intensity=intensity,
        valid=intensity >= detection_threshold,
    )


def pi_update(
    gains: LoopGains,
    frame: SensorFrame,
    state: FpmState,
    integrator: tuple[float, float],
) -> tuple[FpmState, tuple[float, float]]:
    """One PI step; invalid frames freeze both command and integrator."""
    if not frame.valid:
        return state, integrator
    dt = 1.0 / gains.rate_hz
    limit = state.limits_rad
    out = []
    new_integ = []
    saturated = False
    for e, prev, integ in (
        (frame.cx_rad, state.tip_rad, integrator[0]),
        (frame.cy_rad, state.tilt_rad, integrator[1]),
    ):
        i_cand = integ + e * dt
        raw = prev + gains.kp * e + gains.ki * i_cand
        if abs(raw) > limit:
            out.append(math.copysign(limit, raw))
            new_integ.append(integ)  # halted while clamped
            saturated = True
        else:
            out.append(raw)
            new_integ.append(i_cand)
    return (
        FpmState(tip_rad=out[0], tilt_rad=out[1], limits_rad=limit, saturated=saturated),
        (new_integ[0], new_integ[1]),
    )


def offload_check(
    state: FpmState,
    window_mean_rad: tuple[float, float],
    threshold_fraction: float,
) -> tuple[tuple[float, float] | None, FpmState]:
    """Hand accumulated FPM command to the mount when the windowed mean on
    either axis exceeds the threshold fraction of the actuator range."""
    if not 0.0 < threshold_fraction < 1.0:
        raise PreconditionError("threshold_fraction must be in (0, 1)")
    mx, my = window_mean_rad
    lim = state.limits_rad
    if max(abs(mx), abs(my)) <= threshold_fraction * lim:
        return None, state
    recentred = replace(state, tip_rad=state.tip_rad - mx, tilt_rad=state.tilt_rad - my)
    return (mx, my), recentred


class LockMonitor:
    """Window-RMS lock state with hysteresis; changes only at window ends."""

    def __init__(self, threshold_rad: float, n_consecutive: int = DEFAULT_LOCK_N_CONSECUTIVE):
        if threshold_rad <= 0 or n_consecutive < 1:
            raise PreconditionError("bad lock monitor parameters")
        self.threshold_rad = threshold_rad
        self.n_consecutive = n_consecutive
        self.locked = False
        self._streak = 0

    def update(self, window_rms_rad: float) -> bool:
        if not self.locked:
            self._streak = self._streak + 1 if window_rms_rad < self.threshold_rad else 0
            if self._streak >= self.n_consecutive:
                self.locked = True
                self._streak = 0
        else:
            above = window_rms_rad > UNLOCK_HYSTERESIS * self.threshold_rad
            self._streak = self._streak + 1 if above else 0
            if self._streak >= self.n_consecutive:
                self.locked = False
                self._streak = 0
        return self.locked


def assess_lock(
    residuals: np.ndarray,
    fov_rad: float,
    k_fraction: float = DEFAULT_LOCK_K_FRACTION,
    n_consecutive: int = DEFAULT_LOCK_N_CONSECUTIVE,
    window_ticks: int = DEFAULT_LOCK_WINDOW_TICKS,
) -> bool:
    """Lock state after processing an (n, 2) residual history window-wise."""
    residuals = np.asarray(residuals, dtype=float).reshape(-1, 2)
    n_windows = len(residuals) // window_ticks
    if n_windows < n_consecutive:
        raise PreconditionError(
            f"need at least {n_consecutive} windows of {window_ticks} ticks"
        )
    monitor = LockMonitor(k_fraction * fov_rad, n_consecutive)
    state = False
    for w in range(n_windows):
        chunk = residuals[w * window_ticks:(w + 1) * window_ticks]
        state = monitor.update(float(np.sqrt(np.mean(chunk**2) * 2.0)))
    return state


def simulate_tracking(
    jitter: JitterSeries,
    gains: LoopGains,
    sensor: SensorConfig,
    fov_rad: float,
    fpm_limits_rad: float = DEFAULT_FPM_LIMIT_RAD,
    offload_threshold: float = DEFAULT_OFFLOAD_THRESHOLD,
    lock_k_fraction: float = DEFAULT_LOCK_K_FRACTION,
    lock_n_consecutive: int = DEFAULT_LOCK_N_CONSECUTIVE,
    window_ticks: int = DEFAULT_LOCK_WINDOW_TICKS,
    intensity_series: np.ndarray | None = None,
) -> TrackingTelemetry:
    """Run the closed loop over a jitter series.

    The arithmetic here is the same per-axis PI-with-anti-windup as
    pi_update, inlined on plain floats for speed; the test suite pins the
    two paths to bit-identical results. Offload and lock evaluation happen
    once per window of `window_ticks` ticks.
    """
    if abs(jitter.rate_hz - gains.rate_hz) > 1e-9:
        raise PreconditionError(
            f"jitter rate {jitter.rate_hz} != control rate {gains.rate_hz}; resample upstream"
        )
    n = len(jitter)
    rng = np.random.default_rng(sensor.seed)
    noise = (
        rng.normal(0.0, sensor.noise_rms_rad, (n, 2))
        if sensor.noise_rms_rad > 0
        else np.zeros((n, 2))
    )
    d_tip = jitter.tip_rad.tolist()
    d_tilt = jitter.tilt_rad.tolist()
    nx_l = noise[:, 0].tolist()
    ny_l = noise[:, 1].tolist()
    inten = (
        intensity_series.tolist()
        if intensity_series is not None
        else [sensor.intensity] * n
    )

    kp, ki, dt = gains.kp, gains.ki, 1.0 / gains.rate_hz
    lim = fpm_limits_rad
    thr = sensor.detection_threshold
    monitor = LockMonitor(lock_k_fraction * fov_rad, lock_n_consecutive)

    cmd_x = cmd_y = 0.0          # FPM command written at the end of each tick
    ix = iy = 0.0                # integrator states
    mnt_x = mnt_y = 0.0          # cumulative mount offset
    applied_x = applied_y = 0.0  # compensation physically in effect this tick
    win_sum_x = win_sum_y = 0.0  # window sums for offload mean
    win_sq = 0.0                 # window sum of squared radial residual
    saturated_ticks = 0
    locked = False

    out_cmd_x = [0.0] * n
    out_cmd_y = [0.0] * n
    out_res_x = [0.0] * n
    out_res_y = [0.0] * n
    out_lock = [False] * n
    out_mnt_x = [0.0] * n
    out_mnt_y = [0.0] * n
    events: list[tuple[int, float, float]] = []

    for i in range(n):
        rx = d_tip[i] - applied_x
        ry = d_tilt[i] - applied_y
        if inten[i] >= thr:
            sat = False
            ex = rx + nx_l[i]
            ey = ry + ny_l[i]
            icx = ix + ex * dt
            raw = cmd_x + kp * ex + ki * icx
            if raw > lim or raw < -lim:
                cmd_x = lim if raw > 0 else -lim
                sat = True
            else:
                cmd_x, ix = raw, icx
            icy = iy + ey * dt
            raw = cmd_y + kp * ey + ki * icy
            if raw > lim or raw < -lim:
                cmd_y = lim if raw > 0 else -lim
                sat = True
            else:
                cmd_y, iy = raw, icy
            if sat:
                saturated_ticks += 1

        win_sum_x += cmd_x
        win_sum_y += cmd_y
        win_sq += rx * rx + ry * ry
        if (i + 1) % window_ticks == 0:
            mx = win_sum_x / window_ticks
            my = win_sum_y / window_ticks
            if max(abs(mx), abs(my)) > offload_threshold * lim:
                cmd_x -= mx
                cmd_y -= my
                mnt_x += mx
                mnt_y += my
                events.append((i, mx, my))
            locked = monitor.update(math.sqrt(win_sq / window_ticks))
            win_sum_x = win_sum_y = win_sq = 0.0

        out_cmd_x[i] = cmd_x
        out_cmd_y[i] = cmd_y
        out_res_x[i] = rx
        out_res_y[i] = ry
        out_lock[i] = locked
        out_mnt_x[i] = mnt_x
        out_mnt_y[i] = mnt_y
        applied_x = cmd_x + mnt_x
        applied_y = cmd_y + mnt_y

    telemetry = TrackingTelemetry(
        rate_hz=gains.rate_hz,
        raw_tip=np.asarray(d_tip),
        raw_tilt=np.asarray(d_tilt),
        cmd_tip=np.array(out_cmd_x),
        cmd_tilt=np.array(out_cmd_y),
        resid_tip=np.array(out_res_x),
        resid_tilt=np.array(out_res_y),
        lock=np.array(out_lock, dtype=bool),
        mount_tip=np.array(out_mnt_x),
        mount_tilt=np.array(out_mnt_y),
        offload_events=events,
        saturated_ticks=saturated_ticks,
    )
    telemetry.degraded = saturated_ticks > DEGRADED_SATURATION_FRACTION * n
    return telemetry
