"""BB84 polarization receiver: filtering, four-detector measurement in two
mutually unbiased bases, sifting and QBER estimation, and the per-pass
session runner.

Receiver model: a passive 50/50 basis splitter feeds an H/V analyzer pair
and a HWP-defined D/A pair. Counts per detector over a window are Poisson
with mean

    window * (eta * signal_rate * p_click / 2 + background / 4 + dark)

where p_click is the projective overlap with the analyzer state. No dead
time, afterpulsing or timing jitter. The transmitter is an ideal decoy-free
BB84 source: one uniformly random (basis, bit) per sub-window, logged so
sifting is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import polarization as pol
from .constants import APERTURE_M, C_LIGHT, H_PLANCK
from .ephemeris import PassEphemeris
from .errors import PreconditionError, UnsupportedWavelengthError
from .frontend import fiber_coupling_efficiency

# reference photon energy for the radiometric background estimate; fixed at
# the band center so the rate stays exactly linear in every input factor
_REF_PHOTON_ENERGY_J = H_PLANCK * C_LIGHT / 850e-9

QKD_BAND_NM = (780.0, 900.0)


@dataclass(frozen=True)
class FilterStage:
    center_nm: float
    half_width_nm: float
    id: str  # "F780" | "F850" | "custom"

    def contains(self, lambda_nm: float) -> bool:
        return abs(lambda_nm - self.center_nm) <= self.half_width_nm


F780 = FilterStage(center_nm=780.0, half_width_nm=10.0, id="F780")
F850 = FilterStage(center_nm=850.0, half_width_nm=3.0, id="F850")
DEFAULT_CUSTOM_HALF_WIDTH_NM = 5.0


def select_filter(lambda_nm: float) -> FilterStage:
    """Default stage whose passband contains the wavelength, else a custom
    stage anywhere in the 780-900 nm receiver band."""
    for stage in (F780, F850):
        if stage.contains(lambda_nm):
            return stage
    if QKD_BAND_NM[0] <= lambda_nm <= QKD_BAND_NM[1]:
        return FilterStage(
            center_nm=lambda_nm, half_width_nm=DEFAULT_CUSTOM_HALF_WIDTH_NM, id="custom"
        )
    raise UnsupportedWavelengthError(
        f"{lambda_nm} nm outside the {QKD_BAND_NM[0]}-{QKD_BAND_NM[1]} nm receiver band"
    )


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.6   # typical silicon SPAD, not a measured value
    dark_cps: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise PreconditionError(f"efficiency must be in [0, 1]: {self.efficiency}")
        if self.dark_cps < 0:
            raise PreconditionError(f"dark_cps must be >= 0: {self.dark_cps}")


@dataclass(frozen=True)
class QkdCounts:
    h: int
    v: int
    d: int
    a: int
    window_s: float

    def total(self) -> int:
        return self.h + self.v + self.d + self.a


def background_rate(
    sky_radiance_w_per_nm: float,
    filter_stage: FilterStage,
    fov_rad: float,
    aperture_m: float,
) -> float:
    """Background photon rate through the spatial+spectral filter stack.

    rate = radiance * full_width * fov^2 * aperture^2 / E_photon(850 nm),
    linear in every factor; geometric constants are folded into the radiance
    units.
    """
    if sky_radiance_w_per_nm < 0 or fov_rad < 0 or aperture_m < 0:
        raise PreconditionError("background_rate inputs must be >= 0")
    width_nm = 2.0 * filter_stage.half_width_nm
    return (
        sky_radiance_w_per_nm * width_nm * fov_rad**2 * aperture_m**2 / _REF_PHOTON_ENERGY_J
    )


_ANALYZERS = (
    ("h", pol.H_STATE),
    ("v", pol.V_STATE),
    ("d", pol.D_STATE),
    ("a", pol.A_STATE),
)


def detection_means(
    state: np.ndarray,
    signal_rate_cps: float,
    background_cps: float,
    detectors: DetectorModel,
    window_s: float,
) -> dict[str, float]:
    """Expected counts per detector for a pure input state."""
    means = {}
    for name, analyzer in _ANALYZERS:
        p_click = abs(np.vdot(analyzer, state)) ** 2
        means[name] = window_s * (
            detectors.efficiency * signal_rate_cps * p_click / 2.0
            + background_cps / 4.0
            + detectors.dark_cps
        )
    return means


def simulate_detection(
    state: np.ndarray,
    signal_rate_cps: float,
    background_cps: float,
    detectors: DetectorModel,
    window_s: float,
    rng: np.random.Generator,
) -> QkdCounts:
    if signal_rate_cps < 0 or background_cps < 0 or window_s <= 0:
        raise PreconditionError("rates must be >= 0 and window > 0")
    means = detection_means(state, signal_rate_cps, background_cps, detectors, window_s)
    draws = {name: int(rng.poisson(mu)) for name, mu in means.items()}
    return QkdCounts(window_s=window_s, **draws)


# transmitted states by (basis, bit); basis 0 = rectilinear, 1 = diagonal
SOURCE_STATES = {
    (0, 0): pol.H_STATE,
    (0, 1): pol.V_STATE,
    (1, 0): pol.D_STATE,
    (1, 1): pol.A_STATE,
}


@dataclass(frozen=True)
class StatsEntry:
    t: float
    sifted_count: int
    error_count: int
    qber: float | None          # None marks undefined (sifted = 0)
    background_fraction: float

    def as_payload(self) -> dict:
        return {
            "t": self.t,
            "sifted_count": self.sifted_count,
            "error_count": self.error_count,
            "qber": self.qber,
            "background_fraction": self.background_fraction,
        }


def estimate_qber(counts, transmitted_basis_log) -> StatsEntry:
    """Sift counts against the transmitted log and estimate the QBER.

    Accepts one QkdCounts with a single (basis, bit) entry, or aligned
    sequences of both; sifted events are the clicks in the transmitted
    basis, errors the clicks on its orthogonal detector.
    """
    if isinstance(counts, QkdCounts):
        counts = [counts]
        transmitted_basis_log = [transmitted_basis_log]
    if len(counts) != len(transmitted_basis_log):
        raise PreconditionError("transmitted log not aligned to counting windows")
    sifted = errors = 0
    t_end = 0.0
    for c, (basis, bit) in zip(counts, transmitted_basis_log):
        t_end += c.window_s
        if basis == 0:
            sifted += c.h + c.v
            errors += c.v if bit == 0 else c.h
        elif basis == 1:
            sifted += c.d + c.a
            errors += c.a if bit == 0 else c.d
        else:
            raise PreconditionError(f"unknown basis {basis}")
    qber = (errors / sifted) if sifted > 0 else None
    return StatsEntry(
        t=t_end,
        sifted_count=sifted,
        error_count=errors,
        qber=qber,
        background_fraction=0.0,
    )


@dataclass
class SessionStats:
    """Per-second sifting statistics across a pass."""

    entries: list[StatsEntry] = field(default_factory=list)
    waveplate_schedule: list[tuple[float, float, float, float]] = field(default_factory=list)
    # (t, measured_psi_deg, true_psi_deg) per closed-loop slow tick
    measured_azimuth: list[tuple[float, float, float]] = field(default_factory=list)
    final_plates: "pol.WaveplateSet | None" = None

    @property
    def t(self) -> np.ndarray:
        return np.array([e.t for e in self.entries])

    @property
    def qber(self) -> np.ndarray:
        return np.array([math.nan if e.qber is None else e.qber for e in self.entries])

    def max_qber(self) -> float:
        q = self.qber
        q = q[~np.isnan(q)]
        return float(q.max()) if len(q) else math.nan

    def fraction_below(self, threshold: float) -> float:
        q = self.qber
        defined = ~np.isnan(q)
        if not defined.any():
            return 0.0
        return float(np.mean(q[defined] < threshold))


@dataclass(frozen=True)
class SessionConfig:
    qkd_lambda_nm: float = 850.0
    signal_rate_cps: float = 1e5
    sky_radiance_w_per_nm: float = 1e-18
    detectors: DetectorModel = DetectorModel()
    fov_rad: float = 41.2e-6
    slow_tick_hz: float = 10.0
    stats_window_s: float = 1.0
    correction_gain: float = 0.5
    reference_psi_deg: float = 0.0       # beacon-vs-QKD base offset calibration
    azimuth_noise_deg: float = 0.1
    plate_rate_limit_dps: float = 180.0
    subwindows_per_stats: int = 10


def _rate_limited(current: pol.WaveplateSet, target: pol.WaveplateSet, max_step_deg: float) -> pol.WaveplateSet:
    """Move each plate toward its target along the short mod-180 arc,
    clamped to the per-tick travel budget."""
    out = []
    for cur, tgt in zip(current.as_tuple(), target.as_tuple()):
        delta = (tgt - cur + 90.0) % 180.0 - 90.0
        step = max(-max_step_deg, min(max_step_deg, delta))
        out.append((cur + step) % 180.0)
    return pol.WaveplateSet(*out)


def run_session(
    pass_ephemeris: PassEphemeris,
    channel_schedule,
    correction_mode: str,
    residual_rms_rad,
    config: SessionConfig,
    rng: np.random.Generator,
    t_start: float | None = None,
    t_end: float | None = None,
    initial_plates: pol.WaveplateSet | None = None,
) -> SessionStats:
    """Simulate a QKD session over a pass (or a [t_start, t_end] slice).

    channel_schedule: callable t -> 2x2 unitary for the full optical channel
    (frame rotation times any static bench transform). residual_rms_rad may
    be a scalar or a callable t -> rms used for the pointing-loss scaling.
    initial_plates chains the compensator across interrupted segments.
    """
    if correction_mode not in ("open_loop", "closed_loop", "off"):
        raise PreconditionError(f"unknown correction mode: {correction_mode}")
    background = background_rate(
        config.sky_radiance_w_per_nm,
        select_filter(config.qkd_lambda_nm),  # validates the wavelength too
        config.fov_rad,
        APERTURE_M,
    )
    resid_fn = residual_rms_rad if callable(residual_rms_rad) else (lambda _t: residual_rms_rad)

    t0 = pass_ephemeris.samples[0].t if t_start is None else t_start
    t1 = pass_ephemeris.samples[-1].t if t_end is None else t_end
    slow_dt = 1.0 / config.slow_tick_hz
    sub_dt = config.stats_window_s / config.subwindows_per_stats
    max_plate_step = config.plate_rate_limit_dps * slow_dt

    plates = initial_plates if initial_plates is not None else pol.WaveplateSet(0.0, 0.0, 0.0)
    if correction_mode == "open_loop" and initial_plates is None:
        plates = pol.solve_compensation(channel_schedule(t0), near=plates)

    stats = SessionStats()
    n_stats = int((t1 - t0) / config.stats_window_s)
    next_slow = t0
    for w in range(n_stats):
        w_start = t0 + w * config.stats_window_s
        window_counts = []
        window_log = []
        bg_expect = sig_expect = 0.0
        for s in range(config.subwindows_per_stats):
            t = w_start + s * sub_dt
            # polarization correction runs on the slow tick
            while next_slow <= t:
                if correction_mode == "open_loop":
                    target = pol.solve_compensation(channel_schedule(next_slow), near=plates)
                    plates = _rate_limited(plates, target, max_plate_step)
                elif correction_mode == "closed_loop":
                    probe = pol.apply_chain(
                        [channel_schedule(next_slow), plates.composite()],
                        pol.linear_state(config.reference_psi_deg),
                    )
                    true_psi = pol.polarization_azimuth(probe)
                    measured = true_psi + rng.normal(0.0, config.azimuth_noise_deg)
                    target = pol.closed_loop_step(
                        measured, config.reference_psi_deg, plates, config.correction_gain
                    )
                    plates = _rate_limited(plates, target, max_plate_step)
                    stats.measured_azimuth.append(
                        (next_slow, float(measured), float(true_psi))
                    )
                stats.waveplate_schedule.append((next_slow, *plates.as_tuple()))
                next_slow += slow_dt

            basis = int(rng.integers(0, 2))
            bit = int(rng.integers(0, 2))
            tx_state = SOURCE_STATES[(basis, bit)]
            rx_state = pol.apply_chain(
                [channel_schedule(t), plates.composite()], tx_state
            )
            pointing_eta = fiber_coupling_efficiency(resid_fn(t), config.fov_rad)
            counts = simulate_detection(
                rx_state,
                config.signal_rate_cps * pointing_eta,
                background,
                config.detectors,
                sub_dt,
                rng,
            )
            window_counts.append(counts)
            window_log.append((basis, bit))
            bg_expect += (background + 4 * config.detectors.dark_cps) * sub_dt
            sig_expect += (
                config.detectors.efficiency * config.signal_rate_cps * pointing_eta * sub_dt
            )

        entry = estimate_qber(window_counts, window_log)
        denom = sig_expect + bg_expect
        entry = StatsEntry(
            t=w_start + config.stats_window_s,
            sifted_count=entry.sifted_count,
            error_count=entry.error_count,
            qber=entry.qber,
            background_fraction=(bg_expect / denom) if denom > 0 else 0.0,
        )
        stats.entries.append(entry)
    stats.final_plates = plates
    return stats
