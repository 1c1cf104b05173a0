"""Kolmogorov-scaled tip/tilt disturbance of the received wavefront.

The atmosphere is reduced to the two angle-of-arrival modes the fast
tracking loop must reject; higher-order modes are out of scope for a
tip/tilt-stabilized receiver. Standard scalings used here:

    r0(lambda)   = r0_ref * (lambda / lambda_ref)^(6/5)
    seeing FWHM  = 0.98 * lambda / r0
    sigma_tilt   = sqrt(0.182 * (D/r0)^(5/3) * (lambda/D)^2)   per axis
    f_Greenwood  = 0.427 * v / r0

The temporal model is white Gaussian noise through a single-pole low-pass
with cutoff at the Greenwood frequency, variance renormalized analytically
so the stationary per-axis variance equals sigma_tilt^2 at every sample.
A frozen atmosphere (v = 0) degenerates to a constant random offset per
axis, drawn from the same stationary distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PreconditionError

# per-axis gradient-tilt variance coefficient; the test oracles use the
# same constant, so change it in exactly one place
G_TILT_COEFF = 0.182
SEEING_COEFF = 0.98
GREENWOOD_COEFF = 0.427


@dataclass(frozen=True)
class TurbulenceParams:
    """Fried parameter referenced to 550 nm on the line of sight, plus the
    transverse boundary-layer wind speed driving the temporal evolution."""

    r0_550_m: float
    wind_mps: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.r0_550_m <= 0:
            raise ConfigurationError(f"r0 must be positive: {self.r0_550_m}")
        if self.wind_mps < 0:
            raise ConfigurationError(f"wind speed must be >= 0: {self.wind_mps}")


@dataclass(frozen=True)
class JitterSeries:
    rate_hz: float
    tip_rad: np.ndarray
    tilt_rad: np.ndarray
    target_sigma_rad: float
    greenwood_hz: float

    def __post_init__(self) -> None:
        if len(self.tip_rad) != len(self.tilt_rad):
            raise ConfigurationError("tip/tilt series length mismatch")
        if not (np.all(np.isfinite(self.tip_rad)) and np.all(np.isfinite(self.tilt_rad))):
            raise ConfigurationError("non-finite jitter samples")

    def __len__(self) -> int:
        return len(self.tip_rad)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.tip_rad)) / self.rate_hz

    def to_jsonl(self, path) -> None:
        """Write replayable JSON-Lines records {t, tip_rad, tilt_rad}."""
        with open(path, "w") as fh:
            for i, (tip, tilt) in enumerate(zip(self.tip_rad, self.tilt_rad)):
                fh.write(
                    json.dumps(
                        {"t": i / self.rate_hz, "tip_rad": float(tip), "tilt_rad": float(tilt)},
                        sort_keys=True,
                    )
                    + "\n"
                )


def scale_r0(r0_ref_m: float, lambda_ref_m: float, lambda_m: float) -> float:
    """Fried parameter at another wavelength, r0 ~ lambda^(6/5)."""
    if r0_ref_m <= 0 or lambda_ref_m <= 0 or lambda_m <= 0:
        raise PreconditionError("scale_r0 inputs must be positive")
    return r0_ref_m * (lambda_m / lambda_ref_m) ** 1.2


def seeing_fwhm(r0_m: float, lambda_m: float) -> float:
    """Long-exposure seeing disk FWHM in radians."""
    if r0_m <= 0 or lambda_m <= 0:
        raise PreconditionError("seeing_fwhm inputs must be positive")
    return SEEING_COEFF * lambda_m / r0_m


def tilt_sigma(aperture_m: float, r0_m: float, lambda_m: float) -> float:
    """One-sigma per-axis angle-of-arrival fluctuation over the aperture."""
    if aperture_m <= 0 or r0_m <= 0 or lambda_m <= 0:
        raise PreconditionError("tilt_sigma inputs must be positive")
    return np.sqrt(G_TILT_COEFF * (aperture_m / r0_m) ** (5.0 / 3.0)) * (lambda_m / aperture_m)


def greenwood_frequency(wind_mps: float, r0_m: float) -> float:
    """Characteristic temporal frequency of the disturbance, Hz."""
    if wind_mps < 0 or r0_m <= 0:
        raise PreconditionError("greenwood_frequency needs wind >= 0, r0 > 0")
    return GREENWOOD_COEFF * wind_mps / r0_m


def _ar1_series(rng: np.random.Generator, n: int, pole: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) sequence x[i] = pole*x[i-1] + w[i] with std `sigma`.

    The drive variance is pre-scaled, and the first sample is drawn from the
    stationary distribution, so no renormalization pass or warm-up is needed.
    """
    from scipy.signal import lfilter

    x = np.empty(n)
    x[0] = rng.normal(0.0, sigma)
    if n > 1:
        w = rng.normal(0.0, sigma * np.sqrt(1.0 - pole * pole), n - 1)
        x[1:], _ = lfilter([1.0], [1.0, -pole], w, zi=[pole * x[0]])
    return x


def generate_jitter(
    params: TurbulenceParams,
    aperture_m: float,
    lambda_m: float,
    duration_s: float,
    rate_hz: float,
) -> JitterSeries:
    """Two independent per-axis angle-of-arrival series at the aperture.

    Deterministic for a fixed (params, seed): the two axes draw from child
    streams spawned off the seed, so tip and tilt stay uncorrelated.
    """
    if duration_s <= 0 or rate_hz <= 0:
        raise PreconditionError("duration and rate must be positive")
    r0 = scale_r0(params.r0_550_m, 550e-9, lambda_m)
    f_g = greenwood_frequency(params.wind_mps, r0)
    if rate_hz < 10.0 * f_g:
        raise PreconditionError(
            f"rate {rate_hz} Hz undersamples the disturbance "
            f"(need >= 10 x Greenwood = {10 * f_g:.1f} Hz)"
        )
    sigma = tilt_sigma(aperture_m, r0, lambda_m)
    n = int(round(duration_s * rate_hz))
    pole = float(np.exp(-2.0 * np.pi * f_g / rate_hz))  # 1.0 when wind = 0 (frozen flow)

    tip_rng, tilt_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(params.seed).spawn(2)
    ]
    if params.wind_mps == 0.0:
        # frozen atmosphere: one stationary draw held for the whole series
        tip = np.full(n, tip_rng.normal(0.0, sigma))
        tilt = np.full(n, tilt_rng.normal(0.0, sigma))
    else:
        tip = _ar1_series(tip_rng, n, pole, sigma)
        tilt = _ar1_series(tilt_rng, n, pole, sigma)

    return JitterSeries(
        rate_hz=rate_hz,
        tip_rad=tip,
        tilt_rad=tilt,
        target_sigma_rad=sigma,
        greenwood_hz=f_g,
    )
