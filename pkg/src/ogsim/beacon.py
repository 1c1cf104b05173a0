"""Uplink beacon transmitter: configuration envelope, low-frequency pointing
with point-ahead, and the star-imaging co-alignment calibration.

The power/band envelope is inclusive: exactly 10 W and exactly 1530/1610 nm
are accepted. Uplink propagation itself is not modeled; this module exists
to exercise pointing and configuration logic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ephemeris import PassSample, point_ahead_angle
from .errors import ConfigurationError, InsufficientDataError

BAND_NM = (1530.0, 1610.0)
MAX_POWER_W = 10.0
POINTING_UPDATE_MAX_HZ = 10.0
OUTLIER_SIGMA = 3.0


@dataclass(frozen=True)
class BeaconConfig:
    lambda_nm: float
    power_w: float
    modulated: bool = False


def validate_beacon(config: BeaconConfig) -> BeaconConfig:
    """Accept iff both the band and the power envelope hold (inclusive)."""
    if not BAND_NM[0] <= config.lambda_nm <= BAND_NM[1]:
        raise ConfigurationError(
            f"beacon wavelength {config.lambda_nm} nm outside {BAND_NM[0]}-{BAND_NM[1]} nm"
        )
    if not 0.0 < config.power_w <= MAX_POWER_W:
        raise ConfigurationError(
            f"beacon power {config.power_w} W outside (0, {MAX_POWER_W}] W"
        )
    return config


@dataclass(frozen=True)
class UplinkPointing:
    t: float
    azimuth_deg: float
    elevation_deg: float
    point_ahead_rad: float
    coalign_offset_rad: tuple[float, float]


def compute_uplink_pointing(
    sample: PassSample,
    coalign_offset_rad: tuple[float, float] = (0.0, 0.0),
    apply_point_ahead: bool = True,
) -> UplinkPointing:
    """Transmit direction: downlink direction led by the point-ahead angle
    along the satellite's apparent velocity, plus the calibration offset.

    Recomputation is meant for the controller's slow tick (<= 10 Hz).
    """
    pa = point_ahead_angle(sample) if apply_point_ahead else 0.0
    # unit vector of apparent motion in the (cross-el, el) tangent plane
    cos_el = math.cos(math.radians(sample.elevation_deg))
    vx = math.radians(sample.az_rate_dps) * cos_el
    vy = math.radians(sample.el_rate_dps)
    norm = math.hypot(vx, vy)
    if norm > 0 and pa > 0:
        lead_x = pa * vx / norm
        lead_y = pa * vy / norm
    else:
        lead_x = lead_y = 0.0
    off_x, off_y = coalign_offset_rad
    daz = (lead_x + off_x) / cos_el if cos_el > 1e-12 else 0.0
    return UplinkPointing(
        t=sample.t,
        azimuth_deg=sample.azimuth_deg + math.degrees(daz),
        elevation_deg=sample.elevation_deg + math.degrees(lead_y + off_y),
        point_ahead_rad=pa,
        coalign_offset_rad=(off_x, off_y),
    )


def coalign_calibrate(
    star_measurements,
    min_pairs: int = 5,
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Estimate the Rx/Tx co-alignment offset from paired star centroids.

    star_measurements: iterable of ((rx_x, rx_y), (tx_x, tx_y)) pairs.
    Returns (offset, standard_error) per axis. Estimator: mean of rx - tx
    with one pass of 3-sigma outlier rejection; deterministic for a fixed
    input sequence.
    """
    pairs = [
        (rx[0] - tx[0], rx[1] - tx[1]) for rx, tx in star_measurements
    ]
    if len(pairs) < min_pairs:
        raise InsufficientDataError(
            f"need at least {min_pairs} paired star measurements, got {len(pairs)}"
        )
    deltas = np.asarray(pairs, dtype=float)
    mean = deltas.mean(axis=0)
    std = deltas.std(axis=0, ddof=1)
    keep = np.ones(len(deltas), dtype=bool)
    for ax in range(2):
        if std[ax] > 0:
            keep &= np.abs(deltas[:, ax] - mean[ax]) <= OUTLIER_SIGMA * std[ax]
    kept = deltas[keep] if keep.sum() >= min_pairs else deltas
    mean = kept.mean(axis=0)
    sem = kept.std(axis=0, ddof=1) / math.sqrt(len(kept)) if len(kept) > 1 else (0.0, 0.0)
    return (float(mean[0]), float(mean[1])), (float(sem[0]), float(sem[1]))
