"""Optical routing of the receiver box: spectral channel separation,
field-of-view sizing and multimode-fiber coupling for the SWIR port.

Dichroic band edges (lower edge inclusive, upper exclusive):
QKD 770-903 nm (covers both filter sets with margin), VIS/NIR beacon
600-770 and 903-1000 nm, SWIR reception 1530-1565 nm. Uplink 1530-1610 nm
lives with the beacon transmitter, not here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import math

from .constants import APERTURE_M, FIBER_MAX_RATE_BPS, FOCAL_RATIO
from .errors import PreconditionError, UnsupportedWavelengthError
from .turbulence import TurbulenceParams, scale_r0, seeing_fwhm


class OpticalChannel(enum.Enum):
    QKD = "qkd"
    VIS_NIR_BEACON = "vis_nir_beacon"
    SWIR_BEACON = "swir_beacon"


# (low_nm inclusive, high_nm exclusive, channel)
BAND_TABLE = (
    (600.0, 770.0, OpticalChannel.VIS_NIR_BEACON),
    (770.0, 903.0, OpticalChannel.QKD),
    (903.0, 1000.0, OpticalChannel.VIS_NIR_BEACON),
    (1530.0, 1565.0, OpticalChannel.SWIR_BEACON),
)

QKD_FOV_SEEING_MARGIN = 1.5
# fraction of downlink beacon light picked off for the fine acquisition
# sensor; not specified by the hardware description, configurable
DEFAULT_ACQ_PICKOFF_FRACTION = 0.10
# minimum coupling efficiency for the fiber link-rate gate
DEFAULT_COUPLING_THRESHOLD = 0.5


def route_wavelength(lambda_nm: float) -> OpticalChannel:
    """Which receiver path a wavelength lands in; errors between bands."""
    for low, high, channel in BAND_TABLE:
        if low <= lambda_nm < high:
            return channel
    raise UnsupportedWavelengthError(
        f"{lambda_nm} nm outside all receiver bands "
        f"(600-1000 and 1530-1565 nm)"
    )


def compute_qkd_fov(turb: TurbulenceParams, lambda_nm: float) -> float:
    """QKD-path field of view: 1.5x the seeing FWHM at the QKD wavelength
    under the scenario's worst (smallest-r0) conditions, radians."""
    lam = lambda_nm * 1e-9
    r0 = scale_r0(turb.r0_550_m, 550e-9, lam)
    return QKD_FOV_SEEING_MARGIN * seeing_fwhm(r0, lam)


def fiber_coupling_efficiency(residual_rms_rad: float, fiber_fov_rad: float) -> float:
    """Gaussian pointing-loss model eta = exp(-2 (sigma/theta_f)^2)."""
    if residual_rms_rad < 0 or fiber_fov_rad <= 0:
        raise PreconditionError("need residual >= 0 and fiber FoV > 0")
    return math.exp(-2.0 * (residual_rms_rad / fiber_fov_rad) ** 2)


def link_rate_bps(
    coupling_efficiency: float,
    threshold: float = DEFAULT_COUPLING_THRESHOLD,
    max_rate_bps: float = FIBER_MAX_RATE_BPS,
) -> float:
    """Achieved downlink data rate: full fiber rate when coupling clears the
    documented threshold, zero otherwise (simple link gate)."""
    return max_rate_bps if coupling_efficiency >= threshold else 0.0


@dataclass(frozen=True)
class StationOptics:
    """Fixed receiver geometry plus the scenario-derived QKD field of view."""

    qkd_fov_rad: float
    aperture_m: float = APERTURE_M
    focal_ratio: float = FOCAL_RATIO
    fiber_max_rate_bps: float = FIBER_MAX_RATE_BPS
    acq_pickoff_fraction: float = DEFAULT_ACQ_PICKOFF_FRACTION

    @classmethod
    def for_scenario(cls, turb: TurbulenceParams, qkd_lambda_nm: float) -> "StationOptics":
        return cls(qkd_fov_rad=compute_qkd_fov(turb, qkd_lambda_nm))

    def band_table_json(self) -> list[dict]:
        """Band edges for UI display, serializable."""
        return [
            {"low_nm": low, "high_nm": high, "channel": ch.value}
            for low, high, ch in BAND_TABLE
        ]
