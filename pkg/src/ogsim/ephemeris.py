"""Satellite pass geometry and kinematics for a ground site.

Model: circular two-body orbit over a spherical, non-rotating Earth
(mu = 3.986e14 m^3/s^2, R_earth = 6371 km), no J2, no refraction. A pass is
parameterized by orbit altitude and the maximum elevation it reaches, which
covers all the control-relevant dynamics without full orbital elements.

The polarization frame rotation seen at an alt-az Nasmyth port is modeled as
the mount-induced field rotation term

    d(rho)/dt = d(az)/dt * sin(el)

integrated along the pass with rho = 0 at rise, satellite body assumed
nadir-pointing (zero yaw steering). Exactly at 90 deg elevation the azimuth
rate is singular and the rotation is undefined; callers interpolate across
that sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import C_LIGHT, MU_EARTH, R_EARTH
from .errors import ConfigurationError, PreconditionError, ZenithSingularityError

DEFAULT_HORIZON_MASK_DEG = 10.0


@dataclass(frozen=True)
class GroundSite:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float = 0.0

    def __post_init__(self) -> None:
        if abs(self.latitude_deg) > 90.0:
            raise ConfigurationError(f"latitude out of range: {self.latitude_deg}")
        if abs(self.longitude_deg) > 180.0:
            raise ConfigurationError(f"longitude out of range: {self.longitude_deg}")
        if self.altitude_m < -500.0:
            raise ConfigurationError(f"altitude below -500 m: {self.altitude_m}")


@dataclass(frozen=True)
class OrbitSpec:
    """Circular LEO orbit plus the pass geometry it produces at the site."""

    altitude_km: float
    max_elevation_deg: float
    direction: str = "ascending"   # or "descending"

    def __post_init__(self) -> None:
        if not 300.0 <= self.altitude_km <= 2000.0:
            raise ConfigurationError(f"altitude_km outside LEO range: {self.altitude_km}")
        if not 0.0 < self.max_elevation_deg <= 90.0:
            raise ConfigurationError(f"max_elevation_deg invalid: {self.max_elevation_deg}")
        if self.direction not in ("ascending", "descending"):
            raise ConfigurationError(f"direction must be ascending|descending: {self.direction}")

    @property
    def orbital_speed_mps(self) -> float:
        return math.sqrt(MU_EARTH / (R_EARTH + self.altitude_km * 1e3))


@dataclass(frozen=True)
class PassSample:
    t: float
    azimuth_deg: float
    elevation_deg: float
    range_m: float
    transverse_velocity_mps: float
    frame_rotation_deg: float
    # sky-motion rates; carried so uplink pointing can resolve the direction
    # of travel from a single sample
    az_rate_dps: float = 0.0
    el_rate_dps: float = 0.0


@dataclass(frozen=True)
class PassEphemeris:
    samples: tuple[PassSample, ...]
    step_s: float
    horizon_mask_deg: float = DEFAULT_HORIZON_MASK_DEG
    site: GroundSite | None = None
    orbit: OrbitSpec | None = None

    def __post_init__(self) -> None:
        if not self.samples:
            raise ConfigurationError("empty ephemeris")
        ts = [s.t for s in self.samples]
        dts = np.diff(ts)
        if len(dts) and not np.allclose(dts, self.step_s, rtol=0, atol=1e-9):
            raise ConfigurationError("sample times are not a uniform grid")

    @property
    def duration_s(self) -> float:
        return self.samples[-1].t - self.samples[0].t

    def culmination(self) -> PassSample:
        return max(self.samples, key=lambda s: s.elevation_deg)

    def interpolated(self, t: float) -> PassSample:
        """Linear interpolation between grid samples (frame rotation included,
        which also bridges the zenith singularity)."""
        t0 = self.samples[0].t
        if t <= t0:
            return self.samples[0]
        if t >= self.samples[-1].t:
            return self.samples[-1]
        i = int((t - t0) / self.step_s)
        a, b = self.samples[i], self.samples[i + 1]
        w = (t - a.t) / (b.t - a.t)

        def lerp(x, y):
            return x + w * (y - x)

        # azimuth interpolated on the unwrapped difference
        daz = (b.azimuth_deg - a.azimuth_deg + 180.0) % 360.0 - 180.0
        return PassSample(
            t=t,
            azimuth_deg=(a.azimuth_deg + w * daz) % 360.0,
            elevation_deg=lerp(a.elevation_deg, b.elevation_deg),
            range_m=lerp(a.range_m, b.range_m),
            transverse_velocity_mps=lerp(a.transverse_velocity_mps, b.transverse_velocity_mps),
            frame_rotation_deg=lerp(a.frame_rotation_deg, b.frame_rotation_deg),
            az_rate_dps=lerp(a.az_rate_dps, b.az_rate_dps),
            el_rate_dps=lerp(a.el_rate_dps, b.el_rate_dps),
        )


def _central_angle_at_elevation(el_rad: float, site_radius_m: float, orbit_radius_m: float) -> float:
    """Earth-central angle between site and sub-satellite point at elevation el."""
    return math.acos((site_radius_m / orbit_radius_m) * math.cos(el_rad)) - el_rad


def generate_pass(
    site: GroundSite,
    orbit: OrbitSpec,
    step_s: float,
    horizon_mask_deg: float = DEFAULT_HORIZON_MASK_DEG,
) -> PassEphemeris:
    """Generate one culminating pass from horizon-mask rise to set.

    The sample grid is symmetric about culmination (t = 0 at maximum
    elevation), so the culmination is always on-grid and rise/set samples
    mirror each other.
    """
    if step_s <= 0:
        raise ConfigurationError(f"step_s must be positive: {step_s}")
    if orbit.max_elevation_deg < horizon_mask_deg:
        raise ConfigurationError(
            f"max elevation {orbit.max_elevation_deg} below horizon mask {horizon_mask_deg}"
        )

    r_site = R_EARTH + site.altitude_m
    r_orb = R_EARTH + orbit.altitude_km * 1e3
    v_orb = orbit.orbital_speed_mps
    omega = v_orb / r_orb

    gamma_min = _central_angle_at_elevation(math.radians(orbit.max_elevation_deg), r_site, r_orb)
    gamma_mask = _central_angle_at_elevation(math.radians(horizon_mask_deg), r_site, r_orb)
    t_half = math.acos(min(1.0, math.cos(gamma_mask) / math.cos(gamma_min))) / omega
    k = int(math.floor(t_half / step_s))
    t = np.arange(-k, k + 1) * step_s

    # site local frame: up = x, east = y, north = z; closest approach due east
    sign = 1.0 if orbit.direction == "ascending" else -1.0
    p = np.array([math.cos(gamma_min), math.sin(gamma_min), 0.0])
    tangent = np.array([0.0, 0.0, sign])

    cwt = np.cos(omega * t)[:, None]
    swt = np.sin(omega * t)[:, None]
    sat = r_orb * (p[None, :] * cwt + tangent[None, :] * swt)
    vel = r_orb * omega * (-p[None, :] * swt + tangent[None, :] * cwt)
    los = sat - np.array([r_site, 0.0, 0.0])[None, :]
    rng = np.linalg.norm(los, axis=1)
    lhat = los / rng[:, None]

    el = np.arcsin(np.clip(lhat[:, 0], -1.0, 1.0))
    az = np.arctan2(lhat[:, 1], lhat[:, 2])  # from north, through east
    v_rad = np.sum(vel * lhat, axis=1)
    v_trans = np.linalg.norm(vel - v_rad[:, None] * lhat, axis=1)

    # frame rotation: trapezoid-style integration of daz*sin(el), rho(rise)=0
    az_unwrapped = np.unwrap(az)
    rho = np.zeros_like(az_unwrapped)
    if len(t) > 1:
        daz = np.diff(az_unwrapped)
        el_mid = 0.5 * (el[1:] + el[:-1])
        rho[1:] = np.cumsum(daz * np.sin(el_mid))

    # sky rates by central difference (one-sided at the ends)
    az_rate = np.gradient(az_unwrapped, step_s) if len(t) > 1 else np.zeros(1)
    el_rate = np.gradient(el, step_s) if len(t) > 1 else np.zeros(1)

    samples = tuple(
        PassSample(
            t=float(t[i]),
            azimuth_deg=float(np.degrees(az[i]) % 360.0),
            elevation_deg=float(np.degrees(el[i])),
            range_m=float(rng[i]),
            transverse_velocity_mps=float(v_trans[i]),
            frame_rotation_deg=float(np.degrees(rho[i])),
            az_rate_dps=float(np.degrees(az_rate[i])),
            el_rate_dps=float(np.degrees(el_rate[i])),
        )
        for i in range(len(t))
    )
    return PassEphemeris(
        samples=samples,
        step_s=step_s,
        horizon_mask_deg=horizon_mask_deg,
        site=site,
        orbit=orbit,
    )


def point_ahead_angle(sample: PassSample) -> float:
    """Transmit lead angle, 2 * v_transverse / c, in radians."""
    if sample.transverse_velocity_mps < 0:
        raise PreconditionError("transverse velocity must be non-negative")
    return 2.0 * sample.transverse_velocity_mps / C_LIGHT


def frame_rotation_angle(sample: PassSample, mount: str = "alt_az_nasmyth") -> float:
    """Rotation of the received polarization frame for this sample, degrees.

    The value itself is path-dependent and is filled in by generate_pass;
    this accessor enforces the mount convention and the zenith singularity.
    """
    if mount != "alt_az_nasmyth":
        raise ConfigurationError(f"unknown mount model: {mount}")
    if sample.elevation_deg >= 90.0:
        raise ZenithSingularityError(
            "field rotation undefined at zenith; interpolate across this sample"
        )
    return sample.frame_rotation_deg
