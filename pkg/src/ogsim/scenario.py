"""Scenario files: schema, defaults, parsing, and conversion to a PassPlan.

A scenario is a JSON document; unknown keys and duplicate keys are rejected,
missing keys fall back to the documented defaults, and cross-references
(QKD wavelength vs filter band, beacon envelope, jitter sampling adequacy)
are checked at parse time so a run cannot start from an inconsistent file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import jsonschema

from . import qkd as qkd_mod
from .beacon import BeaconConfig, validate_beacon
from .constants import SITE_ALT_M, SITE_LAT_DEG, SITE_LON_DEG
from .controller import PassPlan
from .ephemeris import GroundSite, OrbitSpec
from .errors import ConfigurationError, SchemaError
from .qkd import DetectorModel, SessionConfig
from .tracking import LoopGains, SensorConfig
from .turbulence import TurbulenceParams, greenwood_frequency, scale_r0

DEFAULTS: dict = {
    "seed": 1,
    "pass_id": "pass-0001",
    "correction_mode": "closed_loop",
    "static_rotation_deg": 0.0,
    "acquisition_delay_s": 2.0,
    "qkd_go_delay_s": 2.0,
    "max_reacquisitions": 3,
    "duration_limit_s": None,
    "apply_point_ahead": True,
    "site": {
        "latitude_deg": SITE_LAT_DEG,
        "longitude_deg": SITE_LON_DEG,
        "altitude_m": SITE_ALT_M,
    },
    "orbit": {
        "altitude_km": 500.0,
        "max_elevation_deg": 70.0,
        "direction": "ascending",
    },
    "turbulence": {"r0_550_mm": 46.0, "wind_mps": 5.0},
    "tracking": {
        "kp": 0.5,
        "ki": 50.0,
        "rate_hz": 20000.0,
        "sensor_noise_urad": 0.2,
        "track_lambda_nm": 1550.0,
    },
    "qkd": {
        "lambda_nm": 850.0,
        "signal_rate_cps": 1.0e5,
        "detector_efficiency": 0.6,
        "dark_cps": 100.0,
        "sky_radiance_w_per_nm": 1.0e-18,
        "correction_gain": 0.5,
        "azimuth_noise_deg": 0.1,
        "plate_rate_limit_dps": 180.0,
    },
    "beacon": {
        "enabled": True,
        "lambda_nm": 1550.0,
        "power_w": 5.0,
        "downlink_present": True,
    },
}

_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "pass_id": {"type": "string"},
        "correction_mode": {"enum": ["open_loop", "closed_loop", "off"]},
        "static_rotation_deg": _NUM,
        "acquisition_delay_s": _NUM,
        "qkd_go_delay_s": _NUM,
        "max_reacquisitions": {"type": "integer", "minimum": 0},
        "duration_limit_s": {"type": ["number", "null"]},
        "apply_point_ahead": _BOOL,
        "site": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latitude_deg": _NUM,
                "longitude_deg": _NUM,
                "altitude_m": _NUM,
            },
        },
        "orbit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "altitude_km": _NUM,
                "max_elevation_deg": _NUM,
                "direction": {"enum": ["ascending", "descending"]},
            },
        },
        "turbulence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"r0_550_mm": _NUM, "wind_mps": _NUM},
        },
        "tracking": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kp": _NUM,
                "ki": _NUM,
                "rate_hz": _NUM,
                "sensor_noise_urad": _NUM,
                "track_lambda_nm": _NUM,
            },
        },
        "qkd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_nm": _NUM,
                "signal_rate_cps": _NUM,
                "detector_efficiency": _NUM,
                "dark_cps": _NUM,
                "sky_radiance_w_per_nm": _NUM,
                "correction_gain": _NUM,
                "azimuth_noise_deg": _NUM,
                "plate_rate_limit_dps": _NUM,
            },
        },
        "beacon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": _BOOL,
                "lambda_nm": _NUM,
                "power_w": _NUM,
                "downlink_present": _BOOL,
            },
        },
    },
}


@dataclass(frozen=True)
class Scenario:
    """A validated, fully defaulted scenario document."""

    data: dict

    def to_plan(self) -> PassPlan:
        d = self.data
        beacon = None
        if d["beacon"]["enabled"]:
            beacon = BeaconConfig(
                lambda_nm=d["beacon"]["lambda_nm"], power_w=d["beacon"]["power_w"]
            )
        return PassPlan(
            site=GroundSite(
                latitude_deg=d["site"]["latitude_deg"],
                longitude_deg=d["site"]["longitude_deg"],
                altitude_m=d["site"]["altitude_m"],
            ),
            orbit=OrbitSpec(
                altitude_km=d["orbit"]["altitude_km"],
                max_elevation_deg=d["orbit"]["max_elevation_deg"],
                direction=d["orbit"]["direction"],
            ),
            turbulence=TurbulenceParams(
                r0_550_m=d["turbulence"]["r0_550_mm"] * 1e-3,
                wind_mps=d["turbulence"]["wind_mps"],
                seed=d["seed"],
            ),
            gains=LoopGains(
                kp=d["tracking"]["kp"],
                ki=d["tracking"]["ki"],
                rate_hz=d["tracking"]["rate_hz"],
            ),
            sensor=SensorConfig(
                noise_rms_rad=d["tracking"]["sensor_noise_urad"] * 1e-6,
                seed=d["seed"] + 1_000_003,
            ),
            session=SessionConfig(
                qkd_lambda_nm=d["qkd"]["lambda_nm"],
                signal_rate_cps=d["qkd"]["signal_rate_cps"],
                sky_radiance_w_per_nm=d["qkd"]["sky_radiance_w_per_nm"],
                detectors=DetectorModel(
                    efficiency=d["qkd"]["detector_efficiency"],
                    dark_cps=d["qkd"]["dark_cps"],
                ),
                fov_rad=_fov(d),
                correction_gain=d["qkd"]["correction_gain"],
                azimuth_noise_deg=d["qkd"]["azimuth_noise_deg"],
                plate_rate_limit_dps=d["qkd"]["plate_rate_limit_dps"],
            ),
            beacon=beacon,
            correction_mode=d["correction_mode"],
            track_lambda_nm=d["tracking"]["track_lambda_nm"],
            seed=d["seed"],
            pass_id=d["pass_id"],
            acquisition_delay_s=d["acquisition_delay_s"],
            qkd_go_delay_s=d["qkd_go_delay_s"],
            max_reacquisitions=d["max_reacquisitions"],
            static_rotation_deg=d["static_rotation_deg"],
            beacon_downlink_present=d["beacon"]["downlink_present"],
            duration_limit_s=d["duration_limit_s"],
            apply_point_ahead=d["apply_point_ahead"],
        )


def _fov(d: dict) -> float:
    from .frontend import compute_qkd_fov

    turb = TurbulenceParams(
        r0_550_m=d["turbulence"]["r0_550_mm"] * 1e-3,
        wind_mps=d["turbulence"]["wind_mps"],
    )
    return compute_qkd_fov(turb, d["qkd"]["lambda_nm"])


def _merge_defaults(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = value
    return out


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise SchemaError(f"duplicate key: {key}")
        seen[key] = value
    return seen


def loads_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"scenario field {path}: {exc.message}") from exc
    data = _merge_defaults(DEFAULTS, raw)
    scenario = Scenario(data=data)
    _check_cross_references(data)
    scenario.to_plan()  # constructs every typed object, running range checks
    return scenario


def parse_scenario(path) -> Scenario:
    with open(path) as fh:
        return loads_scenario(fh.read())


def _check_cross_references(d: dict) -> None:
    # QKD wavelength must resolve to a filter stage
    try:
        qkd_mod.select_filter(d["qkd"]["lambda_nm"])
    except Exception as exc:
        raise ConfigurationError(
            f"qkd.lambda_nm {d['qkd']['lambda_nm']} has no filter stage: "
            f"receiver band is {qkd_mod.QKD_BAND_NM[0]}-{qkd_mod.QKD_BAND_NM[1]} nm"
        ) from exc
    if d["beacon"]["enabled"]:
        validate_beacon(
            BeaconConfig(lambda_nm=d["beacon"]["lambda_nm"], power_w=d["beacon"]["power_w"])
        )
    # jitter sampling adequacy at the tracking wavelength
    r0_track = scale_r0(
        d["turbulence"]["r0_550_mm"] * 1e-3, 550e-9, d["tracking"]["track_lambda_nm"] * 1e-9
    )
    f_g = greenwood_frequency(d["turbulence"]["wind_mps"], r0_track)
    if d["tracking"]["rate_hz"] < 10.0 * f_g:
        raise ConfigurationError(
            f"tracking.rate_hz {d['tracking']['rate_hz']} undersamples turbulence "
            f"(Greenwood {f_g:.1f} Hz at the tracking wavelength needs >= {10 * f_g:.0f} Hz)"
        )


def scenario_from_dict(overrides: dict) -> Scenario:
    """Scenario built from an in-memory dict (tests, selftest presets)."""
    return loads_scenario(json.dumps(overrides))
