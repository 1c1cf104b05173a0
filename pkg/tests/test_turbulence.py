import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ogsim import turbulence as turb
from ogsim.errors import PreconditionError


def test_scale_r0_frozen_values():
    assert turb.scale_r0(0.018, 550e-9, 550e-9) == pytest.approx(0.018, rel=1e-12)
    # independent evaluation: 0.018 * (850/550)**1.2
    assert turb.scale_r0(0.018, 550e-9, 850e-9) == pytest.approx(0.030349, abs=0.05e-3)
    assert turb.scale_r0(0.046, 550e-9, 850e-9) == pytest.approx(0.077562, abs=0.1e-3)


@given(
    r0=st.floats(0.005, 0.5),
    l0=st.floats(400e-9, 2000e-9),
    l1=st.floats(400e-9, 2000e-9),
    l2=st.floats(400e-9, 2000e-9),
)
def test_scale_r0_multiplicative(r0, l0, l1, l2):
    direct = turb.scale_r0(r0, l0, l2)
    chained = turb.scale_r0(turb.scale_r0(r0, l0, l1), l1, l2)
    assert chained == pytest.approx(direct, rel=1e-12)


def test_seeing_fwhm_frozen_values():
    assert turb.seeing_fwhm(0.018, 550e-9) == pytest.approx(29.9e-6, abs=0.1e-6)
    assert turb.seeing_fwhm(0.046, 550e-9) == pytest.approx(11.7e-6, abs=0.1e-6)
    assert turb.seeing_fwhm(0.009, 550e-9) == pytest.approx(
        2 * turb.seeing_fwhm(0.018, 550e-9), rel=1e-12
    )


def test_tilt_sigma_frozen_values():
    assert turb.tilt_sigma(0.8, 0.018, 550e-9) == pytest.approx(6.92e-6, abs=0.05e-6)
    assert turb.tilt_sigma(0.8, 0.046, 550e-9) == pytest.approx(3.17e-6, abs=0.05e-6)
    d = 0.8
    assert turb.tilt_sigma(d, d, 550e-9) == pytest.approx(
        math.sqrt(0.182) * 550e-9 / d, rel=1e-12
    )


def test_greenwood_frozen_values():
    assert turb.greenwood_frequency(11, 0.018) == pytest.approx(260.9, abs=0.5)
    assert turb.greenwood_frequency(11, 0.046) == pytest.approx(102.1, abs=0.5)
    assert turb.greenwood_frequency(0, 0.123) == 0.0


@given(
    st.floats(0.005, 0.5), st.floats(400e-9, 2e-6), st.floats(0.1, 30), st.floats(0.1, 2)
)
def test_derived_quantities_match_scripted_formulas(r0, lam, wind, d):
    assert turb.scale_r0(r0, 550e-9, lam) == pytest.approx(
        r0 * (lam / 550e-9) ** (6 / 5), rel=1e-9
    )
    assert turb.seeing_fwhm(r0, lam) == pytest.approx(0.98 * lam / r0, rel=1e-9)
    assert turb.tilt_sigma(d, r0, lam) == pytest.approx(
        math.sqrt(0.182 * (d / r0) ** (5 / 3) * (lam / d) ** 2), rel=1e-9
    )
    assert turb.greenwood_frequency(wind, r0) == pytest.approx(
        0.427 * wind / r0, rel=1e-9
    )


WORST = turb.TurbulenceParams(r0_550_m=0.018, wind_mps=11.0, seed=42)


def _series(n_samples=1_000_000, lam=1550e-9, params=WORST):
    r0 = turb.scale_r0(params.r0_550_m, 550e-9, lam)
    rate = 10.0 * turb.greenwood_frequency(params.wind_mps, r0)
    return turb.generate_jitter(params, 0.8, lam, n_samples / rate, rate)


def test_jitter_determinism():
    a = turb.generate_jitter(WORST, 0.8, 1550e-9, 5.0, 2000.0)
    b = turb.generate_jitter(WORST, 0.8, 1550e-9, 5.0, 2000.0)
    assert np.array_equal(a.tip_rad, b.tip_rad)
    assert np.array_equal(a.tilt_rad, b.tilt_rad)


def test_jitter_variance_within_5_percent():
    j = _series()
    assert len(j) == 1_000_000
    for axis in (j.tip_rad, j.tilt_rad):
        assert axis.std() == pytest.approx(j.target_sigma_rad, rel=0.05)


def test_jitter_axes_uncorrelated():
    j = _series()
    r = np.corrcoef(j.tip_rad, j.tilt_rad)[0, 1]
    assert abs(r) < 0.02


def test_autocorrelation_time_matches_greenwood():
    j = _series()
    x = j.tip_rad - j.tip_rad.mean()
    var = np.mean(x * x)
    # 1/e crossing of the empirical autocorrelation, log-interpolated
    prev = 1.0
    tau_samples = None
    for k in range(1, 200):
        rho = float(np.mean(x[:-k] * x[k:]) / var)
        if rho <= math.exp(-1):
            frac = (math.log(prev) + 1.0) / (math.log(prev) - math.log(rho))
            tau_samples = (k - 1) + frac
            break
        prev = rho
    assert tau_samples is not None
    tau = tau_samples / j.rate_hz
    expected = 1.0 / (2 * math.pi * j.greenwood_hz)
    assert tau == pytest.approx(expected, rel=0.15)


def test_frozen_atmosphere_constant_offset():
    params = turb.TurbulenceParams(r0_550_m=0.018, wind_mps=0.0, seed=9)
    j = turb.generate_jitter(params, 0.8, 850e-9, 1.0, 1000.0)
    assert np.all(j.tip_rad == j.tip_rad[0])
    assert np.all(j.tilt_rad == j.tilt_rad[0])
    assert j.tip_rad[0] != j.tilt_rad[0]


def test_undersampled_rate_rejected():
    with pytest.raises(PreconditionError):
        turb.generate_jitter(WORST, 0.8, 550e-9, 1.0, 1000.0)


def test_jsonl_export_roundtrip(tmp_path):
    import json

    j = turb.generate_jitter(WORST, 0.8, 1550e-9, 0.1, 2000.0)
    path = tmp_path / "jitter.jsonl"
    j.to_jsonl(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(j)
    assert rows[3]["tip_rad"] == j.tip_rad[3]
    assert rows[3]["t"] == pytest.approx(3 / j.rate_hz)
