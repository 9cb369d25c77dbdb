import numpy as np
import pytest

from ssanc.metrics import (
    SDI_FLOOR_DB,
    MetricBundle,
    control_effort,
    evaluate_run,
    noise_reduction,
    quality_proxy,
    speech_distortion_index,
)
from ssanc.scene import MicSignals
from ssanc.simulate import RunResult


def test_noise_reduction_identity_is_zero_db():
    v = np.random.default_rng(0).standard_normal(100)
    assert noise_reduction(v, v) == pytest.approx(0.0, abs=1e-12)


def test_noise_reduction_halving_is_six_db():
    v = np.random.default_rng(1).standard_normal(100)
    assert noise_reduction(v, v / 2) == pytest.approx(20 * np.log10(2), abs=1e-9)
    assert noise_reduction(v, v / 2) == pytest.approx(6.0206, abs=1e-3)


def test_noise_reduction_scaling_law():
    v = np.random.default_rng(2).standard_normal(64)
    for c in (0.1, 0.5, 2.0):
        assert noise_reduction(v, c * v) == pytest.approx(-20 * np.log10(c), abs=1e-9)


def test_noise_reduction_zero_energy_flagged_infinite():
    v = np.ones(10)
    assert noise_reduction(v, np.zeros(10)) == float("inf")


def test_noise_reduction_invariant_to_joint_scaling():
    rng = np.random.default_rng(3)
    p, e = rng.standard_normal(50), rng.standard_normal(50)
    assert noise_reduction(10 * p, 10 * e) == pytest.approx(noise_reduction(p, e), abs=1e-12)


def test_sdi_exact_match_clamps():
    t = np.random.default_rng(4).standard_normal(30)
    assert speech_distortion_index(t, t.copy()) == SDI_FLOOR_DB


def test_sdi_zero_output_is_zero_db():
    t = np.random.default_rng(5).standard_normal(30)
    assert speech_distortion_index(t, np.zeros(30)) == pytest.approx(0.0, abs=1e-12)


def test_sdi_ten_percent_overshoot_is_minus_twenty_db():
    t = np.random.default_rng(6).standard_normal(200)
    assert speech_distortion_index(t, 1.1 * t) == pytest.approx(-20.0, abs=1e-9)


def test_sdi_scale_sensitivity_closed_form():
    t = np.random.default_rng(7).standard_normal(100)
    for c in (0.5, 0.9, 1.2):
        expected = 10 * np.log10((1 - c) ** 2)
        assert speech_distortion_index(t, c * t) == pytest.approx(expected, abs=1e-9)


def test_sdi_rejects_silent_target():
    with pytest.raises(ValueError):
        speech_distortion_index(np.zeros(10), np.ones(10))


def test_control_effort_closed_forms():
    assert control_effort(np.zeros(5)) == 0.0
    assert control_effort([1.0, 1.0, 1.0]) == 3.0


def test_quality_proxy_identity_is_zero():
    t = np.random.default_rng(8).standard_normal(4096)
    assert quality_proxy(t, t.copy()) == 0.0


def test_quality_proxy_constant_gain_offset():
    t = np.random.default_rng(9).standard_normal(4096)
    assert quality_proxy(t, 2.0 * t) == pytest.approx(20 * np.log10(2), abs=1e-9)


def test_quality_proxy_monotone_in_noise_level():
    rng = np.random.default_rng(10)
    t = rng.standard_normal(4096)
    d = rng.standard_normal(4096)
    weak = quality_proxy(t, t + 0.01 * d)
    strong = quality_proxy(t, t + 0.5 * d)
    assert strong > weak > 0.0


def test_quality_proxy_invariant_to_joint_scaling():
    rng = np.random.default_rng(11)
    t = rng.standard_normal(4096)
    u = t + 0.1 * rng.standard_normal(4096)
    assert quality_proxy(3 * t, 3 * u) == pytest.approx(quality_proxy(t, u), abs=1e-9)


def test_quality_proxy_skips_silent_frames():
    rng = np.random.default_rng(12)
    t = np.zeros(4096)
    t[2048:] = rng.standard_normal(2048)
    u = t + 0.1 * rng.standard_normal(4096)
    val = quality_proxy(t, u, frame=256, hop=256)
    assert np.isfinite(val)
    with pytest.raises(ValueError, match="silent"):
        quality_proxy(np.zeros(1024), np.ones(1024))


def test_quality_proxy_validates_args():
    with pytest.raises(ValueError):
        quality_proxy(np.ones(10), np.ones(10), frame=512)
    with pytest.raises(ValueError):
        quality_proxy(np.ones(100), np.ones(99))


def test_evaluate_run_bundles_everything():
    rng = np.random.default_rng(13)
    n = 4096
    mics = MicSignals(
        x_s=rng.standard_normal((2, n)),
        x_v=rng.standard_normal((2, n)),
        p_s=rng.standard_normal(n),
        p_v=rng.standard_normal(n),
    )
    t = mics.p_s.copy()
    run = RunResult(
        y=0.5 * rng.standard_normal(n),
        e=mics.p_s + 0.5 * mics.p_v,
        e_s=mics.p_s.copy(),
        e_v=0.5 * mics.p_v,
        p_hat=mics.p,
        t=t,
    )
    mb = evaluate_run(run, mics)
    assert isinstance(mb, MetricBundle)
    assert mb.nr_db == pytest.approx(20 * np.log10(2), abs=1e-9)
    assert mb.sdi_db == SDI_FLOOR_DB and "sdi_clamped" in mb.flags
    assert mb.effort == pytest.approx(control_effort(run.y))
    assert mb.snr_out_db == pytest.approx(mb.snr_in_db + mb.nr_db, abs=1e-9)


def test_evaluate_run_requires_target():
    rng = np.random.default_rng(14)
    n = 1024
    mics = MicSignals(
        x_s=rng.standard_normal((1, n)), x_v=rng.standard_normal((1, n)),
        p_s=rng.standard_normal(n), p_v=rng.standard_normal(n),
    )
    run = RunResult(y=np.zeros(n), e=mics.p, e_s=mics.p_s, e_v=mics.p_v, p_hat=mics.p)
    with pytest.raises(ValueError, match="target"):
        evaluate_run(run, mics)
