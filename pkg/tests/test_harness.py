import json

import numpy as np
import pytest

from upn.audio import AudioBuffer
from upn.conditioning import FlagSchedule
from upn.dsp import DEFAULT_CONFIG
from upn.harness import (EvalReport, benchmark_signal, enhance, enhance_aligned, evaluate, flags_for,
                         format_table, measure_rtf, oversuppression_rate, seg_snr, si_sdr)
from upn.net import NetConfig, init_params

FS = 48000


@pytest.fixture(scope="module")
def params():
    return init_params(NetConfig(cond_dim=33, conv_channels=16, gru_layers=2, gru_hidden=32), seed=0)


# ---------------------------------------------------------------------------
# metrics

def test_si_sdr_examples():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal(10_000)
    assert si_sdr(ref, ref) == 80.0
    assert si_sdr(0.3 * ref, ref) == 80.0
    noise = rng.standard_normal(10_000)
    noise -= (noise @ ref) / (ref @ ref) * ref
    noise *= np.linalg.norm(ref) / np.linalg.norm(noise)
    assert si_sdr(ref + noise, ref) == pytest.approx(0.0, abs=0.01)
    assert si_sdr(ref + 0.1 * noise, ref) == pytest.approx(20.0, abs=0.01)
    assert si_sdr(np.zeros_like(ref), ref) == -80.0


def test_si_sdr_errors():
    with pytest.raises(ValueError):
        si_sdr(np.ones(4), np.zeros(4))
    with pytest.raises(ValueError):
        si_sdr(np.ones(4), np.ones(5))


def test_seg_snr():
    ref = np.random.default_rng(1).standard_normal(4800)
    assert seg_snr(ref, ref) == 35.0
    assert seg_snr(ref + 0.1 * ref, ref) == pytest.approx(20.0, abs=1e-9)
    assert np.isnan(seg_snr(np.zeros(4800), np.zeros(4800)))


def test_oversuppression_examples():
    rng = np.random.default_rng(2)
    ref = rng.standard_normal(30 * 480) * 0.1
    assert oversuppression_rate(ref, ref) == 0.0
    assert oversuppression_rate(np.zeros_like(ref), ref) == 1.0
    est = ref.copy()
    est[10 * 480:20 * 480] = 0.0
    n_frames = DEFAULT_CONFIG.n_frames(len(ref))
    assert abs(oversuppression_rate(est, ref) - 1 / 3) <= 1.0 / n_frames + 1e-12
    assert oversuppression_rate(ref, np.zeros_like(ref)) == 0.0


def test_eval_report_invariants():
    r = EvalReport("a", "personalized", 10.0, 4.0, 8.0, 0.1, 0.5)
    assert r.improvement_db == 6.0
    assert json.loads(r.to_json())["rtf"] == 0.5
    assert "personalized" in format_table([r])
    with pytest.raises(ValueError):
        EvalReport("a", "x", 0.0, 0.0, 0.0, 1.5)
    with pytest.raises(ValueError):
        EvalReport("a", "x", 0.0, 0.0, 0.0, 0.5, rtf=0.0)


# ---------------------------------------------------------------------------
# pipeline

def test_flags_for_modes():
    assert np.all(flags_for("pse", 5) == 1) and np.all(flags_for("nse", 5) == 0)
    s = FlagSchedule(np.array([1, 1, 0, 0, 1]))
    assert np.array_equal(flags_for("schedule", 5, s), s.q)
    with pytest.raises(ValueError):
        flags_for("schedule", 5)
    with pytest.raises(ValueError):
        flags_for("schedule", 4, s)
    with pytest.raises(ValueError):
        flags_for("loud", 5)


def test_enhance_modes(params):
    x = benchmark_signal(1.0, seed=1)
    z = np.zeros(32)
    z[3] = 1.0
    out_nse, o_nse = enhance(params, x)
    out_pse, o_pse = enhance(params, x, z, "pse")
    assert len(out_nse) >= len(x)
    assert not np.array_equal(o_nse.gains, o_pse.gains)
    # non-personalised output does not depend on the embedding at all
    out_nse2, _ = enhance(params, x, z, "nse")
    assert np.array_equal(out_nse.samples, out_nse2.samples)
    with pytest.raises(ValueError, match="embedding"):
        enhance(params, x, None, "pse")
    with pytest.raises(ValueError, match="dimension"):
        enhance(params, x, np.ones(5) / np.sqrt(5), "pse")


def test_enhance_schedule_matches_constant_modes(params):
    x = benchmark_signal(1.0, seed=2)
    z = np.eye(32)[0]
    n = DEFAULT_CONFIG.n_frames(len(x))
    _, on = enhance(params, x, z, "schedule", FlagSchedule.constant(n, 1))
    _, pse = enhance(params, x, z, "pse")
    assert np.array_equal(on.gains, pse.gains)


def test_aligned_output_length(params):
    x = benchmark_signal(0.7, seed=3)
    y = enhance_aligned(params, x)
    assert y.shape == (len(x),)


def test_evaluate_report(params):
    rng = np.random.default_rng(4)
    ref = benchmark_signal(1.0, seed=5).samples
    mix = ref + 0.01 * rng.standard_normal(len(ref))
    rep = evaluate(params, mix, ref, name="t")
    assert rep.mode == "non-personalized" and 0 <= rep.oversuppression_rate <= 1
    assert rep.si_sdr_mixture_db == pytest.approx(si_sdr(mix, ref))


# ---------------------------------------------------------------------------
# timing

def test_rtf_positive_and_roughly_linear(params):
    r1 = measure_rtf(params, 4.0, runs=5)
    r2 = measure_rtf(params, 8.0, runs=5)
    assert np.isfinite(r1) and np.isfinite(r2) and r1 > 0 and r2 > 0
    wall1, wall2 = 4.0 * r1, 8.0 * r2
    assert 0.8 * 2 <= wall2 / wall1 <= 1.2 * 2


def test_benchmark_signal_deterministic():
    a, b = benchmark_signal(0.5, 3), benchmark_signal(0.5, 3)
    assert isinstance(a, AudioBuffer) and np.array_equal(a.samples, b.samples)
