import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upn.audio import AudioBuffer
from upn.dsp import DEFAULT_CONFIG, build_erb_filterbank, extract_features, pitch_track, stft
from upn.postproc import (EnhancerOutput, StreamingSynthesizer, comb_filter, compensate_delay,
                          interpolate_gains, reconstruct, synthesize)

FS = 48000
HOP = 480


@pytest.fixture(scope="module")
def fb():
    return build_erb_filterbank(DEFAULT_CONFIG)


def _snr(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


def test_enhancer_output_validation():
    EnhancerOutput.constant(3)
    with pytest.raises(ValueError):
        EnhancerOutput(np.full((2, 32), 1.5), np.zeros((2, 32)), np.zeros(2))
    with pytest.raises(ValueError):
        EnhancerOutput(np.zeros((2, 32)), np.zeros((3, 32)), np.zeros(2))
    with pytest.raises(ValueError):
        EnhancerOutput(np.full((2, 32), np.nan), np.zeros((2, 32)), np.zeros(2))
    out = EnhancerOutput.constant(4, gain=0.5)
    assert len(out[1:3]) == 2 and len(out[0]) == 1


def test_unit_gain_identity(fb):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 3 * FS + 123)
    feats, spec, periods = extract_features(AudioBuffer(x), return_spectra=True)
    y = synthesize(spec, EnhancerOutput.constant(len(feats)), periods, fb=fb)
    est, ref = compensate_delay(y, x)
    assert len(est) >= len(x) - 3 * HOP
    assert _snr(ref, est) > 60.0


def test_synthesis_delay_is_30ms(fb):
    x = np.zeros(4800)
    x[1000] = 1.0
    spec = stft(x)
    y = synthesize(spec, EnhancerOutput.constant(len(spec)), np.full(len(spec), 100), fb=fb)
    assert np.argmax(np.abs(y.samples)) == 1000 + 3 * HOP


def test_zero_gain_silences(fb):
    x = np.random.default_rng(1).standard_normal(4800)
    spec = stft(x)
    y = reconstruct(spec, EnhancerOutput.constant(len(spec), gain=0.0), np.full(len(spec), 200), fb=fb)
    assert np.all(y == 0)


def test_interpolated_gains_preserve_constants(fb):
    assert np.allclose(interpolate_gains(np.full(32, 0.3), fb), 0.3)


# ---------------------------------------------------------------------------
# comb filter

def test_comb_zero_strength_is_identity(fb):
    frame = np.random.default_rng(2).standard_normal(960)
    out = comb_filter(frame, np.ones(800), 200, np.zeros(32), fb)
    assert np.array_equal(out, frame)


def test_comb_periodic_input_unchanged(fb):
    period = 240
    n = np.arange(-period, 960 + period)
    x = np.sin(2 * np.pi * n / period) + 0.5 * np.sin(2 * np.pi * 3 * n / period + 1.0)
    frame, hist, ahead = x[period:period + 960], x[:period], x[period + 960:]
    out = comb_filter(frame, hist, period, np.ones(32), fb, ahead)
    assert np.allclose(out, frame, atol=1e-10)


def test_comb_reduces_noise_between_harmonics(fb):
    # Monte-Carlo over 100 seeds: energy in bins midway between harmonics drops
    period = 160  # 300 Hz harmonics; midpoints at 150 + 300 k Hz
    mid_bins = [int(round((150 + 300 * k) * 960 / FS)) for k in range(0, 40)]
    wins = 0
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal(960 + 2 * period)
        frame, hist, ahead = x[period:period + 960], x[:period], x[period + 960:]
        out = comb_filter(frame, hist, period, np.ones(32), fb, ahead)
        e_in = np.sum(np.abs(np.fft.rfft(frame))[mid_bins] ** 2)
        e_out = np.sum(np.abs(np.fft.rfft(out))[mid_bins] ** 2)
        wins += e_out < e_in
    assert wins == 100


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), period=st.integers(100, 800),
       strength=st.floats(0.0, 1.0))
def test_comb_energy_cap(seed, period, strength):
    fb = build_erb_filterbank(DEFAULT_CONFIG)
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal(960) * 1e-3
    hist = rng.standard_normal(800) * 10.0
    out = comb_filter(frame, hist, period, np.full(32, strength), fb, rng.standard_normal(800) * 10)
    assert np.sum(out ** 2) <= 2.0 * np.sum(frame ** 2) * (1 + 1e-12)


# ---------------------------------------------------------------------------
# streaming

def test_streaming_matches_offline(fb):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(FS // 2) * 0.1
    spec = stft(x)
    periods, _ = pitch_track(x)
    n = len(spec)
    out = EnhancerOutput(rng.uniform(0, 1, (n, 32)), rng.uniform(0, 1, (n, 32)), rng.uniform(0, 1, n))
    offline = synthesize(spec, out, periods, fb=fb).samples
    syn = StreamingSynthesizer(fb=fb)
    stream = np.concatenate([syn.push(spec[t], out[t], periods[t]) for t in range(n)])
    # the stream lags the offline output by one extra hop
    assert np.max(np.abs(stream[HOP:] - offline[:-HOP])) < 1e-12
