"""Signal-level perturbations shared by the data factory and enrollment
augmentation: synthetic room responses, filters, level changes and noise."""

from __future__ import annotations

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer, as_samples

AUG_PROBABILITY = 0.5


def synthetic_rir(rt60: float, rng, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying white-noise room response with a unit direct path.

    The envelope falls by 60 dB after ``rt60`` seconds. Tail energy grows with
    ``rt60`` and equals the direct-path energy at 0.6 s.
    """
    n = max(int(rt60 * sample_rate), 2)
    t = np.arange(n) / sample_rate
    rir = rng.standard_normal(n) * np.exp(-6.907755 * t / rt60)
    rir[0] = 0.0
    rir *= np.sqrt((rt60 / 0.6) / (np.sum(rir ** 2) + 1e-12))
    rir[0] = 1.0
    return rir


def reverberate(x, rir) -> np.ndarray:
    """Convolve and truncate the tail so the output length equals the input's."""
    x = as_samples(x)
    if len(x) == 0:
        return x.copy()
    return signal.fftconvolve(x, rir)[:len(x)]


def lowpass(x, cutoff_hz: float, sample_rate: int = SAMPLE_RATE, order: int = 4) -> np.ndarray:
    nyq = sample_rate / 2.0
    cutoff = min(cutoff_hz, 0.98 * nyq)
    sos = signal.butter(order, cutoff / nyq, btype="low", output="sos")
    return signal.sosfilt(sos, as_samples(x))


def peaking_eq(x, center_hz: float, gain_db: float, q: float = 1.0,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """RBJ-cookbook peaking biquad."""
    a_gain = 10.0 ** (gain_db / 40.0)
    w0 = 2 * np.pi * center_hz / sample_rate
    alpha = np.sin(w0) / (2 * q)
    b = np.array([1 + alpha * a_gain, -2 * np.cos(w0), 1 - alpha * a_gain])
    a = np.array([1 + alpha / a_gain, -2 * np.cos(w0), 1 - alpha / a_gain])
    return signal.lfilter(b / a[0], a / a[0], as_samples(x))


def draw_augmentations(rng) -> dict:
    """Independently pick each augmentation with probability 0.5 and draw its parameters."""
    params = {}
    if rng.random() < AUG_PROBABILITY:
        params["reverb"] = {"rt60": float(rng.uniform(0.1, 0.6)), "seed": int(rng.integers(2 ** 31))}
    if rng.random() < AUG_PROBABILITY:
        params["lowpass"] = {"cutoff_hz": float(rng.uniform(4000.0, 24000.0))}
    if rng.random() < AUG_PROBABILITY:
        params["eq"] = {"center_hz": float(np.exp(rng.uniform(np.log(100.0), np.log(12000.0)))),
                        "gain_db": float(rng.uniform(-6.0, 6.0))}
    if rng.random() < AUG_PROBABILITY:
        params["level"] = {"gain_db": float(rng.uniform(-10.0, 0.0))}
    return params


def apply_augmentation_params(x, params: dict, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Apply drawn augmentations in the fixed order reverb, low-pass, EQ, level."""
    y = np.array(as_samples(x), dtype=np.float64, copy=True)
    if "reverb" in params:
        p = params["reverb"]
        y = reverberate(y, synthetic_rir(p["rt60"], np.random.default_rng(p["seed"]), sample_rate))
    if "lowpass" in params:
        y = lowpass(y, params["lowpass"]["cutoff_hz"], sample_rate)
    if "eq" in params:
        y = peaking_eq(y, params["eq"]["center_hz"], params["eq"]["gain_db"], 1.0, sample_rate)
    if "level" in params:
        y = y * 10.0 ** (params["level"]["gain_db"] / 20.0)
    return y


def apply_augmentations(buf, seed) -> AudioBuffer:
    rate = buf.sample_rate if isinstance(buf, AudioBuffer) else SAMPLE_RATE
    params = draw_augmentations(np.random.default_rng(seed))
    return AudioBuffer(apply_augmentation_params(buf, params, rate), rate)


# ---------------------------------------------------------------------------
# noise

def colored_noise(n: int, exponent: float, rng) -> np.ndarray:
    """Unit-RMS noise with power spectrum ~ 1 / f**exponent."""
    if n == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    spec /= f ** (exponent / 2.0)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def white_pink_noise(n: int, rng) -> np.ndarray:
    mix = rng.uniform(0.0, 1.0)
    x = mix * rng.standard_normal(n) + (1.0 - mix) * colored_noise(n, 1.0, rng)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def power(x, mask=None) -> float:
    x = as_samples(x)
    if mask is not None:
        x = x[mask]
    return float(np.mean(x ** 2)) if x.size else 0.0
