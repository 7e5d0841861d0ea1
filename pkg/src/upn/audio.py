"""Audio buffers, WAV ingestion/export and sample-rate conversion."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 48000
RESAMPLE_TAPS = 32
RESAMPLE_KAISER_BETA = 8.0


class AudioFormatError(ValueError):
    """Raised for WAV files this package cannot ingest."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono float64 audio at a known sample rate.

    Samples are nominally in [-1, 1]; mixtures built by the data factory can
    exceed that range transiently, so only finiteness is enforced.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioBuffer expects 1-D samples, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioBuffer samples must be finite")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def scaled(self, gain: float) -> "AudioBuffer":
        return AudioBuffer(self.samples * gain, self.sample_rate)


def as_samples(audio) -> np.ndarray:
    """Return the float64 sample array of an AudioBuffer or array-like."""
    if isinstance(audio, AudioBuffer):
        return audio.samples
    return np.asarray(audio, dtype=np.float64)


def resample(x: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Windowed-sinc polyphase resampling (32 taps per phase, Kaiser beta=8)."""
    x = np.asarray(x, dtype=np.float64)
    if src_rate == dst_rate:
        return x.copy()
    ratio = Fraction(dst_rate, src_rate)
    up, down = ratio.numerator, ratio.denominator
    n_taps = RESAMPLE_TAPS * max(up, down)
    # resample_poly applies the interpolation gain ``up`` to the filter itself
    h = signal.firwin(n_taps, 1.0 / max(up, down), window=("kaiser", RESAMPLE_KAISER_BETA))
    return signal.resample_poly(x, up, down, window=h)


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy expands 24-bit PCM into the top bytes of int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioFormatError(f"unsupported WAV sample type {data.dtype}")


def read_wav(path) -> AudioBuffer:
    """Read a mono WAV (16/24-bit PCM or 32-bit float) and resample to 48 kHz."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        if data.shape[1] == 1:
            data = data[:, 0]
        else:
            raise AudioFormatError(
                f"{path}: {data.shape[1]} channels found; only mono input is supported"
            )
    x = _pcm_to_float(data)
    if rate != SAMPLE_RATE:
        log.info("resampling %s from %d Hz to %d Hz", path, rate, SAMPLE_RATE)
        x = resample(x, rate, SAMPLE_RATE)
    return AudioBuffer(x, SAMPLE_RATE)


def write_wav(path, audio, sample_rate: int = SAMPLE_RATE, *, float32: bool = False,
              seed: int | None = 0) -> None:
    """Write mono audio as 32-bit float or TPDF-dithered 16-bit PCM."""
    x = as_samples(audio)
    if isinstance(audio, AudioBuffer):
        sample_rate = audio.sample_rate
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if float32:
        wavfile.write(str(path), sample_rate, x.astype(np.float32))
        return
    rng = np.random.default_rng(seed)
    dither = rng.random(x.shape) - rng.random(x.shape)
    pcm = np.clip(np.round(x * 32768.0 + dither), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
