"""Analysis front end: framing, ERB filterbank, pitch tracking and the
68-dimensional per-frame feature vector.

Frame ``t`` covers input samples ``[(t - 1) * hop, (t + 1) * hop)`` and is
weighted by a sine window, so analysis followed by sine-windowed overlap-add
reconstructs the input exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, as_samples

ENERGY_EPS = 1e-10
FEATURE_MAGIC = b"UPNFEAT1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    sample_rate: int = SAMPLE_RATE
    frame_hop: int = 480
    window_len: int = 960
    lookahead_frames: int = 3
    n_bands: int = 32
    fft_len: int = 960
    pitch_min_lag: int = 100
    pitch_max_lag: int = 800

    def __post_init__(self):
        if self.n_bands < 2:
            raise ConfigError("n_bands must be at least 2")
        if self.fft_len % 2:
            raise ConfigError("fft_len must be even")
        if self.window_len != 2 * self.frame_hop:
            raise ConfigError("window_len must be twice frame_hop")
        if self.fft_len < self.window_len:
            raise ConfigError("fft_len must be >= window_len")
        if not 0 < self.pitch_min_lag < self.pitch_max_lag:
            raise ConfigError("pitch lag range is empty")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def feature_dim(self) -> int:
        return 2 * self.n_bands + 4

    @property
    def lookahead_ms(self) -> float:
        return self.lookahead_frames * self.frame_hop * 1000.0 / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.frame_hop)


DEFAULT_CONFIG = AnalysisConfig()

# column layout of the feature matrix
BAND_MAG = slice(0, 32)
PITCH_COH = slice(32, 64)
PITCH_PERIOD = 64
PITCH_CORR = 65
LOG_ENERGY = 66
DELTA_LOG_ENERGY = 67


@dataclass(frozen=True)
class FrameFeatures:
    """Named view of a single 68-dimensional feature row."""

    band_mag: np.ndarray
    band_pitch_coh: np.ndarray
    pitch_period: float
    pitch_corr: float
    log_energy: float
    delta_log_energy: float

    @classmethod
    def from_vector(cls, v) -> "FrameFeatures":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (68,):
            raise ValueError(f"expected a 68-dim feature vector, got {v.shape}")
        return cls(v[BAND_MAG].copy(), v[PITCH_COH].copy(), float(v[PITCH_PERIOD]),
                   float(v[PITCH_CORR]), float(v[LOG_ENERGY]), float(v[DELTA_LOG_ENERGY]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.band_mag, self.band_pitch_coh,
            [self.pitch_period, self.pitch_corr, self.log_energy, self.delta_log_energy],
        ])


# ---------------------------------------------------------------------------
# filterbank

def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


@dataclass(frozen=True)
class ErbFilterbank:
    weights: np.ndarray       # (n_bands, n_bins)
    band_centers: np.ndarray  # Hz

    @property
    def n_bands(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


def build_erb_filterbank(config: AnalysisConfig = DEFAULT_CONFIG) -> ErbFilterbank:
    """Triangular bands, uniform on the ERB-rate axis, forming a partition of unity.

    Band centres run from 0 Hz to Nyquist; each triangle reaches zero at the
    neighbouring centres, so every bin is shared by at most two bands whose
    weights sum to one.
    """
    n_bands = config.n_bands
    nyquist = config.sample_rate / 2.0
    e_max = hz_to_erb_rate(nyquist)
    centers_erb = np.linspace(0.0, e_max, n_bands)
    freqs = np.arange(config.n_bins) * config.sample_rate / config.fft_len
    e = hz_to_erb_rate(freqs)

    weights = np.zeros((n_bands, config.n_bins))
    step = centers_erb[1] - centers_erb[0]
    pos = np.clip(e / step, 0.0, n_bands - 1.0)
    lo = np.minimum(np.floor(pos).astype(int), n_bands - 2)
    frac = pos - lo
    cols = np.arange(config.n_bins)
    weights[lo + 1, cols] = frac
    weights[lo, cols] = 1.0 - frac
    centers = erb_rate_to_hz(centers_erb)
    centers[-1] = nyquist
    return ErbFilterbank(weights, centers)


# ---------------------------------------------------------------------------
# framing and transforms

def sine_window(n: int) -> np.ndarray:
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def frame_signal(x, config: AnalysisConfig = DEFAULT_CONFIG, *, extra_history: int = 0) -> np.ndarray:
    """Return unwindowed frames of shape (n_frames, extra_history + window_len).

    Row ``t`` holds samples ``[(t-1)*hop - extra_history, (t+1)*hop)``; samples
    outside the signal are zero.
    """
    x = as_samples(x)
    hop, win = config.frame_hop, config.window_len
    n_frames = config.n_frames(len(x))
    width = extra_history + win
    pad_front = hop + extra_history
    padded = np.zeros(pad_front + n_frames * hop + hop)
    padded[pad_front:pad_front + len(x)] = x
    idx = np.arange(n_frames)[:, None] * hop + np.arange(width)[None, :]
    return padded[idx]


def stft(x, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Sine-windowed spectra for every frame, shape (n_frames, n_bins)."""
    frames = frame_signal(x, config) * sine_window(config.window_len)
    return np.fft.rfft(frames, n=config.fft_len, axis=-1)


def analyze_frame(audio, frame_index: int, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    if frame_index < 0:
        raise IndexError("frame_index must be non-negative")
    x = as_samples(audio)
    hop, win = config.frame_hop, config.window_len
    start = (frame_index - 1) * hop
    seg = np.zeros(win)
    lo, hi = max(start, 0), min(start + win, len(x))
    if hi > lo:
        seg[lo - start:hi - start] = x[lo:hi]
    return np.fft.rfft(seg * sine_window(win), n=config.fft_len)


def band_energies(spec, fb: ErbFilterbank) -> np.ndarray:
    """Per-band energy ``sum_k w[b, k] |X[k]|^2``; works on stacked spectra."""
    spec = np.asarray(spec)
    return (spec.real ** 2 + spec.imag ** 2) @ fb.weights.T


def band_magnitudes(spec, fb: ErbFilterbank) -> np.ndarray:
    return np.sqrt(band_energies(spec, fb))


def pitch_coherence(spec_now, spec_delayed, fb: ErbFilterbank) -> np.ndarray:
    """Band-wise normalised cross-spectrum between a frame and its pitch-delayed copy.

    Negative correlation is clamped to 0 and 0/0 is defined as 0.
    """
    spec_now = np.asarray(spec_now)
    spec_delayed = np.asarray(spec_delayed)
    cross = (spec_now * np.conj(spec_delayed)).real @ fb.weights.T
    e_now = band_energies(spec_now, fb)
    e_del = band_energies(spec_delayed, fb)
    den = np.sqrt(e_now * e_del)
    out = np.zeros_like(den)
    ok = den > 1e-30
    out[ok] = cross[ok] / den[ok]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# pitch

PITCH_TIE_TOLERANCE = 0.02


def _pick_period(corr: np.ndarray, min_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Select the shortest lag that is a local peak within tolerance of the maximum.

    A plain argmax is ambiguous on strongly periodic input because every
    multiple of the period correlates (almost) perfectly.
    """
    n_frames, n_lags = corr.shape
    best = corr.max(axis=1)
    left = np.concatenate([np.full((n_frames, 1), -np.inf), corr[:, :-1]], axis=1)
    right = np.concatenate([corr[:, 1:], np.full((n_frames, 1), -np.inf)], axis=1)
    peak = (corr >= left) & (corr >= right)
    ok = peak & (corr >= best[:, None] - PITCH_TIE_TOLERANCE)
    idx = np.argmax(ok, axis=1)
    return idx + min_lag, corr[np.arange(n_frames), idx]


def _lag_correlation(hist: np.ndarray, config: AnalysisConfig) -> np.ndarray:
    """Normalised correlation of windowed frames with their lag-delayed history.

    ``hist`` rows hold ``pitch_max_lag`` history samples followed by the frame.
    Returns shape (n_frames, n_lags) for lags ``pitch_min_lag..pitch_max_lag``.
    """
    max_lag, min_lag = config.pitch_max_lag, config.pitch_min_lag
    win = config.window_len
    cur = hist[:, max_lag:]
    w2 = sine_window(win) ** 2
    n_fft = 1 << int(np.ceil(np.log2(hist.shape[1] + win)))

    u = np.fft.rfft(cur * w2, n=n_fft, axis=-1)
    a = np.fft.rfft(hist, n=n_fft, axis=-1)
    a2 = np.fft.rfft(hist ** 2, n=n_fft, axis=-1)
    w2f = np.fft.rfft(w2, n=n_fft)
    # circular correlation c[m] = sum_n u[n] a[n + m]; no wrap for m <= max_lag
    num = np.fft.irfft(np.conj(u) * a, n=n_fft, axis=-1)
    den_y = np.fft.irfft(np.conj(w2f)[None, :] * a2, n=n_fft, axis=-1)
    offsets = max_lag - np.arange(min_lag, max_lag + 1)  # m = max_lag - lag
    num = num[:, offsets]
    den_y = np.maximum(den_y[:, offsets], 0.0)
    den_x = np.sum(w2 * cur ** 2, axis=1, keepdims=True)
    den = np.sqrt(den_x * den_y)
    # relative floor: FFT round-off turns exact zeros into ~1e-17
    floor = 1e-12 * np.maximum(den_x, 1e-30)
    ok = den > floor
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def pitch_track(audio, config: AnalysisConfig = DEFAULT_CONFIG) -> tuple[np.ndarray, np.ndarray]:
    """Return per-frame (period in samples, correlation in [0, 1])."""
    x = as_samples(audio)
    if len(x) == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    hist = frame_signal(x, config, extra_history=config.pitch_max_lag)
    period, c = _pick_period(_lag_correlation(hist, config), config.pitch_min_lag)
    return period.astype(int), np.clip(c, 0.0, 1.0)


def estimate_pitch(audio, frame_index: int, config: AnalysisConfig = DEFAULT_CONFIG) -> tuple[int, float]:
    x = as_samples(audio)
    if not 0 <= frame_index < config.n_frames(len(x)):
        raise IndexError(f"frame {frame_index} out of range")
    width = config.pitch_max_lag + config.window_len
    start = (frame_index + 1) * config.frame_hop - width
    hist = np.zeros(width)
    lo, hi = max(start, 0), min(start + width, len(x))
    hist[lo - start:hi - start] = x[lo:hi]
    period, corr = _pick_period(_lag_correlation(hist[None, :], config), config.pitch_min_lag)
    return int(period[0]), float(np.clip(corr[0], 0.0, 1.0))


def delayed_spectra(x, periods, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Windowed spectra of each frame delayed by its own pitch period."""
    max_lag = config.pitch_max_lag
    hist = frame_signal(x, config, extra_history=max_lag)
    starts = max_lag - np.asarray(periods, dtype=int)
    idx = starts[:, None] + np.arange(config.window_len)[None, :]
    seg = np.take_along_axis(hist, idx, axis=1)
    return np.fft.rfft(seg * sine_window(config.window_len), n=config.fft_len, axis=-1)


# ---------------------------------------------------------------------------
# features

def extract_features(audio, config: AnalysisConfig = DEFAULT_CONFIG,
                     fb: ErbFilterbank | None = None, *, return_spectra: bool = False):
    """Compute the (n_frames, 2*n_bands + 4) feature matrix.

    Columns: band magnitudes, band pitch coherence, normalised pitch period,
    pitch correlation, log energy (dB), delta log energy.
    With ``return_spectra`` the mixture spectra and pitch periods are returned
    as well, since synthesis needs both.
    """
    x = as_samples(audio)
    if fb is None:
        fb = build_erb_filterbank(config)
    n_frames = config.n_frames(len(x))
    nb = config.n_bands
    feats = np.zeros((n_frames, config.feature_dim))
    if n_frames == 0:
        empty_spec = np.zeros((0, config.n_bins), dtype=complex)
        return (feats, empty_spec, np.zeros(0, dtype=int)) if return_spectra else feats

    spec = stft(x, config)
    energy = band_energies(spec, fb)
    periods, corr = pitch_track(x, config)
    spec_del = delayed_spectra(x, periods, config)

    log_e = 10.0 * np.log10(energy.sum(axis=1) + ENERGY_EPS)
    feats[:, :nb] = np.sqrt(energy)
    feats[:, nb:2 * nb] = pitch_coherence(spec, spec_del, fb)
    feats[:, 2 * nb] = periods / config.pitch_max_lag
    feats[:, 2 * nb + 1] = corr
    feats[:, 2 * nb + 2] = log_e
    feats[1:, 2 * nb + 3] = np.diff(log_e)
    if return_spectra:
        return feats, spec, periods
    return feats


def frame_log_energy(x, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Per-frame log energy in dB, identical to the log-energy feature column."""
    spec = stft(x, config)
    e = np.sum(spec.real ** 2 + spec.imag ** 2, axis=1)
    return 10.0 * np.log10(e + ENERGY_EPS)


# ---------------------------------------------------------------------------
# feature dump files

def write_feature_dump(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2 or feats.shape[1] != 68:
        raise ValueError("feature dump expects an (n_frames, 68) matrix")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", feats.shape[0]))
        fh.write(feats.tobytes())


def read_feature_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature dump (bad magic)")
    (count,) = struct.unpack("<I", data[8:12])
    body = data[12:]
    if len(body) != count * 68 * 4:
        raise ValueError(f"{path}: expected {count} frames, file size disagrees")
    return np.frombuffer(body, dtype="<f4").reshape(count, 68).astype(np.float64)
