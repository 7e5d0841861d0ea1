"""Desk-scale synthetic corpus: source-filter "voices" and background noises.

Each toy speaker has its own pitch range, vocal-tract length (formant scale),
glottal tilt and fricative colour, which is enough for a small embedder to
tell them apart and for an enhancer to learn speaker-selective masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer
from .augment import colored_noise

# F1, F2, F3 of a handful of vowels for a reference tract
VOWELS = np.array([
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [660.0, 1720.0, 2410.0],
])
BANDWIDTHS = np.array([80.0, 110.0, 160.0, 220.0])
SPEECH_RMS = 0.05


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0_hz: float
    f0_spread_st: float
    tract_scale: float
    tilt: float
    breathiness: float
    fricative_hz: float
    syllable_rate: float


def make_speakers(n: int = 8, seed: int = 0) -> list[ToySpeaker]:
    """Speakers with well-separated parameters (stratified, then shuffled)."""
    rng = np.random.default_rng(seed)
    f0 = np.geomspace(90.0, 270.0, n)
    scale = np.linspace(0.78, 1.28, n)[rng.permutation(n)]
    tilt = np.linspace(0.55, 0.92, n)[rng.permutation(n)]
    fric = np.geomspace(2500.0, 9000.0, n)[rng.permutation(n)]
    out = []
    for i in range(n):
        out.append(ToySpeaker(
            speaker_id=f"spk{i:02d}",
            f0_hz=float(f0[i] * rng.uniform(0.97, 1.03)),
            f0_spread_st=float(rng.uniform(1.5, 3.5)),
            tract_scale=float(scale[i]),
            tilt=float(tilt[i]),
            breathiness=float(rng.uniform(0.01, 0.06)),
            fricative_hz=float(fric[i]),
            syllable_rate=float(rng.uniform(3.0, 5.0)),
        ))
    return out


def _resonator_sos(freqs, bws, fs):
    sos = []
    for f, bw in zip(freqs, bws):
        f = min(f, 0.45 * fs)
        r = np.exp(-np.pi * bw / fs)
        theta = 2 * np.pi * f / fs
        a = [1.0, -2 * r * np.cos(theta), r * r]
        gain = (1 - r) * np.sqrt(1 - 2 * r * np.cos(2 * theta) + r * r)
        sos.append([gain, 0.0, 0.0] + a)
    return np.array(sos)


def _envelope(n, fs, attack=0.02, release=0.04):
    env = np.ones(n)
    na, nr = min(int(attack * fs), n // 2), min(int(release * fs), n // 2)
    if na:
        env[:na] = 0.5 - 0.5 * np.cos(np.pi * np.arange(na) / na)
    if nr:
        env[n - nr:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(nr) / nr)
    return env


def _voiced(spk: ToySpeaker, n: int, rng, fs: int) -> np.ndarray:
    st0, st1 = rng.uniform(-spk.f0_spread_st, spk.f0_spread_st, size=2)
    f0 = spk.f0_hz * 2.0 ** (np.linspace(st0, st1, n) / 12.0)
    phase = np.cumsum(f0) / fs + rng.random()
    pulses = np.zeros(n)
    pulses[np.flatnonzero(np.diff(np.floor(phase)) > 0) + 1] = 1.0
    # glottal source: two-pole low-pass whose corner sets the spectral tilt
    src = signal.lfilter([1.0 - spk.tilt], [1.0, -spk.tilt], pulses)
    src = signal.lfilter([1.0 - spk.tilt], [1.0, -spk.tilt], src)
    src += spk.breathiness * rng.standard_normal(n) * np.sqrt(np.mean(src ** 2) + 1e-12) * 10
    vowel = VOWELS[rng.integers(len(VOWELS))] * rng.uniform(0.95, 1.05, size=3)
    formants = np.concatenate([vowel, [3500.0]]) * spk.tract_scale
    y = signal.sosfilt(_resonator_sos(formants, BANDWIDTHS * spk.tract_scale, fs), src)
    y = np.diff(y, prepend=0.0)  # lip radiation
    return y * _envelope(n, fs)


def _fricative(spk: ToySpeaker, n: int, rng, fs: int) -> np.ndarray:
    center = spk.fricative_hz * rng.uniform(0.9, 1.1)
    lo, hi = center / 1.4, min(center * 1.4, 0.95 * fs / 2)
    sos = signal.butter(2, [lo / (fs / 2), hi / (fs / 2)], btype="band", output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n)) * _envelope(n, fs, 0.01, 0.02)


def speak(spk: ToySpeaker, duration_s: float, rng, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Generate ``duration_s`` seconds of babble for ``spk``; RMS over speech is fixed."""
    n_total = int(round(duration_s * fs))
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.0, 0.3) * fs)
    while pos < n_total:
        for _ in range(int(rng.integers(1, 4))):  # syllables per word
            if rng.random() < 0.35:
                n = int(rng.uniform(0.04, 0.10) * fs)
                seg = _fricative(spk, n, rng, fs)
                seg *= 0.4 / (np.sqrt(np.mean(seg ** 2)) + 1e-12)
                stop = min(pos + n, n_total)
                if pos < n_total:
                    out[pos:stop] += seg[:stop - pos] * SPEECH_RMS
                pos += n
            n = int(rng.uniform(0.6, 1.4) / spk.syllable_rate * fs)
            seg = _voiced(spk, n, rng, fs)
            seg *= 10.0 ** (rng.uniform(-3.0, 3.0) / 20.0) / (np.sqrt(np.mean(seg ** 2)) + 1e-12)
            stop = min(pos + n, n_total)
            if pos < n_total:
                out[pos:stop] += seg[:stop - pos] * SPEECH_RMS
            pos += n
        pos += int(rng.uniform(0.08, 0.45) * fs)
    return out


def make_clip(spk: ToySpeaker, duration_s: float, seed, fs: int = SAMPLE_RATE) -> AudioBuffer:
    return AudioBuffer(speak(spk, duration_s, np.random.default_rng(seed), fs), fs)


NOISE_KINDS = ("white", "pink", "brown", "hum", "modulated", "band")


def make_noise(kind: str, duration_s: float, seed, fs: int = SAMPLE_RATE) -> AudioBuffer:
    """Unit-RMS background noise of a given kind."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        x = colored_noise(n, 1.0, rng)
    elif kind == "brown":
        x = colored_noise(n, 2.0, rng)
    elif kind == "hum":
        t = np.arange(n) / fs
        base = rng.choice([50.0, 60.0])
        x = sum(rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi))
                for k in range(1, 8))
        x = x / np.sqrt(np.mean(x ** 2)) + 0.3 * colored_noise(n, 1.0, rng)
    elif kind == "modulated":
        rate = rng.uniform(0.5, 4.0)
        t = np.arange(n) / fs
        x = colored_noise(n, rng.uniform(0.0, 1.5), rng) * (1.0 + 0.8 * np.sin(2 * np.pi * rate * t))
    elif kind == "band":
        lo = rng.uniform(200.0, 4000.0)
        hi = min(lo * rng.uniform(1.5, 4.0), 0.95 * fs / 2)
        sos = signal.butter(3, [lo / (fs / 2), hi / (fs / 2)], btype="band", output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n)) + 0.1 * rng.standard_normal(n)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = x / (np.sqrt(np.mean(x ** 2)) + 1e-12)
    return AudioBuffer(x, fs)


@dataclass
class ToyCorpus:
    """Clip pools for the desk experiments."""

    speakers: list
    clips: dict          # speaker_id -> list[AudioBuffer]
    enrollment: dict     # speaker_id -> AudioBuffer
    noises: list         # list[AudioBuffer]

    @property
    def speaker_ids(self) -> list[str]:
        return [s.speaker_id for s in self.speakers]


def make_corpus(n_speakers: int = 8, clips_per_speaker: int = 6, clip_s: float = 8.0,
                enroll_s: float = 6.0, n_noises: int = 12, noise_s: float = 12.0,
                seed: int = 0) -> ToyCorpus:
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, seed)
    clips, enroll = {}, {}
    for spk in speakers:
        clips[spk.speaker_id] = [make_clip(spk, clip_s, rng.integers(2 ** 32))
                                 for _ in range(clips_per_speaker)]
        enroll[spk.speaker_id] = make_clip(spk, enroll_s, rng.integers(2 ** 32))
    noises = [make_noise(NOISE_KINDS[i % len(NOISE_KINDS)], noise_s, rng.integers(2 ** 32))
              for i in range(n_noises)]
    return ToyCorpus(speakers, clips, enroll, noises)
