"""Resynthesis: band gains, pitch comb filter and overlap-add.

The offline :func:`synthesize` returns ``n_frames * hop`` samples lagging the
input by ``lookahead_frames * hop`` samples (30 ms at the defaults).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer, as_samples
from .dsp import DEFAULT_CONFIG, AnalysisConfig, ErbFilterbank, build_erb_filterbank, sine_window

MAX_COMB_BLEND = 0.5
MAX_COMB_ENERGY_RATIO = 2.0


@dataclass(frozen=True)
class EnhancerOutput:
    """Per-frame network outputs; arrays are (n_frames, n_bands) and (n_frames,)."""

    gains: np.ndarray
    strengths: np.ndarray
    vad: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gains, dtype=np.float64))
        s = np.atleast_2d(np.asarray(self.strengths, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.vad, dtype=np.float64))
        if g.shape != s.shape or g.shape[0] != v.shape[0]:
            raise ValueError("gains, strengths and vad must cover the same frames")
        for name, a in (("gains", g), ("strengths", s), ("vad", v)):
            if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
                raise ValueError(f"{name} must be finite and within [0, 1]")
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "strengths", s)
        object.__setattr__(self, "vad", v)

    def __len__(self):
        return self.gains.shape[0]

    @classmethod
    def constant(cls, n_frames: int, gain: float = 1.0, strength: float = 0.0,
                 vad: float = 1.0, n_bands: int = 32) -> "EnhancerOutput":
        return cls(np.full((n_frames, n_bands), gain), np.full((n_frames, n_bands), strength),
                   np.full(n_frames, vad))

    def __getitem__(self, idx) -> "EnhancerOutput":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return EnhancerOutput(self.gains[idx], self.strengths[idx], self.vad[idx])


def interpolate_gains(gains, fb: ErbFilterbank) -> np.ndarray:
    """Spread band gains onto FFT bins; rows of ``gains`` may be stacked frames."""
    return np.asarray(gains, dtype=np.float64) @ fb.weights


def _comb_alpha(strengths, fb: ErbFilterbank) -> np.ndarray:
    return interpolate_gains(MAX_COMB_BLEND * np.asarray(strengths, dtype=np.float64), fb)


def _blend(frames, back, fwd, alpha, fft_len):
    """Per-bin blend of frames with the mean of their +/-period copies."""
    win = frames.shape[-1]
    x = np.fft.rfft(frames, n=fft_len, axis=-1)
    p = np.fft.rfft(0.5 * (back + fwd), n=fft_len, axis=-1)
    y = np.fft.irfft((1.0 - alpha) * x + alpha * p, n=fft_len, axis=-1)[..., :win]
    e_in = np.sum(frames ** 2, axis=-1, keepdims=True)
    e_out = np.sum(y ** 2, axis=-1, keepdims=True)
    limit = MAX_COMB_ENERGY_RATIO * e_in
    scale = np.where(e_out > limit, np.sqrt(limit / np.maximum(e_out, 1e-300)), 1.0)
    return y * scale


def comb_filter(frame, history, period: int, strengths, fb: ErbFilterbank,
                lookahead=None, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Two-tap pitch comb on one time-domain frame.

    Each bin is blended as ``(1 - a) * x + a * (x(n - T) + x(n + T)) / 2`` with
    ``a`` interpolated from ``0.5 * strengths``. ``history`` holds the samples
    preceding the frame and ``lookahead`` those following it; missing samples
    are zero-padded. Output energy is capped at twice the input energy.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if not np.any(np.asarray(strengths)):
        return frame.copy()
    n = frame.shape[0]
    period = int(period)
    hist = np.zeros(period)
    h = np.asarray(history if history is not None else [], dtype=np.float64)[-period:]
    if h.size:
        hist[period - h.size:] = h
    ahead = np.zeros(period)
    a = np.asarray(lookahead if lookahead is not None else [], dtype=np.float64)[:period]
    ahead[:a.size] = a
    ext = np.concatenate([hist, frame, ahead])
    back = ext[:n]
    fwd = ext[2 * period:2 * period + n]
    return _blend(frame[None], back[None], fwd[None], _comb_alpha(strengths, fb)[None],
                  config.fft_len)[0]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """OLA of (n_frames, 2*hop) frames; frame t starts at (t - 1) * hop.

    Returns the signal from sample ``-hop`` to ``n_frames * hop``.
    """
    n = frames.shape[0]
    out = np.zeros((n + 1) * hop)
    first = frames[:, :hop].reshape(-1)
    second = frames[:, hop:].reshape(-1)
    out[:n * hop] += first
    out[hop:] += second
    return out


def reconstruct(mixture_spectra, outputs: EnhancerOutput, pitch_periods,
                config: AnalysisConfig = DEFAULT_CONFIG, fb: ErbFilterbank | None = None) -> np.ndarray:
    """Undelayed enhanced signal aligned with the input (length n_frames * hop)."""
    spec = np.asarray(mixture_spectra)
    n_frames = spec.shape[0]
    if len(outputs) != n_frames or len(pitch_periods) != n_frames:
        raise ValueError("spectra, outputs and pitch track must have equal lengths")
    if fb is None:
        fb = build_erb_filterbank(config)
    hop, win = config.frame_hop, config.window_len
    w = sine_window(win)

    g = interpolate_gains(outputs.gains, fb)
    frames = np.fft.irfft(spec * g, n=config.fft_len, axis=-1)[:, :win] * w
    e = _overlap_add(frames, hop)  # index 0 is sample -hop

    if np.any(outputs.strengths):
        max_lag = int(np.max(pitch_periods))
        pad = np.concatenate([np.zeros(max_lag), e, np.zeros(max_lag + hop)])
        starts = max_lag + np.arange(n_frames) * hop  # sample (t-1)*hop in pad coords
        periods = np.asarray(pitch_periods, dtype=int)[:, None]
        idx = starts[:, None] + np.arange(win)[None, :]
        seg = pad[idx]
        back = pad[idx - periods]
        fwd = pad[idx + periods]
        alpha = _comb_alpha(outputs.strengths, fb)
        active = np.any(outputs.strengths > 0, axis=1)
        filtered = seg.copy()
        if np.any(active):
            filtered[active] = _blend(seg[active], back[active], fwd[active], alpha[active],
                                      config.fft_len)
        e = _overlap_add(filtered * w * w, hop)
    return e[hop:hop + n_frames * hop]


def synthesize(mixture_spectra, outputs: EnhancerOutput, pitch_periods,
               config: AnalysisConfig = DEFAULT_CONFIG, fb: ErbFilterbank | None = None) -> AudioBuffer:
    """Apply gains and comb filtering, overlap-add, and delay by the look-ahead."""
    y = reconstruct(mixture_spectra, outputs, pitch_periods, config, fb)
    delay = config.lookahead_frames * config.frame_hop
    out = np.zeros_like(y)
    if len(y) > delay:
        out[delay:] = y[:len(y) - delay]
    return AudioBuffer(out, config.sample_rate)


def compensate_delay(enhanced, reference, config: AnalysisConfig = DEFAULT_CONFIG):
    """Align an enhanced signal with its reference by removing the fixed delay.

    Returns ``(estimate, reference)`` trimmed to a common length.
    """
    est = as_samples(enhanced)
    ref = as_samples(reference)
    delay = config.lookahead_frames * config.frame_hop
    est = est[delay:]
    n = min(len(est), len(ref))
    return est[:n], ref[:n]


class StreamingSynthesizer:
    """Frame-by-frame resynthesis for one stream.

    Holds the overlap-add tail and comb history of a single stream; use one
    instance per stream. Each :meth:`push` returns ``hop`` samples. The forward
    comb tap needs reconstructed samples beyond the current frame, so the
    stream runs one hop behind :func:`synthesize`.
    """

    def __init__(self, config: AnalysisConfig = DEFAULT_CONFIG, fb: ErbFilterbank | None = None):
        self.config = config
        self.fb = fb if fb is not None else build_erb_filterbank(config)
        hop, win = config.frame_hop, config.window_len
        self._w = sine_window(win)
        self._lag = config.pitch_max_lag
        self._look = -(-self._lag // hop)  # frames of reconstruction needed ahead
        self._stage1_tail = np.zeros(hop)
        # reconstructed (gain-applied) signal: history + finalised region
        self._recon = np.zeros(self._lag + hop)
        self._pending: list[tuple[np.ndarray, int]] = []
        self._stage2_tail = np.zeros(hop)
        self._n_combed = 0
        delay_blocks = config.lookahead_frames + 1 - (2 + self._look)
        self._out_fifo = [np.zeros(hop) for _ in range(max(delay_blocks, 0))]

    def push(self, spectrum, output: EnhancerOutput, period: int) -> np.ndarray:
        cfg = self.config
        hop, win = cfg.frame_hop, cfg.window_len
        g = interpolate_gains(output.gains[0], self.fb)
        frame = np.fft.irfft(np.asarray(spectrum) * g, n=cfg.fft_len)[:win] * self._w
        block = self._stage1_tail + frame[:hop]
        self._stage1_tail = frame[hop:].copy()
        self._recon = np.concatenate([self._recon, block])
        self._pending.append((output.strengths[0].copy(), int(period)))

        out = np.zeros(hop)
        # frame t needs reconstruction through (t+1)*hop + lag
        if len(self._pending) > self._look + 1:
            strengths, per = self._pending.pop(0)
            # recon layout: [... history | frame (2*hop) | look-ahead (look*hop)]
            end = len(self._recon) - self._look * hop
            seg = self._recon[end - win:end]
            filtered = comb_filter(seg, self._recon[:end - win], per, strengths, self.fb,
                                   self._recon[end:], cfg)
            filtered = filtered * self._w * self._w
            out = self._stage2_tail + filtered[:hop]
            self._stage2_tail = filtered[hop:].copy()
            if self._n_combed == 0:
                out = np.zeros(hop)  # precedes the first input sample
            self._n_combed += 1
            keep = self._lag + win + self._look * hop
            self._recon = self._recon[-keep:]
        self._out_fifo.append(out)
        return self._out_fifo.pop(0)
