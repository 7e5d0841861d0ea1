"""Training targets and VAD-weighted losses.

Strength targets ask the comb filter to close only the harmonicity gap
between mixture and reference: ``(c_ref - c_mix) / (1 - c_mix)`` per band,
clamped to [0, 1]. This equals the reference coherence when the mixture band
is incoherent noise and vanishes when the mixture is already as harmonic as
the reference, so clean input is left untouched.

Per-frame losses are power-compressed squared errors on gains and on
``1 - strength``, plus binary cross-entropy on the VAD score. Frames are then
weighted by ``mu`` when the target stream is voiced and ``1 - mu`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import as_samples
from .dsp import (DEFAULT_CONFIG, ENERGY_EPS, AnalysisConfig, ErbFilterbank, band_energies,
                  build_erb_filterbank, delayed_spectra, pitch_coherence, pitch_track, stft)

VAD_RELATIVE_DB = 35.0
# frames quieter than this are never voiced, so digital silence gets y = 0
VAD_ABSOLUTE_FLOOR_DB = -80.0
PRED_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.9
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class FrameTargets:
    gains: np.ndarray      # (n_frames, n_bands)
    strengths: np.ndarray  # (n_frames, n_bands)
    vad: np.ndarray        # (n_frames,) in {0, 1}

    def __len__(self):
        return self.gains.shape[0]

    def __getitem__(self, idx) -> "FrameTargets":
        return FrameTargets(self.gains[idx], self.strengths[idx], self.vad[idx])

    @classmethod
    def stack(cls, items) -> "FrameTargets":
        items = list(items)
        return cls(np.stack([t.gains for t in items]), np.stack([t.strengths for t in items]),
                   np.stack([t.vad for t in items]))


def vad_labels(log_energy: np.ndarray) -> np.ndarray:
    """1 where a frame is within 35 dB of the loudest frame of the clip."""
    log_energy = np.asarray(log_energy)
    if log_energy.size == 0:
        return np.zeros(0, dtype=np.int8)
    thresh = log_energy.max() - VAD_RELATIVE_DB
    return ((log_energy > thresh) & (log_energy > VAD_ABSOLUTE_FLOOR_DB)).astype(np.int8)


def strength_targets(ref_coherence, mix_coherence) -> np.ndarray:
    """Comb strength that lifts the mixture's band coherence to the reference's."""
    c_ref = np.clip(ref_coherence, 0.0, 1.0)
    c_mix = np.clip(mix_coherence, 0.0, 1.0)
    gap = c_ref - c_mix
    out = np.zeros_like(gap)
    np.divide(gap, 1.0 - c_mix, out=out, where=(gap > 0) & (c_mix < 1.0))
    return np.clip(out, 0.0, 1.0)


def mixture_coherence(mixture, config: AnalysisConfig = DEFAULT_CONFIG, fb=None) -> np.ndarray:
    if fb is None:
        fb = build_erb_filterbank(config)
    mix = as_samples(mixture)
    periods, _ = pitch_track(mix, config)
    return pitch_coherence(stft(mix, config), delayed_spectra(mix, periods, config), fb)


def compute_targets(reference, mixture, config: AnalysisConfig = DEFAULT_CONFIG,
                    fb: ErbFilterbank | None = None, mix_coherence=None) -> FrameTargets:
    """Gains, comb strengths and VAD labels for one reference stream.

    ``mix_coherence`` (frames x bands) may be passed in when the mixture's
    pitch coherence is already known, e.g. from its feature rows.
    """
    ref = as_samples(reference)
    mix = as_samples(mixture)
    if ref.shape != mix.shape:
        raise ValueError("reference and mixture must have equal lengths")
    if fb is None:
        fb = build_erb_filterbank(config)
    spec_ref = stft(ref, config)
    e_ref = band_energies(spec_ref, fb)
    e_mix = band_energies(stft(mix, config), fb)

    gains = np.sqrt(e_ref / np.maximum(e_mix, ENERGY_EPS))
    gains[(e_ref < ENERGY_EPS) & (e_mix < ENERGY_EPS)] = 0.0
    gains = np.clip(gains, 0.0, 1.0)

    periods, _ = pitch_track(ref, config)
    c_ref = pitch_coherence(spec_ref, delayed_spectra(ref, periods, config), fb)
    if mix_coherence is None:
        mix_coherence = mixture_coherence(mix, config, fb)

    log_e = 10.0 * np.log10(e_ref.sum(axis=1) + ENERGY_EPS)
    return FrameTargets(gains, strength_targets(c_ref, mix_coherence), vad_labels(log_e))


def base_losses(pred, target: FrameTargets, cfg: LossConfig = LossConfig()):
    """Per-frame losses and their derivatives w.r.t. the predictions.

    Returns ``(l_g, l_r, l_v, grads)`` where ``l_g``/``l_r`` have the shape of
    the gains, ``l_v`` that of the VAD scores, and ``grads`` maps
    ``"gains" | "strengths" | "vad"`` to d(loss)/d(prediction).
    """
    gam = cfg.gamma
    g_hat = np.clip(pred.gains, PRED_CLAMP, 1.0)
    one_minus_r_hat = np.clip(1.0 - pred.strengths, PRED_CLAMP, 1.0)
    y_hat = np.clip(pred.vad, PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = target.vad

    dg = target.gains ** gam - g_hat ** gam
    dr = (1.0 - target.strengths) ** gam - one_minus_r_hat ** gam
    l_g = dg ** 2
    l_r = dr ** 2
    l_v = -(y * np.log(y_hat) + (1 - y) * np.log(1.0 - y_hat))

    grads = {
        "gains": -2.0 * dg * gam * g_hat ** (gam - 1.0),
        "strengths": 2.0 * dr * gam * one_minus_r_hat ** (gam - 1.0),
        "vad": (y_hat - y) / (y_hat * (1.0 - y_hat)),
    }
    return l_g, l_r, l_v, grads


def frame_weights(y, mu: float) -> np.ndarray:
    y = np.asarray(y)
    return np.where(y == 1, mu, 1.0 - mu)


def vad_weighted_loss(l_g, l_r, l_v, y, mu: float):
    """Combine per-frame losses with VAD-dependent frame weights.

    ``l_g``/``l_r`` are (..., n_bands) and ``l_v``/``y`` are (...,), where the
    leading axes enumerate frames (optionally batch x time). Band losses are
    averaged over bands and frames, the VAD loss over frames.
    Returns ``(total, {"L_G", "L_R", "L_V"}, weights)``.
    """
    w = frame_weights(y, mu)
    n_frames = w.size
    n_bands = np.shape(l_g)[-1]
    parts = {
        "L_G": float(np.sum(w[..., None] * l_g) / (n_bands * n_frames)),
        "L_R": float(np.sum(w[..., None] * l_r) / (n_bands * n_frames)),
        "L_V": float(np.sum(w * l_v) / n_frames),
    }
    return parts["L_G"] + parts["L_R"] + parts["L_V"], parts, w


def weighted_objective(pred, target: FrameTargets, cfg: LossConfig = LossConfig(), mask=None):
    """Total weighted loss and its gradient w.r.t. each prediction array.

    ``mask`` (same shape as the VAD array) excludes frames from both the sum
    and the frame count, e.g. the network's warm-up frames.
    """
    l_g, l_r, l_v, grads = base_losses(pred, target, cfg)
    y = target.vad
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        l_g, l_r, l_v, y = l_g[mask], l_r[mask], l_v[mask], y[mask]
    total, parts, w = vad_weighted_loss(l_g, l_r, l_v, y, cfg.mu)
    n_frames = w.size
    n_bands = l_g.shape[-1]
    scale_band = w[..., None] / (n_bands * n_frames)
    scale_vad = w / n_frames
    out = {}
    for key, scale in (("gains", scale_band), ("strengths", scale_band), ("vad", scale_vad)):
        g = grads[key]
        if mask is not None:
            full = np.zeros_like(g)
            full[mask] = g[mask] * scale
            out[key] = full
        else:
            out[key] = g * scale
    # clamped predictions have zero derivative
    out["gains"] = np.where(pred.gains < PRED_CLAMP, 0.0, out["gains"])
    out["strengths"] = np.where(1.0 - pred.strengths < PRED_CLAMP, 0.0, out["strengths"])
    vad = np.asarray(pred.vad)
    out["vad"] = np.where((vad < PRED_CLAMP) | (vad > 1.0 - PRED_CLAMP), 0.0, out["vad"])
    return total, parts, out
