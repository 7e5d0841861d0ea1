"""Desk-scale speaker embedder, AAM-softmax training and verification metrics.

The embedder pools level-normalised log-ERB band energies of the active
frames (mean and standard deviation per band), then applies two dense layers
(tanh hidden layer, linear output) and L2 normalisation.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, as_samples
from .augment import reverberate, synthetic_rir, white_pink_noise
from .dsp import DEFAULT_CONFIG, ENERGY_EPS, AnalysisConfig, band_energies, build_erb_filterbank, stft
from .objectives import VAD_RELATIVE_DB

log = logging.getLogger(__name__)

MIN_ENROLL_S = 1.0
STAT_FLOOR = 1e-9
EMB_MAGIC = b"UPNEMB1"


@dataclass
class EmbedderModel:
    W1: np.ndarray            # (hidden, 2 * n_bands)
    b1: np.ndarray
    W2: np.ndarray            # (dim, hidden)
    b2: np.ndarray
    stat_mean: np.ndarray     # input standardisation
    stat_std: np.ndarray
    class_weights: np.ndarray  # (n_classes, dim), unit rows

    @property
    def dim(self) -> int:
        return self.W2.shape[0]


def pooled_stats(audio, config: AnalysisConfig = DEFAULT_CONFIG, fb=None) -> np.ndarray:
    """Mean and std of level-normalised log band energies over active frames."""
    if fb is None:
        fb = build_erb_filterbank(config)
    e = band_energies(stft(as_samples(audio), config), fb)
    frame_e = e.sum(axis=1)
    frame_db = 10.0 * np.log10(frame_e + ENERGY_EPS)
    active = frame_db > frame_db.max() - VAD_RELATIVE_DB
    # floor relative to the clip level keeps the statistics gain-invariant
    ref = frame_e[active].mean() + ENERGY_EPS
    sel = 10.0 * np.log10(e[active] / ref + STAT_FLOOR)
    return np.concatenate([sel.mean(axis=0), sel.std(axis=0)]) / 10.0


def _forward(model: EmbedderModel, stats: np.ndarray):
    s = (stats - model.stat_mean) / model.stat_std
    h = np.tanh(s @ model.W1.T + model.b1)
    e = h @ model.W2.T + model.b2
    return s, h, e


def _normalize(e):
    return e / np.linalg.norm(e, axis=-1, keepdims=True)


def embed(model: EmbedderModel, enrollment, config: AnalysisConfig = DEFAULT_CONFIG) -> np.ndarray:
    x = as_samples(enrollment)
    rate = enrollment.sample_rate if isinstance(enrollment, AudioBuffer) else SAMPLE_RATE
    if len(x) < MIN_ENROLL_S * rate:
        raise ValueError(f"enrollment must be at least {MIN_ENROLL_S:g} s long")
    if not np.any(x):
        raise ValueError("enrollment is digital silence")
    _, _, e = _forward(model, pooled_stats(x, config))
    return _normalize(e)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


# ---------------------------------------------------------------------------
# AAM-softmax

SIN_FLOOR = 1e-7


def _aam_batch(emb, labels, class_weights, margin, scale):
    """Batched AAM-softmax; returns mean loss and gradients w.r.t. raw inputs."""
    e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    w_norm = np.linalg.norm(class_weights, axis=1, keepdims=True)
    e_hat = emb / e_norm
    w_hat = class_weights / w_norm
    cos = np.clip(e_hat @ w_hat.T, -1.0, 1.0)
    n = emb.shape[0]
    rows = np.arange(n)
    cos_y = cos[rows, labels]
    theta = np.arccos(cos_y)
    sin_t = np.maximum(np.sin(theta), SIN_FLOOR)

    logits = scale * cos
    logits[rows, labels] = scale * np.cos(theta + margin)
    shift = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - shift)
    p /= p.sum(axis=1, keepdims=True)
    loss = -np.log(p[rows, labels] + 1e-300)

    d_logits = p.copy()
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    d_cos = scale * d_logits
    d_cos[rows, labels] *= np.sin(theta + margin) / sin_t

    d_ehat = d_cos @ w_hat
    d_what = d_cos.T @ e_hat
    d_emb = (d_ehat - np.sum(d_ehat * e_hat, axis=1, keepdims=True) * e_hat) / e_norm
    d_w = (d_what - np.sum(d_what * w_hat, axis=1, keepdims=True) * w_hat) / w_norm
    return float(loss.mean()), d_emb, d_w


def aam_softmax_loss(embedding, label: int, class_weights, margin: float = 0.2, scale: float = 30.0):
    """Additive-angular-margin softmax loss for one embedding.

    Returns ``(loss, d_embedding, d_class_weights)``; both inputs are
    normalised inside the loss, so gradients are w.r.t. the raw vectors.
    """
    if not 0.0 <= margin <= 0.5:
        raise ValueError("margin must lie in [0, 0.5]")
    if scale <= 0:
        raise ValueError("scale must be positive")
    emb = np.asarray(embedding, dtype=np.float64)[None, :]
    loss, d_emb, d_w = _aam_batch(emb, np.array([label]), np.asarray(class_weights, dtype=np.float64),
                                  margin, scale)
    return loss, d_emb[0], d_w


# ---------------------------------------------------------------------------
# training

def _backward(model, s, h, e, d_e):
    """Gradients of the dense stack given d(loss)/d(raw output)."""
    grads = {"W2": d_e.T @ h, "b2": d_e.sum(axis=0)}
    d_h = d_e @ model.W2
    d_pre = d_h * (1 - h * h)
    grads["W1"] = d_pre.T @ s
    grads["b1"] = d_pre.sum(axis=0)
    return grads


def embedding_loss_and_grads(model: EmbedderModel, stats, labels, margin=0.2, scale=30.0):
    s, h, e = _forward(model, stats)
    loss, d_e, d_w = _aam_batch(e, labels, model.class_weights, margin, scale)
    grads = _backward(model, s, h, e, d_e)
    grads["class_weights"] = d_w
    return loss, grads


def _training_crops(clips_by_speaker, n_crops, rng, min_s=2.0, max_s=6.0):
    stats, labels = [], []
    fb = build_erb_filterbank(DEFAULT_CONFIG)
    for label, clips in enumerate(clips_by_speaker):
        for _ in range(n_crops):
            x = as_samples(clips[rng.integers(len(clips))])
            n = min(int(rng.uniform(min_s, max_s) * SAMPLE_RATE), len(x))
            start = rng.integers(len(x) - n + 1)
            seg = x[start:start + n]
            if rng.random() < 0.5:
                seg = seg * 10 ** (rng.uniform(-10, 0) / 20) + \
                    10 ** (-rng.uniform(15, 40) / 20) * np.std(seg) * rng.standard_normal(n)
            stats.append(pooled_stats(seg, DEFAULT_CONFIG, fb))
            labels.append(label)
    return np.array(stats), np.array(labels)


def train_embedder(clips_by_speaker, dim: int = 32, hidden: int = 64, epochs: int = 600,
                   crops_per_speaker: int = 150, lr: float = 1e-2, margin: float = 0.4,
                   scale: float = 30.0, seed: int = 0) -> EmbedderModel:
    """Full-batch Adam on AAM-softmax over random crops of each speaker's clips.

    ``clips_by_speaker`` is a sequence (one entry per class) of clip lists.
    """
    rng = np.random.default_rng(seed)
    stats, labels = _training_crops(clips_by_speaker, crops_per_speaker, rng)
    n_in = stats.shape[1]
    n_classes = len(clips_by_speaker)
    cw = rng.standard_normal((n_classes, dim))
    model = EmbedderModel(
        W1=rng.uniform(-1, 1, (hidden, n_in)) / np.sqrt(n_in),
        b1=np.zeros(hidden),
        W2=rng.uniform(-1, 1, (dim, hidden)) / np.sqrt(hidden),
        b2=np.zeros(dim),
        stat_mean=stats.mean(axis=0),
        stat_std=stats.std(axis=0) + 1e-6,
        class_weights=cw / np.linalg.norm(cw, axis=1, keepdims=True),
    )
    names = ("W1", "b1", "W2", "b2", "class_weights")
    m = {k: np.zeros_like(getattr(model, k)) for k in names}
    v = {k: np.zeros_like(getattr(model, k)) for k in names}
    b1, b2 = 0.9, 0.999
    for step in range(1, epochs + 1):
        loss, grads = embedding_loss_and_grads(model, stats, labels, margin, scale)
        for k in names:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            upd = lr * (m[k] / (1 - b1 ** step)) / (np.sqrt(v[k] / (1 - b2 ** step)) + 1e-8)
            setattr(model, k, getattr(model, k) - upd)
        model.class_weights = _normalize(model.class_weights)
        if step % 100 == 0:
            log.debug("embedder step %d loss %.4f", step, loss)
    return model


# ---------------------------------------------------------------------------
# verification

def compute_eer(scores_same, scores_diff) -> float:
    """Equal error rate from a threshold sweep with linear interpolation.

    Accept when ``score >= threshold``. False-accept and false-reject rates
    are evaluated at every observed score (plus +inf) and the crossing is
    interpolated between the two neighbouring thresholds.
    """
    same = np.asarray(scores_same, dtype=np.float64)
    diff = np.asarray(scores_diff, dtype=np.float64)
    if same.size == 0 or diff.size == 0:
        raise ValueError("both score lists must be non-empty")
    thresholds = np.concatenate([np.unique(np.concatenate([same, diff])), [np.inf]])
    same_sorted = np.sort(same)
    diff_sorted = np.sort(diff)
    frr = np.searchsorted(same_sorted, thresholds, side="left") / same.size
    far = 1.0 - np.searchsorted(diff_sorted, thresholds, side="left") / diff.size
    gap = far - frr
    i = int(np.argmax(gap <= 0))
    if i == 0:
        return float(far[0])
    lam = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def verification_scores(embeddings: dict):
    """Same/different-speaker cosine scores for ``{speaker: [embedding, ...]}``."""
    items = [(spk, e) for spk, embs in embeddings.items() for e in embs]
    same, diff = [], []
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            score = float(np.dot(items[i][1], items[j][1]))
            (same if items[i][0] == items[j][0] else diff).append(score)
    return np.array(same), np.array(diff)


# ---------------------------------------------------------------------------
# enrollment augmentation

def _enrollment_variant(x: np.ndarray, rng, sample_rate: int = SAMPLE_RATE):
    """One reverberant, noisy variant; returns (variant, reverberant clean, snr_db)."""
    rt60 = rng.uniform(0.1, 0.6)
    snr_db = rng.uniform(0.0, 20.0)
    wet = reverberate(x, synthetic_rir(rt60, rng, sample_rate))
    noise = white_pink_noise(len(x), rng)
    p_sig = np.mean(wet ** 2)
    noise *= np.sqrt(p_sig / 10.0 ** (snr_db / 10.0)) / (np.sqrt(np.mean(noise ** 2)) + 1e-12)
    return wet + noise, wet, snr_db


def augment_enrollment(enrollment, n_variants: int = 10, rng_seed=None) -> list[AudioBuffer]:
    """Reverberated + noisy copies (RT60 ~ U(0.1, 0.6) s, SNR ~ U(0, 20) dB)."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    x = as_samples(enrollment)
    rate = enrollment.sample_rate if isinstance(enrollment, AudioBuffer) else SAMPLE_RATE
    rng = np.random.default_rng(rng_seed)
    return [AudioBuffer(_enrollment_variant(x, rng, rate)[0], rate) for _ in range(n_variants)]


# ---------------------------------------------------------------------------
# embedding cache: "UPNEMB1", count, D, then per entry: u32 id length, utf-8 id, D floats

def write_embedding_cache(path, entries: dict) -> None:
    items = list(entries.items())
    dim = len(items[0][1]) if items else 0
    chunks = [EMB_MAGIC, struct.pack("<II", len(items), dim)]
    for spk, vec in items:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise ValueError("all embeddings must share one dimension")
        enc = spk.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc + vec.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def read_embedding_cache(path) -> dict:
    data = Path(path).read_bytes()
    if data[:7] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding cache")
    count, dim = struct.unpack("<II", data[7:15])
    pos = 15
    out = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError(f"{path}: truncated")
        (n,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        spk = data[pos:pos + n].decode("utf-8")
        pos += n
        if pos + 4 * dim > len(data):
            raise ValueError(f"{path}: truncated")
        out[spk] = np.frombuffer(data[pos:pos + 4 * dim], dtype="<f4").astype(np.float64)
        pos += 4 * dim
    return out


# ---------------------------------------------------------------------------
# model files

def save_embedder(model: EmbedderModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: getattr(model, k) for k in
                      ("W1", "b1", "W2", "b2", "stat_mean", "stat_std", "class_weights")})


def load_embedder(path) -> EmbedderModel:
    with np.load(path) as z:
        return EmbedderModel(**{k: z[k] for k in z.files})
