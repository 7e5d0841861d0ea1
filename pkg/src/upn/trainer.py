"""Multi-task training loop for the conditioned enhancer.

Each epoch visits every training segment once. For every visit a random crop
of ``seq_frames`` frames is taken, a fresh flag schedule is sampled, an
embedding is drawn from the speaker's augmented-enrollment variants, and the
per-frame targets are switched between the target-only and all-speakers
references according to the schedule. The network is trained with Adam on
the VAD-weighted loss; validation uses fixed crops and schedules so its loss
is comparable across epochs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .conditioning import MIN_RUN, FlagSchedule, make_condition, sample_schedule, select_targets
from .dsp import DEFAULT_CONFIG, PITCH_COH, build_erb_filterbank, extract_features
from .net import LOOKAHEAD, NetConfig, backward_from_cache, forward, init_params, save_params
from .objectives import FrameTargets, LossConfig, compute_targets, weighted_objective

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    seq_frames: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 10
    mu: float = 0.9
    gamma: float = 0.5
    seed: int = 0
    checkpoint_dir: str | None = None
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    embedding_augmentation: bool = True
    conv_channels: int = 64
    gru_layers: int = 3
    gru_hidden: int = 128
    time_budget_s: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seq_frames < MIN_RUN:
            raise ValueError(f"seq_frames must be >= {MIN_RUN}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        LossConfig(self.mu, self.gamma)

    def net_config(self, cond_dim: int) -> NetConfig:
        return NetConfig(cond_dim=cond_dim, conv_channels=self.conv_channels,
                         gru_layers=self.gru_layers, gru_hidden=self.gru_hidden)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a JSON config; ``None``-valued overrides are ignored."""
        data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


# ---------------------------------------------------------------------------
# examples

@dataclass
class TrainingExample:
    features: np.ndarray      # (T, 68) raw features of the mixture
    cond: np.ndarray          # (T, D + 1)
    targets: FrameTargets     # already switched per frame
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.features.shape[0]
        if self.cond.shape[0] != t or len(self.targets) != t:
            raise ValueError("features, conditions and targets must be frame-aligned")


@dataclass
class PreparedSegment:
    """Schedule-independent per-segment data, computed once."""

    segment_id: str
    features: np.ndarray
    personalized: FrameTargets
    non_personalized: FrameTargets
    embeddings: np.ndarray    # (n_variants, D) unit rows
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def prepare_segment(segment_id: str, triple, embeddings, config=DEFAULT_CONFIG, fb=None,
                    meta: dict | None = None) -> PreparedSegment:
    if fb is None:
        fb = build_erb_filterbank(config)
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    feats = extract_features(triple.mixture, config, fb)
    c_mix = feats[:, PITCH_COH]
    pse = compute_targets(triple.personalized_ref, triple.mixture, config, fb, c_mix)
    nse = compute_targets(triple.non_personalized_ref, triple.mixture, config, fb, c_mix)
    return PreparedSegment(segment_id, feats, pse, nse, embeddings, dict(meta or {}))


def _switch(prep: PreparedSegment, schedule, sl=slice(None)) -> FrameTargets:
    p, n = prep.personalized[sl], prep.non_personalized[sl]
    return FrameTargets(select_targets(p.gains, n.gains, schedule),
                        select_targets(p.strengths, n.strengths, schedule),
                        select_targets(p.vad, n.vad, schedule))


def assemble_example(triple, embedding, schedule: FlagSchedule, config=DEFAULT_CONFIG,
                     meta: dict | None = None) -> TrainingExample:
    """Features of the mixture plus targets switched by ``schedule``."""
    prep = prepare_segment(meta.get("segment_id", "") if meta else "", triple, embedding, config)
    if schedule.n_frames != prep.n_frames:
        raise ValueError(f"schedule has {schedule.n_frames} frames, mixture has {prep.n_frames}")
    return TrainingExample(prep.features, make_condition(prep.embeddings[0], schedule.q),
                           _switch(prep, schedule), dict(meta or {}))


def _crop(prep: PreparedSegment, seq_frames: int, rng, schedule_seed, augment: bool) -> TrainingExample:
    t = prep.n_frames
    length = min(seq_frames, t)
    start = int(rng.integers(t - length + 1))
    sl = slice(start, start + length)
    schedule = (sample_schedule(length, rng_seed=schedule_seed) if length >= MIN_RUN
                else FlagSchedule.constant(length, int(rng.integers(2))))
    z = prep.embeddings[int(rng.integers(len(prep.embeddings)))] if augment else prep.embeddings[0]
    return TrainingExample(prep.features[sl], make_condition(z, schedule.q),
                           _switch(prep, schedule, sl),
                           {"segment_id": prep.segment_id, "start": start, "schedule": schedule.kind})


def _pad_batch(examples):
    """Stack examples, padding short ones; returns arrays and a frame mask."""
    t = max(e.features.shape[0] for e in examples)
    b = len(examples)
    n_bands = examples[0].targets.gains.shape[1]
    feats = np.zeros((b, t, examples[0].features.shape[1]))
    cond = np.zeros((b, t, examples[0].cond.shape[1]))
    g = np.zeros((b, t, n_bands))
    r = np.zeros((b, t, n_bands))
    v = np.zeros((b, t))
    mask = np.zeros((b, t), dtype=bool)
    for i, e in enumerate(examples):
        n = e.features.shape[0]
        feats[i, :n], cond[i, :n] = e.features, e.cond
        g[i, :n], r[i, :n], v[i, :n] = e.targets.gains, e.targets.strengths, e.targets.vad
        mask[i, :n] = True
        if n < t:
            feats[i, n:] = feats[i, n - 1]
            cond[i, n:] = cond[i, n - 1]
    return feats, cond, FrameTargets(g, r, v), mask


class _Aligned:
    """Network outputs at steps ``LOOKAHEAD..`` matched to frames ``..T-LOOKAHEAD``."""

    def __init__(self, out):
        self.gains = out.gains[:, LOOKAHEAD:].astype(np.float64)
        self.strengths = out.strengths[:, LOOKAHEAD:].astype(np.float64)
        self.vad = out.vad[:, LOOKAHEAD:].astype(np.float64)


def batch_loss(params, examples, loss_cfg: LossConfig, *, with_grads: bool = True):
    """Weighted loss of a batch; optionally gradients w.r.t. the parameters."""
    feats, cond, targets, mask = _pad_batch(examples)
    res = forward(params, feats, cond, return_cache=with_grads)
    out = res[0]
    pred = _Aligned(out)
    tgt = FrameTargets(targets.gains[:, :-LOOKAHEAD], targets.strengths[:, :-LOOKAHEAD],
                       targets.vad[:, :-LOOKAHEAD])
    total, parts, g_out = weighted_objective(pred, tgt, loss_cfg, mask=mask[:, :-LOOKAHEAD])
    q1 = float(np.mean(cond[..., -1][mask] == 1.0))
    if not with_grads:
        return total, parts, None, q1
    full = {}
    for k, g in g_out.items():
        pad = np.zeros((g.shape[0], LOOKAHEAD) + g.shape[2:])
        full[k] = np.concatenate([pad, g], axis=1)
    grads = backward_from_cache(params, res[2], full)
    return total, parts, grads, q1


# ---------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k in params:
            g = grads[k].astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= upd.astype(params[k].dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# training

def split_dataset(dataset, val_fraction: float):
    """Deterministic split by a hash of each segment id."""
    if val_fraction <= 0 or len(dataset) < 2:
        return list(dataset), []
    key = lambda d: int(hashlib.sha256(d.segment_id.encode()).hexdigest()[:8], 16) / 2 ** 32
    val = [d for d in dataset if key(d) < val_fraction]
    train = [d for d in dataset if key(d) >= val_fraction]
    if not train:
        train, val = val, []
    return train, val


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    log: list
    best_val: float


def _validation_examples(val, cfg: TrainConfig):
    out = []
    for prep in val:
        seed = [cfg.seed, 7, *prep.segment_id.encode()]
        out.append(_crop(prep, cfg.seq_frames, np.random.default_rng(seed), seed, False))
    return out


def evaluate_loss(params, examples, loss_cfg: LossConfig, batch_size: int = 8):
    """Frame-count-weighted mean of batch losses; returns ``(total, parts)``."""
    tot, parts_sum, n = 0.0, {"L_G": 0.0, "L_R": 0.0, "L_V": 0.0}, 0
    for i in range(0, len(examples), batch_size):
        batch = examples[i:i + batch_size]
        frames = sum(max(e.features.shape[0] - LOOKAHEAD, 0) for e in batch)
        total, parts, _, _ = batch_loss(params, batch, loss_cfg, with_grads=False)
        tot += total * frames
        for k in parts_sum:
            parts_sum[k] += parts[k] * frames
        n += frames
    n = max(n, 1)
    return tot / n, {k: v / n for k, v in parts_sum.items()}


def train(dataset, config: TrainConfig = TrainConfig(), params: dict | None = None,
          log_path=None) -> TrainResult:
    """Adam on the VAD-weighted objective over prepared segments.

    Returns final and best-validation parameters plus the log records (one per
    epoch and split). Without a validation split the best checkpoint tracks
    the training loss. Raises :class:`TrainingError` on a non-finite loss.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = config
    loss_cfg = LossConfig(cfg.mu, cfg.gamma)
    train_set, val_set = split_dataset(dataset, cfg.val_fraction)
    cond_dim = dataset[0].embeddings.shape[1] + 1
    if params is None:
        params = init_params(cfg.net_config(cond_dim), seed=cfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(cfg.seed)
    val_examples = _validation_examples(val_set, cfg)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    records = []
    best_val, best_params = np.inf, {k: v.copy() for k, v in params.items()}
    t_start = time.perf_counter()
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(rec):
        records.append(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()
        log.info("epoch %d %s total %.4f", rec["epoch"], rec["split"], rec["total"])

    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            sums = {"L_G": 0.0, "L_R": 0.0, "L_V": 0.0, "total": 0.0}
            q1_frames, n_batches = [], 0
            for i in range(0, len(order), cfg.batch_size):
                batch = [_crop(train_set[j], cfg.seq_frames, rng, rng.integers(2 ** 63),
                               cfg.embedding_augmentation) for j in order[i:i + cfg.batch_size]]
                total, parts, grads, q1 = batch_loss(params, batch, loss_cfg)
                if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    ids = [e.meta["segment_id"] for e in batch]
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch segments {ids}")
                clip_global_norm(grads, cfg.grad_clip)
                opt.step(params, grads)
                for k in parts:
                    sums[k] += parts[k]
                sums["total"] += total
                q1_frames.append(q1)
                n_batches += 1
            rec = {"epoch": epoch, "split": "train", **{k: v / n_batches for k, v in sums.items()},
                   "q1_fraction": float(np.mean(q1_frames)),
                   "wall_time_s": time.perf_counter() - t_start}
            emit(rec)
            if val_examples:
                v_total, v_parts = evaluate_loss(params, val_examples, loss_cfg, cfg.batch_size)
                emit({"epoch": epoch, "split": "validation", **v_parts, "total": v_total,
                      "wall_time_s": time.perf_counter() - t_start})
                score = v_total
            else:
                score = rec["total"]
            if score < best_val:
                best_val = score
                best_params = {k: v.copy() for k, v in params.items()}
                if ckpt_dir:
                    save_params(best_params, ckpt_dir / "best.ckpt")
            if ckpt_dir:
                save_params(params, ckpt_dir / "last.ckpt")
            if cfg.time_budget_s and time.perf_counter() - t_start > cfg.time_budget_s:
                log.warning("time budget reached after epoch %d", epoch)
                break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params, best_params, records, float(best_val))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2), encoding="utf-8")
