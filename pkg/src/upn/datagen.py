"""Training-mixture factory and corpus cleanup.

A segment is built from three streams: the target speaker, at most one
interfering speaker and background noise. Speech streams are assembled by
looping source clips with short crossfades, placed according to the segment
type, optionally augmented, then scaled so that the measured SIR and SNR hit
the requested values exactly. Both training references are returned next to
the mixture: the target speaker alone and all speakers together.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, as_samples, write_wav
from .augment import apply_augmentation_params, draw_augmentations
from .conditioning import FlagSchedule, sample_schedule, write_schedule_file
from .dsp import DEFAULT_CONFIG, extract_features, write_feature_dump
from .embedder import cosine_similarity, embed
from .objectives import VAD_RELATIVE_DB

log = logging.getLogger(__name__)

SEGMENT_TYPES = ("overlapping", "alternating", "single")
TYPE_SHARES = (0.5, 0.25, 0.25)  # 40 / 20 / 20 of every 80 segments
SNR_RANGE = (-5.0, 35.0)
SIR_RANGE = (-2.0, 10.0)
CROSSFADE_S = 0.5
TURN_RANGE_S = (3.0, 5.0)
MIN_OVERLAP_SHARE = 0.5
TURN_FADE_S = 0.01
ACTIVITY_BLOCK = 480
CLIP_CEILING = 0.99

CHUNK_S = 30.0
CHUNK_HOP_S = 15.0
MULTI_SPEAKER_THRESHOLD = 0.8
INTERFERENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class MixtureSpec:
    segment_type: str
    snr_db: float
    sir_db: float = 0.0
    duration_s: float = 10.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.segment_type not in SEGMENT_TYPES:
            raise ValueError(f"unknown segment type {self.segment_type!r}")
        if not SNR_RANGE[0] <= self.snr_db <= SNR_RANGE[1]:
            raise ValueError(f"snr_db {self.snr_db} outside {SNR_RANGE}")
        if not SIR_RANGE[0] <= self.sir_db <= SIR_RANGE[1]:
            raise ValueError(f"sir_db {self.sir_db} outside {SIR_RANGE}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.segment_type == "alternating" and self.duration_s < 2 * TURN_RANGE_S[0]:
            raise ValueError("alternating segments need room for two 3 s turns")

    @classmethod
    def draw(cls, segment_type: str, duration_s: float, seed: int, augment: bool = False) -> "MixtureSpec":
        """Spec with SNR ~ U(-5, 35) dB and SIR ~ U(-2, 10) dB drawn from ``seed``."""
        rng = np.random.default_rng([seed, 1])
        snr = float(rng.uniform(*SNR_RANGE))
        sir = float(rng.uniform(*SIR_RANGE)) if segment_type != "single" else 0.0
        return cls(segment_type, snr, sir, duration_s, seed, augment)


@dataclass
class MixtureTriple:
    mixture: AudioBuffer
    personalized_ref: AudioBuffer       # target speaker only
    non_personalized_ref: AudioBuffer   # all speakers
    interference: AudioBuffer
    noise: AudioBuffer
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.mixture)


# ---------------------------------------------------------------------------
# stream assembly

def _fill(clips, n: int, rng, crossfade: int):
    """Loop randomly chosen clips into ``n`` samples, crossfading at joins.

    Returns the stream and the list of clip indices used.
    """
    out = np.zeros(n)
    used = []
    pos = 0
    ramp = np.sin(0.5 * np.pi * (np.arange(crossfade) + 0.5) / crossfade) ** 2 if crossfade else None
    while pos < n:
        idx = int(rng.integers(len(clips)))
        x = as_samples(clips[idx])
        if len(x) <= 2 * crossfade:
            raise ValueError(f"clip {idx} is shorter than two crossfades")
        used.append(idx)
        if len(used) == 1:  # random entry point into the first clip
            x = x[int(rng.integers(min(len(x) // 2, len(x) - 2 * crossfade) + 1)):]
        seg = x.copy()
        if pos > 0 and crossfade:
            pos -= crossfade
            seg[:crossfade] *= ramp
            out[pos:pos + crossfade] *= ramp[::-1]
        stop = min(pos + len(seg), n)
        out[pos:stop] += seg[:stop - pos]
        pos = stop
    return out, used


def _gate(n: int, regions, fade: int) -> np.ndarray:
    """0/1 envelope that is on inside ``regions`` with raised-cosine edges inside each region."""
    env = np.zeros(n)
    for a, b in regions:
        env[a:b] = 1.0
        f = min(fade, (b - a) // 2)
        if f:
            r = 0.5 - 0.5 * np.cos(np.pi * (np.arange(f) + 0.5) / f)
            env[a:a + f] *= r
            env[b - f:b] *= r[::-1]
    return env


def _turns(n: int, rng, sr: int):
    """Turn boundaries of U(3, 5) s; a short remainder is merged into the last turn."""
    lo, hi = (int(t * sr) for t in TURN_RANGE_S)
    edges = [0]
    while n - edges[-1] >= 2 * lo:
        edges.append(edges[-1] + min(int(rng.integers(lo, hi + 1)), n - edges[-1] - lo))
    edges.append(n)
    return list(zip(edges[:-1], edges[1:]))


def active_mask(x, block: int = ACTIVITY_BLOCK, rel_db: float = VAD_RELATIVE_DB) -> np.ndarray:
    """Per-sample mask of blocks whose energy is within ``rel_db`` of the loudest block."""
    x = as_samples(x)
    n_blocks = -(-len(x) // block)
    padded = np.zeros(n_blocks * block)
    padded[:len(x)] = x
    e = np.sum(padded.reshape(n_blocks, block) ** 2, axis=1)
    if not np.any(e > 0):
        return np.zeros(len(x), dtype=bool)
    on = e > e.max() * 10.0 ** (-rel_db / 10.0)
    return np.repeat(on, block)[:len(x)]


def _power(x, mask) -> float:
    return float(np.mean(x[mask] ** 2)) if np.any(mask) else 0.0


def measure_snr(speech, noise) -> float:
    """Speech-to-noise ratio in dB over the speech-active samples."""
    speech, noise = as_samples(speech), as_samples(noise)
    mask = active_mask(speech)
    return 10.0 * np.log10(_power(speech, mask) / _power(noise, mask))


def measure_sir(target, interference) -> float:
    """Target-to-interference ratio in dB, each stream measured over its own active samples."""
    target, interference = as_samples(target), as_samples(interference)
    return 10.0 * np.log10(_power(target, active_mask(target))
                           / _power(interference, active_mask(interference)))


def synthesize_mixture(target_clips, interference_clips, noise_clips, spec: MixtureSpec,
                       sample_rate: int = SAMPLE_RATE) -> MixtureTriple:
    """Build one training segment.

    ``interference_clips`` may be empty for ``single`` segments. With
    ``spec.augment`` each stream receives its own random reverb, low-pass, EQ
    and level draw before scaling, and the references contain the augmented
    speech. ``mixture == (personalized_ref + interference) + noise`` holds
    sample-wise, and ``non_personalized_ref == personalized_ref + interference``.
    """
    if not target_clips or not noise_clips:
        raise ValueError("target and noise pools must be non-empty")
    multi = spec.segment_type != "single"
    if multi and not interference_clips:
        raise ValueError(f"{spec.segment_type} segments need interference clips")
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_s * sample_rate))
    xfade = int(CROSSFADE_S * sample_rate)
    fade = int(TURN_FADE_S * sample_rate)
    info = {"segment_type": spec.segment_type, "seed": spec.seed}

    target, info["target_clips"] = _fill(target_clips, n, rng, xfade)
    interf = np.zeros(n)
    if multi:
        interf, info["interference_clips"] = _fill(interference_clips, n, rng, xfade)
        if spec.segment_type == "overlapping":
            length = int(rng.uniform(MIN_OVERLAP_SHARE, 1.0) * n)
            start = int(rng.integers(n - length + 1))
            interf *= _gate(n, [(start, start + length)], fade)
            info["interference_region"] = [start, start + length]
        else:
            turns = _turns(n, rng, sample_rate)
            first = int(rng.integers(2))
            mine = [t for i, t in enumerate(turns) if (i + first) % 2 == 0]
            theirs = [t for i, t in enumerate(turns) if (i + first) % 2 == 1]
            target *= _gate(n, mine, fade)
            interf *= _gate(n, theirs, fade)
            info["turns"] = [[int(a), int(b), int((i + first) % 2)] for i, (a, b) in enumerate(turns)]
    noise, info["noise_clips"] = _fill(noise_clips, n, rng, xfade)

    if spec.augment:
        aug = {"target": draw_augmentations(rng), "noise": draw_augmentations(rng)}
        target = apply_augmentation_params(target, aug["target"], sample_rate)
        noise = apply_augmentation_params(noise, aug["noise"], sample_rate)
        if multi:
            aug["interference"] = draw_augmentations(rng)
            interf = apply_augmentation_params(interf, aug["interference"], sample_rate)
        info["augmentations"] = aug

    if _power(target, active_mask(target)) == 0.0:
        raise ValueError("target stream is silent")
    if multi:
        p_t = _power(target, active_mask(target))
        p_i = _power(interf, active_mask(interf))
        interf *= np.sqrt(p_t / p_i / 10.0 ** (spec.sir_db / 10.0))
    speech = target + interf
    mask = active_mask(speech)
    p_n = _power(noise, mask)
    if p_n == 0.0:
        raise ValueError("noise stream is silent over the speech-active region")
    noise *= np.sqrt(_power(speech, mask) / p_n / 10.0 ** (spec.snr_db / 10.0))

    peak = np.max(np.abs(speech + noise))
    if peak > CLIP_CEILING:
        g = CLIP_CEILING / peak
        target, interf, noise = target * g, interf * g, noise * g
        info["clip_guard_gain"] = float(g)
    speech = target + interf
    mixture = speech + noise
    info["snr_db"] = measure_snr(speech, noise)
    if multi:
        info["sir_db"] = measure_sir(target, interf)
    return MixtureTriple(
        mixture=AudioBuffer(mixture, sample_rate),
        personalized_ref=AudioBuffer(target, sample_rate),
        non_personalized_ref=AudioBuffer(speech, sample_rate),
        interference=AudioBuffer(interf, sample_rate),
        noise=AudioBuffer(noise, sample_rate),
        info=info,
    )


def segment_types(n_segments: int, rng_seed=None) -> list[str]:
    """Shuffled segment types in the 2 : 1 : 1 overlapping/alternating/single proportion."""
    counts = np.floor(np.array(TYPE_SHARES) * n_segments).astype(int)
    rest = n_segments - counts.sum()
    counts[np.argsort(-(np.array(TYPE_SHARES) * n_segments - counts), kind="stable")[:rest]] += 1
    types = [t for t, c in zip(SEGMENT_TYPES, counts) for _ in range(c)]
    order = np.random.default_rng(rng_seed).permutation(n_segments)
    return [types[i] for i in order]


# ---------------------------------------------------------------------------
# dataset generation and manifests

@dataclass
class SegmentRecord:
    """One manifest line; with the source pools it reproduces the segment bit-exactly."""

    segment_id: str
    target_speaker: str
    interference_speaker: str | None
    spec: MixtureSpec
    source_clips: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SegmentRecord":
        d = json.loads(line)
        d["spec"] = MixtureSpec(**d["spec"])
        return cls(**d)

    @property
    def split_hash(self) -> int:
        return int(hashlib.sha256(self.segment_id.encode()).hexdigest()[:8], 16)


def write_manifest(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list[SegmentRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SegmentRecord.from_json(line) for line in lines if line.strip()]


def plan_segments(speakers, segments_per_speaker: int, duration_s: float, seed: int = 0,
                  interference_map: dict | None = None, augment: bool = False) -> list[SegmentRecord]:
    """Draw segment types, SNR/SIR, seeds and interferers for every target speaker.

    ``interference_map`` restricts each speaker's interferers (see
    :func:`select_interference`); by default every other speaker is eligible.
    """
    speakers = list(speakers)
    root = np.random.SeedSequence(seed)
    records = []
    for si, (spk, child) in enumerate(zip(speakers, root.spawn(len(speakers)))):
        rng = np.random.default_rng(child)
        types = segment_types(segments_per_speaker, rng.integers(2 ** 32))
        pool = (interference_map or {}).get(spk, [s for s in speakers if s != spk])
        for k, seg_type in enumerate(types):
            if seg_type != "single" and not pool:
                seg_type = "single"
            seg_seed = int(rng.integers(2 ** 31))
            other = str(pool[int(rng.integers(len(pool)))]) if seg_type != "single" else None
            records.append(SegmentRecord(
                segment_id=f"{spk}_{k:04d}",
                target_speaker=spk,
                interference_speaker=other,
                spec=MixtureSpec.draw(seg_type, duration_s, seg_seed, augment),
            ))
    return records


def render_segment(record: SegmentRecord, clips_by_speaker: dict, noise_clips) -> MixtureTriple:
    other = clips_by_speaker[record.interference_speaker] if record.interference_speaker else []
    triple = synthesize_mixture(clips_by_speaker[record.target_speaker], other, noise_clips, record.spec)
    record.source_clips = {k: triple.info[k] for k in ("target_clips", "interference_clips", "noise_clips")
                           if k in triple.info}
    return triple


def write_segment(out_dir, record: SegmentRecord, triple: MixtureTriple, schedule_seed=None,
                  config=DEFAULT_CONFIG) -> None:
    """Write the WAV triple (float32), a sampled flag schedule and the mixture feature dump."""
    out_dir = Path(out_dir)
    paths = {
        "mixture": f"{record.segment_id}_mix.wav",
        "personalized_ref": f"{record.segment_id}_pse.wav",
        "non_personalized_ref": f"{record.segment_id}_nse.wav",
        "schedule": f"{record.segment_id}.sched",
        "features": f"{record.segment_id}.feat",
    }
    for key in ("mixture", "personalized_ref", "non_personalized_ref"):
        write_wav(out_dir / paths[key], getattr(triple, key), float32=True)
    feats = extract_features(triple.mixture, config)
    write_schedule_file(out_dir / paths["schedule"],
                        sample_schedule(feats.shape[0], rng_seed=schedule_seed)
                        if feats.shape[0] >= 200 else FlagSchedule.constant(feats.shape[0], 1))
    write_feature_dump(out_dir / paths["features"], feats)
    record.paths = paths


def generate_dataset(clips_by_speaker: dict, noise_clips, out_dir, segments_per_speaker: int = 8,
                     duration_s: float = 10.0, seed: int = 0, augment: bool = False,
                     interference_map: dict | None = None) -> list[SegmentRecord]:
    """Render a full desk dataset to ``out_dir`` and write ``manifest.jsonl``."""
    records = plan_segments(sorted(clips_by_speaker), segments_per_speaker, duration_s, seed,
                            interference_map, augment)
    for rec in records:
        triple = render_segment(rec, clips_by_speaker, noise_clips)
        write_segment(out_dir, rec, triple, schedule_seed=[seed, rec.spec.seed])
        log.info("segment %s: %s snr %.1f dB", rec.segment_id, rec.spec.segment_type, rec.spec.snr_db)
    write_manifest(Path(out_dir) / "manifest.jsonl", records)
    return records


# ---------------------------------------------------------------------------
# semi-supervised cleanup

def chunk_bounds(n_samples: int, sample_rate: int = SAMPLE_RATE,
                 chunk_s: float = CHUNK_S, hop_s: float = CHUNK_HOP_S):
    """Start/stop sample pairs of the full-length overlapping chunks of a clip."""
    size, hop = int(chunk_s * sample_rate), int(hop_s * sample_rate)
    if n_samples < size:
        return [(0, n_samples)]
    return [(s, s + size) for s in range(0, n_samples - size + 1, hop)]


def detect_multispeaker(clip, embedder, threshold: float = MULTI_SPEAKER_THRESHOLD,
                        chunk_s: float = CHUNK_S, hop_s: float = CHUNK_HOP_S):
    """Flag clips whose chunk embeddings disagree.

    Returns ``(is_multi, avg_similarity)``. With fewer than two chunks there
    is nothing to compare and the clip is kept (``avg_similarity`` is 1).
    """
    x = as_samples(clip)
    rate = clip.sample_rate if isinstance(clip, AudioBuffer) else SAMPLE_RATE
    bounds = chunk_bounds(len(x), rate, chunk_s, hop_s)
    if len(bounds) < 2:
        return False, 1.0
    embs = [embed(embedder, AudioBuffer(x[a:b], rate)) for a, b in bounds]
    sims = [cosine_similarity(embs[i], embs[j])
            for i in range(len(embs)) for j in range(i + 1, len(embs))]
    avg = float(np.mean(sims))
    return avg < threshold, avg


def select_interference(target_embedding, candidate_speakers: dict,
                        threshold: float = INTERFERENCE_THRESHOLD) -> list:
    """Speakers whose mean clip similarity to the target is below ``threshold``."""
    eligible = []
    for spk, embs in candidate_speakers.items():
        if len(embs) == 0:
            continue
        mean = float(np.mean([cosine_similarity(target_embedding, e) for e in embs]))
        if mean < threshold:
            eligible.append(spk)
    return eligible


def cleanup_corpus(clips_by_speaker: dict, embedder):
    """Drop multi-speaker clips and build the per-speaker interference map.

    Returns ``(kept_clips, interference_map, report)``.
    """
    kept, report = {}, {}
    for spk, clips in clips_by_speaker.items():
        flags = [detect_multispeaker(c, embedder) for c in clips]
        kept[spk] = [c for c, (multi, _) in zip(clips, flags) if not multi]
        report[spk] = [{"multi": m, "avg_similarity": s} for m, s in flags]
    clip_embs = {spk: [embed(embedder, c) for c in clips] for spk, clips in kept.items() if clips}
    centroids = {}
    for spk, embs in clip_embs.items():
        c = np.mean(embs, axis=0)
        centroids[spk] = c / np.linalg.norm(c)
    imap = {spk: [s for s in select_interference(centroids[spk],
                                                 {k: v for k, v in clip_embs.items() if k != spk})]
            for spk in centroids}
    return kept, imap, report
