"""Desk-scale experiment: toy corpus, embedder, training set and held-out mixtures.

Everything is derived from one seed, so two calls with the same arguments
produce bit-identical datasets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import toy
from .datagen import MixtureSpec, plan_segments, render_segment, synthesize_mixture
from .dsp import DEFAULT_CONFIG, build_erb_filterbank
from .embedder import augment_enrollment, embed, train_embedder
from .trainer import PreparedSegment, prepare_segment

log = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    corpus: toy.ToyCorpus
    embedder: object
    enroll_embeddings: dict        # speaker -> clean enrollment embedding
    variant_embeddings: dict       # speaker -> (n_variants, D)
    train_set: list                # PreparedSegment
    test_set: list                 # (speaker, MixtureTriple)


def enrollment_embeddings(embedder, enrollment: dict, n_variants: int = 10, seed: int = 0):
    clean, variants = {}, {}
    for i, (spk, audio) in enumerate(sorted(enrollment.items())):
        clean[spk] = embed(embedder, audio)
        variants[spk] = np.array([embed(embedder, v) for v in
                                  augment_enrollment(audio, n_variants, rng_seed=[seed, i])])
    return clean, variants


def held_out_mixtures(corpus: toy.ToyCorpus, n_mixtures: int = 24, duration_s: float = 8.0,
                      seed: int = 1000):
    """Two-speaker mixtures built from fresh clips and noises not used in training."""
    rng = np.random.default_rng(seed)
    ids = corpus.speaker_ids
    out = []
    for k in range(n_mixtures):
        spk = ids[k % len(ids)]
        other = ids[(k % len(ids) + 1 + int(rng.integers(len(ids) - 1))) % len(ids)]
        speakers = {s.speaker_id: s for s in corpus.speakers}
        tgt = [toy.make_clip(speakers[spk], duration_s, rng.integers(2 ** 32))]
        itf = [toy.make_clip(speakers[other], duration_s, rng.integers(2 ** 32))]
        noise = [toy.make_noise(toy.NOISE_KINDS[int(rng.integers(len(toy.NOISE_KINDS)))],
                                duration_s, rng.integers(2 ** 32))]
        seg_type = ("overlapping", "alternating")[k % 2]
        spec = MixtureSpec.draw(seg_type, duration_s, int(rng.integers(2 ** 31)))
        out.append((spk, synthesize_mixture(tgt, itf, noise, spec)))
    return out


def build_desk(seed: int = 0, segments_per_speaker: int = 16, duration_s: float = 10.0,
               n_test: int = 24, augment: bool = False, embedder=None) -> DeskSetup:
    corpus = toy.make_corpus(seed=seed)
    if embedder is None:
        embedder = train_embedder([corpus.clips[s] for s in corpus.speaker_ids], seed=seed)
    clean, variants = enrollment_embeddings(embedder, corpus.enrollment, seed=seed)
    fb = build_erb_filterbank(DEFAULT_CONFIG)
    records = plan_segments(corpus.speaker_ids, segments_per_speaker, duration_s, seed, augment=augment)
    train_set: list[PreparedSegment] = []
    for rec in records:
        triple = render_segment(rec, corpus.clips, corpus.noises)
        train_set.append(prepare_segment(rec.segment_id, triple, variants[rec.target_speaker],
                                         DEFAULT_CONFIG, fb, {"record": rec.to_json()}))
    test = held_out_mixtures(corpus, n_test, seed=seed + 1000)
    return DeskSetup(corpus, embedder, clean, variants, train_set, test)
