"""Watermark inheritance: build the watermarked teacher corpus and distill a student from it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyCorpus, EmptyRequest, VocabMismatch
from .metrics import lower_median
from .textmodel import NGramModel, count_ngrams, generate, sample_next
from .watermark import (
    GREENLIST,
    DetectionReport,
    GreenListWatermark,
    TournamentSampler,
    WatermarkConfig,
    detect,
    g_values,
    green_hits,
    g_sums,
)


def prompt_set_id(prompts: Sequence[Sequence[int]]) -> str:
    blob = json.dumps([list(map(int, p)) for p in prompts], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sequence, so generation order never matters."""
    return np.random.default_rng([seed, index])


@dataclass
class WatermarkedCorpus:
    sequences: list  # full token sequences, prompt included
    prompt_lengths: list
    transcripts: list  # per token: green flag / g-sum at creation, -1 on prompt positions
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def vocab_hash(self) -> Optional[str]:
        return self.provenance.get("vocab_hash")

    def completions(self) -> list:
        return [s[p:] for s, p in zip(self.sequences, self.prompt_lengths)]


@dataclass
class DistillationResult:
    student: NGramModel
    base: NGramModel
    dataset: WatermarkedCorpus
    mix: float


def generate_dataset(
    teacher: NGramModel,
    config: WatermarkConfig,
    prompts: Sequence[Sequence[int]],
    n_sequences: int,
    length: int,
    seed: int = 0,
    temperature: float = 1.0,
) -> WatermarkedCorpus:
    """Sample ``n_sequences`` watermarked continuations, cycling through ``prompts``."""
    if n_sequences < 1:
        raise EmptyRequest("n_sequences must be >= 1")
    if not prompts:
        prompts = [[]]
    V = teacher.vocab.size
    seqs, plens, transcripts = [], [], []
    for i in range(n_sequences):
        prompt = [int(t) for t in prompts[i % len(prompts)]]
        rng = sequence_rng(seed, i)
        flags: list[int] = []
        if config.scheme == GREENLIST:
            wm = GreenListWatermark(config, V)

            def sampler(ctx, logits, rng, wm=wm, flags=flags):
                tok = sample_next(logits, temperature, rng)
                flags.append(int(tok in wm.last_partition))
                return tok

            out = generate(teacher, prompt, length, transform=wm, rng=rng, sampler=sampler)
        else:
            tour = TournamentSampler(config, temperature)

            def sampler(ctx, logits, rng, tour=tour, flags=flags):
                tok = tour(ctx, logits, rng)
                g = g_values(config.key, ctx, config.tournament_depth, V, config.context_width)
                flags.append(int(g[:, tok].sum()))
                return tok

            out = generate(teacher, prompt, length, rng=rng, sampler=sampler)
        seqs.append(prompt + out)
        plens.append(len(prompt))
        transcripts.append([-1] * len(prompt) + flags)
    provenance = {
        "teacher": teacher.fingerprint(),
        "scheme": config.scheme,
        "gamma": config.gamma,
        "delta": config.delta,
        "context_width": config.context_width,
        "tournament_depth": config.tournament_depth,
        "prompt_set": prompt_set_id(prompts),
        "seed": int(seed),
        "length": int(length),
        "temperature": float(temperature),
        "vocab_hash": teacher.vocab.fingerprint(),
    }
    return WatermarkedCorpus(seqs, plens, transcripts, provenance)


def fit_student(
    base: NGramModel,
    corpus: WatermarkedCorpus,
    mix: float = 0.3,
    train_on_prompt: bool = False,
) -> DistillationResult:
    """Count-based analogue of fine-tuning ``base`` on the corpus.

    Student distribution = (1 - mix) * smoothed corpus estimate + mix * base,
    both at the base model's order and smoothing.  ``mix == 1`` returns the
    base model itself.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("watermarked corpus has no sequences")
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must lie in [0, 1], got {mix}")
    if corpus.vocab_hash is not None and corpus.vocab_hash != base.vocab.fingerprint():
        raise VocabMismatch("corpus was generated with a different vocabulary")
    V = base.vocab.size
    for seq in corpus.sequences:
        if seq and (min(seq) < 0 or max(seq) >= V):
            raise VocabMismatch("corpus token id outside the base vocabulary")
    if mix == 1.0:
        return DistillationResult(base, base, corpus, mix)
    starts = None if train_on_prompt else corpus.prompt_lengths
    if sum(len(s) - (0 if starts is None else p) for s, p in zip(corpus.sequences, corpus.prompt_lengths)) < 1:
        raise EmptyCorpus("no training targets in corpus")
    levels = count_ngrams(corpus.sequences, base.order, V, starts)
    student = NGramModel(base.vocab, base.order, base.smoothing, levels, prior=base, prior_mix=mix)
    return DistillationResult(student, base, corpus, mix)


@dataclass
class RadioactivityReport:
    reports: list
    median_z: float
    median_p: float
    hits: int  # pooled green hits (greenlist) or g-value sum (tournament)
    trials: int  # pooled Bernoulli trials behind ``hits``
    pooled_p: float  # one-sided binomial tail of the pooled hits

    def to_dict(self) -> dict:
        return {
            "reports": [r.to_dict() for r in self.reports],
            "median_z": self.median_z,
            "median_p": self.median_p,
            "hits": self.hits,
            "trials": self.trials,
            "pooled_p": self.pooled_p,
        }


def radioactivity_score(
    result: DistillationResult,
    config: WatermarkConfig,
    n_samples: int,
    length: int,
    seed: int = 0,
    prompts: Optional[Sequence[Sequence[int]]] = None,
    temperature: float = 1.0,
) -> RadioactivityReport:
    """Generate from the student with no transform and run the scheme's detector."""
    if n_samples < 1:
        raise EmptyRequest("n_samples must be >= 1")
    prompts = prompts or [[]]
    V = result.student.vocab.size
    reports: list[DetectionReport] = []
    hits = trials = 0
    for i in range(n_samples):
        prompt = [int(t) for t in prompts[i % len(prompts)]]
        out = generate(result.student, prompt, length, rng=sequence_rng(seed, i), temperature=temperature)
        seq = prompt + out
        reports.append(detect(seq, config, V, start=len(prompt)))
        if config.scheme == GREENLIST:
            h = green_hits(seq, config, V, start=len(prompt))
            hits += sum(h)
            trials += len(h)
        else:
            g = g_sums(seq, config, V, start=len(prompt))
            hits += sum(g)
            trials += len(g) * config.tournament_depth
    rate = config.gamma if config.scheme == GREENLIST else 0.5
    pooled = float(stats.binom.sf(hits - 1, trials, rate))
    return RadioactivityReport(
        reports,
        lower_median(r.z for r in reports),
        lower_median(r.p for r in reports),
        hits,
        trials,
        pooled,
    )
