"""End-to-end orchestration: corpus -> models -> watermarked data -> student -> EWS -> spoof -> metrics.

Every random draw is derived from the master seed through ``task_seed``
(one integer per named task) and ``sequence_rng`` (one stream per text), so
results never depend on the order in which texts are produced.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .config import ExperimentConfig
from .corpus import synthetic_corpus
from .distill import DistillationResult, WatermarkedCorpus, fit_student, generate_dataset, sequence_rng
from .errors import CorpusTooSmall, StageError, WmSpoofError
from .extract import EwsTable, build_ews
from .metrics import calibrate_threshold, lattice_ks_pvalue, lower_median, tpr_at_fpr, wilson_interval
from .persist import dumps, key_digest
from .spoof import SpoofConfig, spoof_generate
from .textmodel import NGramModel, Vocabulary, build_vocab, corpus_lines, fit_ngram, generate, perplexity, read_corpus, tokenize
from .watermark import GREENLIST, GreenListWatermark, TournamentSampler, WatermarkConfig, detect, z_spacing

SHARDS = ("teacher", "base", "attack", "heldout")
STAGES = ("corpus", "fit", "distill", "extract", "evaluate")
UNDERPOWERED_MIN_EXPECTED = 10  # fewer expected null exceedances than this is flagged


def task_seed(seed: int, task: str) -> int:
    """Deterministic 63-bit seed for a named task under the master seed."""
    digest = hashlib.sha256(f"{int(seed)}/{task}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@contextlib.contextmanager
def stage(name: str):
    """Tag any library failure with the stage it happened in."""
    try:
        yield
    except StageError:
        raise
    except (WmSpoofError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class Lab:
    """Everything ``prepare`` builds; the evaluation only reads from it."""

    config: ExperimentConfig
    watermark: WatermarkConfig
    vocab: Vocabulary
    prompts: list
    teacher: NGramModel
    base: NGramModel
    attack: NGramModel
    reference: NGramModel
    dataset: Optional[WatermarkedCorpus] = None
    distillation: Optional[DistillationResult] = None
    ews: Optional[EwsTable] = None

    @property
    def student(self) -> Optional[NGramModel]:
        return self.distillation.student if self.distillation is not None else None


def load_text(cfg: ExperimentConfig) -> str:
    if cfg.corpus is None:
        s = cfg.synthetic
        return synthetic_corpus(
            s.n_lines, s.min_len, s.max_len, s.n_words, s.branching, s.unigram_share, s.zipf, s.concentration, s.seed
        )
    return read_corpus(cfg.corpus)


def split_corpus(cfg: ExperimentConfig, text: str) -> tuple[Vocabulary, dict, list]:
    """Vocabulary, round-robin line shards and prompts (prefixes of held-out lines)."""
    vocab = build_vocab(text, cfg.tokenizer, cfg.max_vocab)
    lines = corpus_lines(text)
    if len(lines) < len(SHARDS):
        raise CorpusTooSmall(f"need at least {len(SHARDS)} non-blank lines, got {len(lines)}")
    seqs = [tokenize(line, vocab) for line in lines]
    shards = {name: seqs[i::len(SHARDS)] for i, name in enumerate(SHARDS)}
    k = cfg.distill.prompt_length
    prompts = [s[:k] for s in shards["heldout"] if len(s) > k]
    if not prompts:
        prompts = [[]]
    return vocab, shards, prompts


def fit_models(cfg: ExperimentConfig, vocab: Vocabulary, shards: dict) -> dict:
    def fit(shard, spec):
        return fit_ngram(shards[shard], vocab, spec.order, spec.smoothing)

    models = {
        "teacher": fit("teacher", cfg.teacher),
        "base": fit("base", cfg.student),
        "reference": fit("heldout", cfg.reference),
    }
    models["attack"] = models["base"] if cfg.attack_target == "base" else fit("attack", cfg.attack)
    return models


def make_dataset(cfg: ExperimentConfig, teacher: NGramModel, wm: WatermarkConfig, prompts) -> WatermarkedCorpus:
    d = cfg.distill
    return generate_dataset(teacher, wm, prompts, d.n_sequences, d.length, task_seed(cfg.seed, "dataset"), d.temperature)


def make_ews(cfg: ExperimentConfig, result: DistillationResult) -> EwsTable:
    e = cfg.extract
    return build_ews(result.student, result.base, result.dataset, e.orders, e.cap, e.threshold, e.min_support)


def prepare(cfg: ExperimentConfig, upto: str = "extract", store=None) -> Lab:
    """Run the build stages up to and including ``upto``.

    ``store`` (see ``cli.ArtifactStore``) may supply previously saved
    artifacts and receives the new ones; it must expose ``get(name)`` and
    ``put(name, obj)``.
    """
    if upto not in STAGES:
        raise ValueError(f"unknown stage {upto!r}")
    last = STAGES.index(upto)
    get = store.get if store is not None else (lambda name: None)
    put = store.put if store is not None else (lambda name, obj: None)

    with stage("corpus"):
        wm = cfg.watermark.build()
        vocab, shards, prompts = split_corpus(cfg, load_text(cfg))
    with stage("fit"):
        names = ("teacher", "base", "attack", "reference")
        models = {n: get(n) for n in names}
        if any(m is None for m in models.values()):
            models = fit_models(cfg, vocab, shards)
            for n in names:
                put(n, models[n])
    lab = Lab(cfg, wm, vocab, prompts, models["teacher"], models["base"], models["attack"], models["reference"])
    if last < STAGES.index("distill"):
        return lab
    with stage("distill"):
        dataset = get("dataset")
        if dataset is None:
            dataset = make_dataset(cfg, lab.teacher, wm, prompts)
            put("dataset", dataset)
        lab.dataset = dataset
        student = get("student")
        if student is None:
            lab.distillation = fit_student(lab.base, dataset, cfg.distill.mix, cfg.distill.train_on_prompt)
            put("student", lab.distillation.student)
        else:
            lab.distillation = DistillationResult(student, lab.base, dataset, cfg.distill.mix)
    if last < STAGES.index("extract"):
        return lab
    with stage("extract"):
        ews = get("ews")
        if ews is None:
            ews = make_ews(cfg, lab.distillation)
            put("ews", ews)
        lab.ews = ews
    return lab


# --------------------------------------------------------------------------- texts

Generator = Callable[[Sequence[int], np.random.Generator], list]


@dataclass
class TextBatch:
    """Generated texts with their detector reports and reference perplexities."""

    sequences: list
    prompt_lengths: list
    reports: list
    perplexities: list

    @property
    def z(self) -> list:
        return [r.z for r in self.reports]


def run_texts(lab: Lab, gen: Generator, n: int, seed: int) -> TextBatch:
    cfg = lab.config
    V = lab.vocab.size
    seqs, plens, reports, ppl = [], [], [], []
    for i in range(n):
        prompt = [int(t) for t in lab.prompts[i % len(lab.prompts)]]
        seq = prompt + gen(prompt, sequence_rng(seed, i))
        seqs.append(seq)
        plens.append(len(prompt))
        reports.append(detect(seq, lab.watermark, V, start=len(prompt)))
        ppl.append(perplexity(lab.reference, seq, start=len(prompt)))
    return TextBatch(seqs, plens, reports, ppl)


def plain_generator(model: NGramModel, length: int, temperature: float) -> Generator:
    return lambda prompt, rng: generate(model, prompt, length, rng=rng, temperature=temperature)


def watermarked_generator(lab: Lab, length: int, temperature: float) -> Generator:
    wm = lab.watermark
    if wm.scheme == GREENLIST:
        transform = GreenListWatermark(wm, lab.vocab.size)
        return lambda prompt, rng: generate(lab.teacher, prompt, length, transform=transform, rng=rng,
                                            temperature=temperature)
    sampler = TournamentSampler(wm, temperature)
    return lambda prompt, rng: generate(lab.teacher, prompt, length, rng=rng, sampler=sampler)


def spoof_generator(lab: Lab, alpha: float, length: int, temperature: float) -> Generator:
    sc = SpoofConfig(alpha, lab.ews, lab.attack, temperature)
    return lambda prompt, rng: spoof_generate(sc, prompt, length, rng=rng)


# --------------------------------------------------------------------------- report


def _fpr_key(fpr: float) -> str:
    return repr(float(fpr))


@dataclass
class MetricsReport:
    rows: list  # one dict per alpha
    baselines: list  # "watermarked" (teacher) and "student" rows
    thresholds: dict  # fpr -> {"threshold", "underpowered", "expected_exceedances"}
    null: dict
    baseline_perplexity: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "baselines": self.baselines,
            "thresholds": self.thresholds,
            "null": self.null,
            "baseline_perplexity": self.baseline_perplexity,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(data["rows"], data["baselines"], data["thresholds"], data["null"],
                   data["baseline_perplexity"], data.get("provenance", {}))

    def row(self, alpha: float) -> dict:
        for r in self.rows:
            if r["alpha"] == alpha:
                return r
        raise KeyError(alpha)


def summarize(label: str, batch: TextBatch, null_z: Sequence[float], fpr_levels, z_threshold: float,
              alpha: Optional[float] = None) -> dict:
    z = batch.z
    n = len(z)
    tpr = tpr_at_fpr(z, null_z, fpr_levels)
    ci = {}
    for fpr, rate in tpr.items():
        lo, hi = wilson_interval(int(round(rate * n)), n)
        ci[_fpr_key(fpr)] = [lo, hi]
    passed = sum(1 for v in z if v >= z_threshold)
    return {
        "label": label,
        "alpha": alpha,
        "n": n,
        "tpr": {_fpr_key(f): v for f, v in tpr.items()},
        "tpr_ci": ci,
        "median_p": lower_median(r.p for r in batch.reports),
        "median_z": lower_median(z),
        "pass_rate": passed / n,
        "median_perplexity": lower_median(batch.perplexities),
    }


@dataclass
class Evaluation:
    """Shared evaluation context: the null set and its calibration."""

    null: TextBatch
    thresholds: dict
    null_summary: dict


def evaluate_null(lab: Lab) -> Evaluation:
    cfg = lab.config
    ev = cfg.evaluation
    batch = run_texts(lab, plain_generator(lab.attack, ev.length, ev.temperature), ev.n_null,
                      task_seed(cfg.seed, "null"))
    z = batch.z
    thresholds = {}
    for fpr in ev.fpr_levels:
        expected = fpr * len(z)
        thresholds[_fpr_key(fpr)] = {
            "threshold": calibrate_threshold(z, fpr),
            "expected_exceedances": expected,
            "underpowered": expected < UNDERPOWERED_MIN_EXPECTED,
        }
    flagged = sum(1 for v in z if v >= cfg.z_threshold)
    summary = {
        "n": len(z),
        "median_z": lower_median(z),
        "mean_z": float(np.mean(z)),
        "fpr_at_z_threshold": flagged / len(z),
        "fpr_at_z_threshold_ci": list(wilson_interval(flagged, len(z))),
        "ks_pvalue_normal": float(stats.kstest(z, "norm").pvalue),
        "ks_pvalue_normal_lattice": lattice_ks_pvalue(
            z, [z_spacing(r, lab.watermark) for r in batch.reports], np.random.default_rng(task_seed(cfg.seed, "ks"))
        ),
    }
    return Evaluation(batch, thresholds, summary)


def provenance(lab: Lab) -> dict:
    cfg = lab.config
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "scheme": lab.watermark.scheme,
        "vocab_hash": lab.vocab.fingerprint(),
        "vocab_size": lab.vocab.size,
        "key_hash": key_digest(lab.watermark.key, cfg.config_hash()[:16]),
        "tool_version": __version__,
    }


def evaluate(lab: Lab, alphas: Sequence[float], baselines: bool = True, null: Optional[Evaluation] = None
             ) -> MetricsReport:
    """Spoof at each alpha (common per-text seeds across alphas) and score against the null set."""
    if not alphas:
        raise ValueError("alphas must be non-empty")
    cfg = lab.config
    ev = cfg.evaluation
    with stage("evaluate"):
        null = null or evaluate_null(lab)
        null_z = null.null.z
        base_rows = []
        if baselines:
            wm_batch = run_texts(lab, watermarked_generator(lab, ev.length, ev.temperature), ev.n_positive,
                                 task_seed(cfg.seed, "watermarked"))
            base_rows.append(summarize("watermarked", wm_batch, null_z, ev.fpr_levels, cfg.z_threshold))
            if lab.student is not None:
                st_batch = run_texts(lab, plain_generator(lab.student, ev.length, ev.temperature), ev.n_student,
                                     task_seed(cfg.seed, "student"))
                base_rows.append(summarize("student", st_batch, null_z, ev.fpr_levels, cfg.z_threshold))
        rows = []
        spoof_seed = task_seed(cfg.seed, "spoof")
        for alpha in alphas:
            batch = run_texts(lab, spoof_generator(lab, float(alpha), ev.length, ev.temperature), ev.n_positive,
                              spoof_seed)
            rows.append(summarize("spoof", batch, null_z, ev.fpr_levels, cfg.z_threshold, float(alpha)))
    return MetricsReport(rows, base_rows, null.thresholds, null.null_summary,
                         lower_median(null.null.perplexities), provenance(lab))


def run_pipeline(cfg: ExperimentConfig, store=None) -> MetricsReport:
    return evaluate(prepare(cfg, "extract", store), cfg.alphas)


def alpha_sweep(cfg: ExperimentConfig, alphas: Optional[Sequence[float]] = None, store=None) -> MetricsReport:
    """One row per alpha, all sharing the same EWS table and null set."""
    alphas = list(cfg.sweep_alphas if alphas is None else alphas)
    return evaluate(prepare(cfg, "extract", store), alphas)


# --------------------------------------------------------------------------- files

TABLE_FIELDS = ("alpha", "tpr@0.1", "tpr@0.01", "tpr@0.001", "median_p", "median_z", "pass_rate", "median_perplexity")


def _table_row(row: dict, fpr_levels) -> list:
    out = [repr(row["alpha"])]
    out += [repr(row["tpr"][_fpr_key(f)]) for f in fpr_levels]
    out += [repr(row[k]) for k in ("median_p", "median_z", "pass_rate", "median_perplexity")]
    return out


def emit_report(report: MetricsReport, directory, fpr_levels=(0.1, 0.01, 0.001)) -> dict:
    """Write report.json, table.csv (one row per alpha) and the two plot series.

    Floats in the CSVs use ``repr`` so they parse back to the exact JSON values.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": directory / "report.json",
            "table": directory / "table.csv",
            "median_p": directory / "series_median_p.csv",
            "perplexity": directory / "series_perplexity.csv",
        }
        paths["report"].write_text(dumps(report.to_dict()), encoding="utf-8")
        header = ["alpha"] + [f"tpr@{f!r}" for f in fpr_levels] + list(TABLE_FIELDS[-4:])
        _write_csv(paths["table"], header, [_table_row(r, fpr_levels) for r in report.rows])
        _write_csv(paths["median_p"], ["alpha", "median_p"],
                   [[repr(r["alpha"]), repr(r["median_p"])] for r in report.rows])
        _write_csv(paths["perplexity"], ["alpha", "median_perplexity"],
                   [[repr(r["alpha"]), repr(r["median_perplexity"])] for r in report.rows])
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return paths


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def is_finite_row(row: dict) -> bool:
    return all(math.isfinite(row[k]) for k in ("median_p", "median_z", "median_perplexity"))
