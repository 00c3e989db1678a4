"""Command-line entry point: ``python -m wmspoof <subcommand> [flags]``.

Each subcommand builds what it needs through ``pipeline.prepare`` with an
``ArtifactStore`` rooted at ``--out``, so stages run separately reuse each
other's saved artifacts.  Exit codes: 0 success, 2 usage, 3 invalid
configuration, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, apply_overrides, config_from_dict, load_config, parse_key
from .distill import radioactivity_score
from .errors import ConfigError, StageError, WmSpoofError
from .pipeline import (
    Lab,
    alpha_sweep,
    emit_report,
    evaluate,
    prepare,
    run_texts,
    spoof_generator,
    task_seed,
    watermarked_generator,
)
from .persist import (
    dumps,
    load_corpus,
    load_ews,
    load_model,
    read_meta,
    save_corpus,
    save_ews,
    save_model,
    sha256_file,
    write_manifest,
)
from .textmodel import detokenize, tokenize
from .watermark import SCHEMES, detect

COMMANDS = ("fit", "watermark-gen", "detect", "distill", "extract", "spoof", "eval", "sweep", "pipeline")
OUT_ENV = "WMSPOOF_OUT"
DEFAULT_OUT = "wmspoof-out"

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass
class CommandSpec:
    command: str
    config_path: Optional[str] = None
    overrides: dict = field(default_factory=dict)
    out: Optional[str] = None
    seed: Optional[int] = None
    input: Optional[str] = None
    n: Optional[int] = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmspoof", description="Watermark inheritance and spoofing lab.")
    parser.add_argument("--version", action="version", version=f"wmspoof {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "fit": "fit teacher, base, attack and reference n-gram models",
        "watermark-gen": "sample watermarked texts from the teacher",
        "detect": "run the detector over a text file (one text per line)",
        "distill": "generate the watermarked corpus and fit the student",
        "extract": "build the extracted watermark signal table",
        "spoof": "generate spoofed texts at each --alpha",
        "eval": "evaluate spoofing at the configured alphas and write the report",
        "sweep": "evaluate over the alpha sweep and write the report",
        "pipeline": "run every stage end to end and write the report",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--alpha", type=float, nargs="+", help="injection strength(s)")
        p.add_argument("--scheme", choices=SCHEMES, help="watermark scheme")
        p.add_argument("--key", help="watermark key as a hex string")
        if name == "detect":
            p.add_argument("--input", help="text file to score (default: <out>/watermarked.txt)")
        if name in ("watermark-gen", "spoof"):
            p.add_argument("--n", type=int, help="number of texts (default: evaluation.n_positive)")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> CommandSpec:
    """Parse argv; flag values land in ``overrides`` and win over config-file values."""
    ns = build_parser().parse_args(argv)
    overrides = {}
    if ns.seed is not None:
        overrides["seed"] = ns.seed
    if ns.alpha is not None:
        overrides["sweep_alphas" if ns.command == "sweep" else "alphas"] = list(ns.alpha)
    if ns.scheme is not None:
        overrides["watermark.scheme"] = ns.scheme
    if ns.key is not None:
        overrides["watermark.key"] = ns.key
    return CommandSpec(
        ns.command,
        ns.config,
        overrides,
        ns.out,
        ns.seed,
        getattr(ns, "input", None),
        getattr(ns, "n", None),
    )


def resolve_config(spec: CommandSpec) -> ExperimentConfig:
    cfg = load_config(spec.config_path) if spec.config_path else config_from_dict({})
    if "watermark.key" in spec.overrides:
        parse_key(spec.overrides["watermark.key"])  # reject malformed keys with the key path
    return apply_overrides(cfg, spec.overrides)


def output_dir(spec: CommandSpec) -> Path:
    return Path(spec.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


class ArtifactStore:
    """Saved stage outputs under one directory, reused only when built from the same settings."""

    FILES = {
        "teacher": "teacher.json.gz",
        "base": "base.json.gz",
        "attack": "attack.json.gz",
        "reference": "reference.json.gz",
        "student": "student.json.gz",
        "ews": "ews.json.gz",
        "dataset": "corpus.txt",
    }

    def __init__(self, root, cfg: ExperimentConfig, readonly: bool = False):
        self.root = Path(root)
        self.cfg = cfg
        self.readonly = readonly
        self.tag = cfg.prep_hash()

    def path(self, name: str) -> Path:
        return self.root / self.FILES[name]

    def _meta(self, name: str) -> dict:
        return {"artifact": name, "prep_hash": self.tag, "seed": self.cfg.seed}

    def get(self, name: str):
        path = self.path(name)
        if not path.exists():
            return None
        if name == "dataset":
            corpus = load_corpus(path)
            return corpus if corpus.provenance.get("prep_hash") == self.tag else None
        if read_meta(path).get("prep_hash") != self.tag:
            return None
        return load_ews(path) if name == "ews" else load_model(path)

    def put(self, name: str, obj) -> None:
        if self.readonly:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(name)
        if name == "dataset":
            obj.provenance["prep_hash"] = self.tag
            save_corpus(obj, path)
        elif name == "ews":
            save_ews(obj, path, self._meta(name))
        else:
            save_model(obj, path, self._meta(name))


def _write_texts(path: Path, lab: Lab, seqs) -> None:
    path.write_text("".join(detokenize(s, lab.vocab) + "\n" for s in seqs), encoding="utf-8")


def _finish(out: Path, cfg: ExperimentConfig, summary: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(cfg.redacted()), encoding="utf-8")
    write_manifest(out, cfg.config_hash(), cfg.seed, cfg.watermark.build().key)
    print(json.dumps(summary, sort_keys=True))
    return summary


def execute(spec: CommandSpec) -> dict:
    cfg = resolve_config(spec)
    out = output_dir(spec)
    store = ArtifactStore(out, cfg)
    cmd = spec.command
    ev = cfg.evaluation
    summary: dict = {"command": cmd, "seed": cfg.seed, "out": str(out)}

    if cmd == "fit":
        lab = prepare(cfg, "fit", store)
        summary.update(vocab_size=lab.vocab.size, models=sorted(["teacher", "base", "attack", "reference"]))
    elif cmd == "watermark-gen":
        lab = prepare(cfg, "fit", store)
        n = spec.n or ev.n_positive
        batch = run_texts(lab, watermarked_generator(lab, ev.length, ev.temperature), n,
                          task_seed(cfg.seed, "watermarked"))
        out.mkdir(parents=True, exist_ok=True)
        _write_texts(out / "watermarked.txt", lab, batch.sequences)
        summary.update(n=n, median_z=float(np.median(batch.z)))
    elif cmd == "detect":
        lab = prepare(cfg, "fit", store)
        src = Path(spec.input) if spec.input else out / "watermarked.txt"
        try:
            lines = [line for line in src.read_text(encoding="utf-8").splitlines() if line.strip()]
        except OSError as exc:
            raise StageError("detect", exc) from exc
        reports = [detect(tokenize(line, lab.vocab), lab.watermark, lab.vocab.size) for line in lines]
        out.mkdir(parents=True, exist_ok=True)
        (out / "detections.jsonl").write_text(
            "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports), encoding="utf-8"
        )
        summary.update(n=len(reports), flagged=sum(r.verdict_at_z4 for r in reports))
    elif cmd == "distill":
        lab = prepare(cfg, "distill", store)
        rad = radioactivity_score(lab.distillation, lab.watermark, ev.n_student, ev.length,
                                  task_seed(cfg.seed, "student"), lab.prompts, ev.temperature)
        record = {k: v for k, v in rad.to_dict().items() if k != "reports"}
        (out / "radioactivity.json").write_text(dumps(record), encoding="utf-8")
        summary.update(sequences=len(lab.dataset), median_z=rad.median_z, pooled_p=rad.pooled_p)
    elif cmd == "extract":
        lab = prepare(cfg, "extract", store)
        summary.update(prefixes=len(lab.ews.local))
    elif cmd == "spoof":
        lab = prepare(cfg, "extract", store)
        n = spec.n or ev.n_positive
        out.mkdir(parents=True, exist_ok=True)
        medians = {}
        record = {"ews_sha256": sha256_file(store.path("ews")), "seed": cfg.seed, "runs": []}
        for alpha in cfg.alphas:
            batch = run_texts(lab, spoof_generator(lab, alpha, ev.length, ev.temperature), n,
                              task_seed(cfg.seed, "spoof"))
            _write_texts(out / f"spoof_alpha{alpha!r}.txt", lab, batch.sequences)
            medians[repr(alpha)] = float(np.median(batch.z))
            record["runs"].append({"alpha": alpha, "n": n, "file": f"spoof_alpha{alpha!r}.txt"})
        (out / "spoof.json").write_text(dumps(record), encoding="utf-8")
        summary.update(n=n, median_z=medians)
    elif cmd == "eval":
        missing = [n for n in ("teacher", "base", "attack", "reference", "student", "ews", "dataset")
                   if store.get(n) is None]
        if missing:
            raise StageError("evaluate", FileNotFoundError(
                f"no up-to-date artifacts for {missing} in {out}; run 'pipeline' or the stage commands first"))
        report = evaluate(prepare(cfg, "extract", store), cfg.alphas)
        emit_report(report, out, ev.fpr_levels)
        summary.update(rows=len(report.rows))
    elif cmd == "sweep":
        report = alpha_sweep(cfg, cfg.sweep_alphas, store)
        emit_report(report, out, ev.fpr_levels)
        summary.update(rows=len(report.rows))
    elif cmd == "pipeline":
        report = evaluate(prepare(cfg, "extract", store), cfg.alphas)
        emit_report(report, out, ev.fpr_levels)
        summary.update(rows=len(report.rows))
    return _finish(out, cfg, summary)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        spec = parse_args(argv)
    except SystemExit as exc:  # argparse: help/version exit 0, usage errors exit 2
        return int(exc.code or 0)
    try:
        execute(spec)
    except ConfigError as exc:
        print(f"wmspoof: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, WmSpoofError, OSError) as exc:
        print(f"wmspoof: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
