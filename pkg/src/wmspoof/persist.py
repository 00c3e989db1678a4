"""On-disk formats for models, EWS tables, watermarked corpora and run manifests.

Model and table files are gzip-compressed JSON envelopes::

    {"format": "wmspoof.model", "version": 1, "meta": {...}, "payload": {...}}

written with sorted keys and a zeroed gzip timestamp, so saving the same
object twice gives the same bytes.  Corpora are plain text: a ``#``-prefixed
provenance header followed by one ``prompt_len<TAB>ids`` record per line,
with the creation transcript in a sidecar file.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
from pathlib import Path
from typing import Optional, Union

from . import __version__
from .distill import WatermarkedCorpus
from .errors import FormatError, VocabMismatch
from .extract import EwsTable
from .textmodel import NGramModel

FORMAT_VERSION = 1
MODEL_FORMAT = "wmspoof.model"
EWS_FORMAT = "wmspoof.ews"
CORPUS_HEADER = "# wmspoof.corpus v1"
TRANSCRIPT_HEADER = "# wmspoof.transcript v1"
MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]


def dumps(obj) -> str:
    """Canonical JSON used for every artifact and report."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_envelope(path: PathLike, fmt: str, payload: dict, meta: Optional[dict]) -> None:
    doc = {"format": fmt, "version": FORMAT_VERSION, "meta": meta or {}, "payload": payload}
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
        gz.write(dumps(doc).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def _read_envelope(path: PathLike, fmt: str) -> tuple[dict, dict]:
    try:
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise FormatError(f"{path} is not a {fmt} file")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path} has format version {doc.get('version')}, expected {FORMAT_VERSION}")
    return doc["payload"], doc.get("meta", {})


def save_model(model: NGramModel, path: PathLike, meta: Optional[dict] = None) -> None:
    _write_envelope(path, MODEL_FORMAT, model.to_dict(), meta)


def load_model(path: PathLike, expect_vocab_hash: Optional[str] = None) -> NGramModel:
    payload, _ = _read_envelope(path, MODEL_FORMAT)
    try:
        model = NGramModel.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model in {path}: {exc}") from None
    if expect_vocab_hash is not None and model.vocab.fingerprint() != expect_vocab_hash:
        raise VocabMismatch(f"{path} uses a different vocabulary")
    return model


def save_ews(table: EwsTable, path: PathLike, meta: Optional[dict] = None) -> None:
    _write_envelope(path, EWS_FORMAT, table.to_dict(), meta)


def load_ews(path: PathLike, expect_vocab_hash: Optional[str] = None) -> EwsTable:
    payload, _ = _read_envelope(path, EWS_FORMAT)
    try:
        table = EwsTable.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed EWS table in {path}: {exc}") from None
    if expect_vocab_hash is not None and table.vocab_hash != expect_vocab_hash:
        raise VocabMismatch(f"{path} was extracted under a different vocabulary")
    return table


def read_meta(path: PathLike) -> dict:
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        return json.load(fh).get("meta", {})


def transcript_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".transcript")


def save_corpus(corpus: WatermarkedCorpus, path: PathLike) -> None:
    lines = [CORPUS_HEADER, "# " + json.dumps(corpus.provenance, sort_keys=True)]
    for seq, plen in zip(corpus.sequences, corpus.prompt_lengths):
        lines.append(f"{plen}\t{' '.join(map(str, seq))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    side = [TRANSCRIPT_HEADER] + [" ".join(map(str, t)) for t in corpus.transcripts]
    transcript_path(path).write_text("\n".join(side) + "\n", encoding="utf-8")


def load_corpus(path: PathLike, expect_vocab_hash: Optional[str] = None) -> WatermarkedCorpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0] != CORPUS_HEADER or not lines[1].startswith("# "):
        raise FormatError(f"{path} is not a wmspoof corpus file")
    try:
        provenance = json.loads(lines[1][2:])
        seqs, plens = [], []
        for line in lines[2:]:
            plen, _, ids = line.partition("\t")
            plens.append(int(plen))
            seqs.append([int(t) for t in ids.split()])
    except ValueError as exc:
        raise FormatError(f"malformed record in {path}: {exc}") from None
    if expect_vocab_hash is not None and provenance.get("vocab_hash") != expect_vocab_hash:
        raise VocabMismatch(f"{path} was generated under a different vocabulary")
    side = transcript_path(path)
    transcripts = [[] for _ in seqs]
    if side.exists():
        tl = side.read_text(encoding="utf-8").splitlines()
        if not tl or tl[0] != TRANSCRIPT_HEADER or len(tl) - 1 != len(seqs):
            raise FormatError(f"{side} does not match {path}")
        transcripts = [[int(t) for t in line.split()] for line in tl[1:]]
    return WatermarkedCorpus(seqs, plens, transcripts, provenance)


def key_digest(key: int, salt: str) -> str:
    """Salted hash of the watermark key; the only form of the key that is ever written out."""
    return hashlib.sha256(f"{salt}:{key:016x}".encode()).hexdigest()


def write_manifest(
    directory: PathLike,
    config_hash: str,
    seed: int,
    key: Optional[int] = None,
    extra: Optional[dict] = None,
) -> dict:
    """Record config hash, seed, tool version and the sha256 of every file in ``directory``."""
    directory = Path(directory)
    artifacts = {
        p.relative_to(directory).as_posix(): sha256_file(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }
    manifest = {
        "tool": "wmspoof",
        "tool_version": __version__,
        "config_hash": config_hash,
        "seed": int(seed),
        "artifacts": artifacts,
    }
    if key is not None:
        manifest["key_salt"] = config_hash[:16]
        manifest["key_hash"] = key_digest(key, config_hash[:16])
    if extra:
        manifest.update(extra)
    (directory / MANIFEST_NAME).write_text(dumps(manifest), encoding="utf-8")
    return manifest
