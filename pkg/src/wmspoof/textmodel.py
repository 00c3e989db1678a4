"""Tokenization, additive-smoothed backoff n-gram models, sampling and perplexity.

The n-gram model is the stand-in for every language model in the attack:
watermarked teacher, student base, distilled student, attack model and the
perplexity reference.  Logits are log-probabilities, so differences between
two models' logits are well defined without any per-context gauge fixing.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import CorpusTooSmall, EmptyCorpus, EmptySequence, InvalidLogits, VocabMismatch

BOS = "<bos>"
UNK = "<unk>"
BOS_ID = 0
UNK_ID = 1
MODES = ("whitespace", "character", "byte")

TokenSeq = Sequence[int]
# (context, logits) -> logits; the hook shared by watermarking and spoofing
LogitTransform = Callable[[Sequence[int], np.ndarray], np.ndarray]
Sampler = Callable[[Sequence[int], np.ndarray, np.random.Generator], int]


def split_text(text: str, mode: str) -> list[str]:
    if mode == "whitespace":
        return text.split()
    if mode == "character":
        return [ch for ch in text if ch not in "\r\n"]
    if mode == "byte":
        return [chr(b) for b in text.encode("utf-8") if b not in (10, 13)]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def corpus_lines(text: str) -> list[str]:
    """Non-blank lines; each line is one training sequence."""
    return [line for line in text.splitlines() if line.strip()]


def read_corpus(path: Union[str, Path]) -> str:
    return Path(path).read_text(encoding="utf-8")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mode: str = "whitespace"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if len(self.tokens) < 2 or self.tokens[BOS_ID] != BOS or self.tokens[UNK_ID] != UNK:
            raise ValueError("vocabulary must start with the reserved BOS and UNK tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.mode.encode())
        for tok in self.tokens:
            h.update(b"\x00" + tok.encode("utf-8", "surrogatepass"))
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(tuple(data["tokens"]), data["mode"])


def build_vocab(corpus: str, mode: str = "whitespace", max_size: int = 2000) -> Vocabulary:
    """The ``max_size`` most frequent tokens (ties broken lexicographically) plus BOS/UNK."""
    counts = Counter(split_text(corpus, mode))
    counts.pop(BOS, None)
    counts.pop(UNK, None)
    if not counts:
        raise EmptyCorpus("corpus contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary((BOS, UNK) + tuple(tok for tok, _ in ranked), mode)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(tok) for tok in split_text(text, vocab.mode)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    toks = [vocab.tokens[i] for i in ids]
    if vocab.mode == "whitespace":
        return " ".join(toks)
    if vocab.mode == "character":
        return "".join(toks)
    raw = bytes(ord(t) if len(t) == 1 else ord("?") for t in toks)
    return raw.decode("utf-8", errors="replace")


def _as_sequences(tokens) -> list[list[int]]:
    if len(tokens) and not isinstance(tokens[0], (int, np.integer)):
        return [list(map(int, s)) for s in tokens]
    return [list(map(int, tokens))]


def count_ngrams(
    sequences: Sequence[Sequence[int]],
    order: int,
    vocab_size: int,
    starts: Optional[Sequence[int]] = None,
) -> list[dict]:
    """Per context length j = 0..order, a table ``context code -> (ids, counts, total)``.

    A context code is the base-|V| integer of the context tokens, most
    recent token least significant.  Sequences are BOS-padded on the left;
    ``starts[i]`` is the first target position counted in sequence i.
    """
    if vocab_size ** (order + 1) >= 2**63:
        raise ValueError("vocabulary too large for this order (context codes overflow int64)")
    padded, targets = [], []
    offset = 0
    for i, seq in enumerate(sequences):
        start = starts[i] if starts is not None else 0
        row = np.concatenate([np.full(order, BOS_ID, dtype=np.int64), np.asarray(seq, dtype=np.int64)])
        padded.append(row)
        targets.append(np.arange(offset + order + start, offset + len(row), dtype=np.int64))
        offset += len(row)
    flat = np.concatenate(padded) if padded else np.zeros(0, dtype=np.int64)
    tgt = np.concatenate(targets) if targets else np.zeros(0, dtype=np.int64)

    levels = []
    V = np.int64(vocab_size)
    for j in range(order + 1):
        code = np.zeros(len(tgt), dtype=np.int64)
        for r in range(j):
            code = code * V + flat[tgt - j + r]
        full = code * V + flat[tgt]
        uniq, cnt = np.unique(full, return_counts=True)
        ctx, tok = uniq // V, uniq % V
        table = {}
        if len(uniq):
            cuts = np.flatnonzero(np.diff(ctx)) + 1
            for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(uniq)]):
                c = cnt[lo:hi]
                table[int(ctx[lo])] = (tok[lo:hi].copy(), c.astype(np.float64), float(c.sum()))
        levels.append(table)
    return levels


class NGramModel:
    """Additive-smoothed n-gram model with longest-seen-suffix backoff.

    ``order`` is the number of conditioning tokens.  A model may carry a
    ``prior`` model: its distribution is then ``(1 - prior_mix) * own +
    prior_mix * prior``, which is how the distilled student keeps part of its
    initialization.
    """

    _CACHE_LIMIT = 200_000

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        smoothing: float,
        levels: list[dict],
        prior: Optional["NGramModel"] = None,
        prior_mix: float = 0.0,
    ):
        if order < 0:
            raise ValueError("order must be >= 0")
        if not smoothing > 0:
            raise ValueError("smoothing must be > 0")
        if not 0.0 <= prior_mix <= 1.0:
            raise ValueError("prior_mix must lie in [0, 1]")
        if prior is not None and prior.vocab.fingerprint() != vocab.fingerprint():
            raise VocabMismatch("prior model uses a different vocabulary")
        self.vocab = vocab
        self.order = order
        self.smoothing = float(smoothing)
        self.levels = levels
        self.prior = prior
        self.prior_mix = float(prior_mix) if prior is not None else 0.0
        self._cache: dict = {}

    @classmethod
    def uniform(cls, vocab: Vocabulary, smoothing: float = 1.0) -> "NGramModel":
        return cls(vocab, 0, smoothing, [{}])

    @property
    def window(self) -> int:
        """Number of trailing context tokens the output depends on."""
        if self.prior is not None:
            return max(self.order, self.prior.window)
        return self.order

    def _key(self, context: Sequence[int]) -> tuple:
        w = self.window
        if w == 0:
            return ()
        tail = tuple(int(t) for t in context[-w:])
        if len(tail) < w:
            tail = (BOS_ID,) * (w - len(tail)) + tail
        return tail

    def _own_probs(self, key: tuple) -> np.ndarray:
        V = self.vocab.size
        ctx = key[len(key) - self.order:] if self.order else ()
        for j in range(self.order, -1, -1):
            code = 0
            for t in ctx[len(ctx) - j:]:
                code = code * V + t
            hit = self.levels[j].get(code) if j < len(self.levels) else None
            if hit is not None:
                ids, counts, total = hit
                p = np.full(V, self.smoothing)
                p[ids] += counts
                return p / (total + self.smoothing * V)
        return np.full(V, 1.0 / V)

    def probs(self, context: Sequence[int]) -> np.ndarray:
        return np.exp(self.logits(context))

    def logits(self, context: Sequence[int]) -> np.ndarray:
        """Log-probabilities of every next token; read-only array."""
        key = self._key(context)
        out = self._cache.get(key)
        if out is not None:
            return out
        p = self._own_probs(key)
        if self.prior is not None and self.prior_mix > 0.0:
            p = (1.0 - self.prior_mix) * p + self.prior_mix * np.exp(self.prior.logits(key))
        out = np.log(p)
        out.flags.writeable = False
        if len(self._cache) >= self._CACHE_LIMIT:
            self._cache.clear()
        self._cache[key] = out
        return out

    def log_prob(self, context: Sequence[int], token: int) -> float:
        return float(self.logits(context)[token])

    def to_dict(self) -> dict:
        V = self.vocab.size
        levels = []
        for j, table in enumerate(self.levels):
            rows = []
            for code in sorted(table):
                ctx, c = [], code
                for _ in range(j):
                    c, t = divmod(c, V)
                    ctx.append(t)
                ids, counts, _ = table[code]
                rows.append([ctx[::-1], [[int(i), int(n)] for i, n in zip(ids, counts)]])
            levels.append(rows)
        return {
            "vocab": self.vocab.to_dict(),
            "vocab_hash": self.vocab.fingerprint(),
            "order": self.order,
            "smoothing": self.smoothing,
            "levels": levels,
            "prior_mix": self.prior_mix,
            "prior": self.prior.to_dict() if self.prior is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NGramModel":
        vocab = Vocabulary.from_dict(data["vocab"])
        if vocab.fingerprint() != data["vocab_hash"]:
            raise VocabMismatch("stored vocabulary hash does not match stored vocabulary")
        V = vocab.size
        levels = []
        for rows in data["levels"]:
            table = {}
            for ctx, pairs in rows:
                code = 0
                for t in ctx:
                    code = code * V + t
                arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
                counts = arr[:, 1].astype(np.float64)
                table[code] = (arr[:, 0].copy(), counts, float(counts.sum()))
            levels.append(table)
        prior = cls.from_dict(data["prior"]) if data.get("prior") else None
        return cls(vocab, data["order"], data["smoothing"], levels, prior, data.get("prior_mix", 0.0))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def fit_ngram(
    tokens,
    vocab: Vocabulary,
    order: int = 2,
    smoothing: float = 0.1,
    starts: Optional[Sequence[int]] = None,
) -> NGramModel:
    """Fit on one token sequence or a list of sequences (each BOS-padded)."""
    if not smoothing > 0:
        raise ValueError("smoothing must be > 0")
    seqs = _as_sequences(tokens)
    total = sum(len(s) - (starts[i] if starts is not None else 0) for i, s in enumerate(seqs))
    if total <= order:
        raise CorpusTooSmall(f"{total} training tokens for an order-{order} model")
    V = vocab.size
    for s in seqs:
        if any(t < 0 or t >= V for t in s):
            raise VocabMismatch("token id outside the vocabulary")
    return NGramModel(vocab, order, smoothing, count_ngrams(seqs, order, V, starts))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def sample_next(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """One draw from softmax(logits / temperature) by inverse-CDF lookup."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InvalidLogits("non-finite logit")
    z = logits / temperature
    cdf = np.cumsum(np.exp(z - z.max()))
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)


def generate(
    model: NGramModel,
    prompt: Sequence[int],
    length: int,
    transform: Optional[LogitTransform] = None,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
    sampler: Optional[Sampler] = None,
) -> list[int]:
    """Autoregressively sample ``length`` tokens after ``prompt`` (prompt not returned)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    seq = [int(t) for t in prompt]
    n0 = len(seq)
    for _ in range(length):
        logits = model.logits(seq)
        if transform is not None:
            logits = transform(seq, logits)
        if sampler is None:
            tok = sample_next(logits, temperature, rng)
        else:
            tok = sampler(seq, logits, rng)
        seq.append(tok)
    return seq[n0:]


def perplexity(model: NGramModel, tokens: Sequence[int], start: int = 0) -> float:
    """exp of the mean negative log-likelihood of ``tokens[start:]`` given their prefixes."""
    tokens = [int(t) for t in tokens]
    if len(tokens) - start < 1:
        raise EmptySequence("nothing to score")
    w = model.window
    nll = 0.0
    for t in range(start, len(tokens)):
        nll -= model.logits(tokens[max(0, t - w):t])[tokens[t]]
    return math.exp(nll / (len(tokens) - start))
