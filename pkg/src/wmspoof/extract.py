"""Watermark extraction from averaged logit differences between a distilled student and its base.

The extracted signal for a context is a global bias (the mean logit
difference over every training context) plus, for each stored n-gram
prefix the context ends with, a frequency-weighted local bias (the mean
logit difference over training contexts ending with that prefix).
Averages are taken per token occurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyCorpus, InsufficientSupport, VocabMismatch
from .textmodel import BOS_ID, NGramModel

_CHUNK = 4096


class Census:
    """Every next-token slot of a corpus with its trailing n-grams per order.

    A slot is a target position ``i >= max(start, 1)`` of a sequence, where
    ``start`` is the prompt length when only completions are counted.  The
    order-n prefix of a slot is the n real tokens before it (slots with
    ``i < n`` have none).
    """

    def __init__(self, sequences: Sequence[Sequence[int]], orders: Iterable[int], starts: Optional[Sequence[int]] = None):
        self.orders = tuple(sorted(set(int(n) for n in orders)))
        if not self.orders or self.orders[0] < 1:
            raise ValueError("orders must be a non-empty set of positive ints")
        flat, seq_start, slots = [], [], []
        offset = 0
        for i, seq in enumerate(sequences):
            s0 = max(starts[i] if starts is not None else 0, 1)
            flat.append(np.asarray(seq, dtype=np.int64))
            seq_start.append(np.full(len(seq), offset, dtype=np.int64))
            slots.append(np.arange(offset + s0, offset + len(seq), dtype=np.int64))
            offset += len(seq)
        if not slots or sum(len(s) for s in slots) == 0:
            raise EmptyCorpus("corpus has no scorable next-token slots")
        self.flat = np.concatenate(flat)
        self.seq_start = np.concatenate(seq_start)
        self.slots = np.concatenate(slots)
        self._by_order = {}
        for n in self.orders:
            valid = self.slots[self.slots - n >= self.seq_start[self.slots]]
            codes = self._codes(valid, n)
            uniq, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
            order_idx = np.argsort(inverse, kind="stable")
            bounds = np.r_[0, np.cumsum(counts)]
            self._by_order[n] = (valid, uniq, inverse, counts, valid[order_idx], bounds)

    def _codes(self, slots: np.ndarray, n: int) -> np.ndarray:
        return _tuple_codes([self.flat[slots - n + r] for r in range(n)])

    def __len__(self) -> int:
        """Total census entries over all orders."""
        return sum(len(v[0]) for v in self._by_order.values())

    def prefix_counts(self, order: int) -> dict:
        _, uniq, _, counts, _, _ = self._by_order[order]
        return {_decode(u, order): int(c) for u, c in zip(uniq, counts)}

    def count(self, prefix: Sequence[int]) -> int:
        idx = self._index(prefix)
        return 0 if idx is None else int(self._by_order[len(prefix)][3][idx])

    def _index(self, prefix: Sequence[int]) -> Optional[int]:
        n = len(prefix)
        if n not in self._by_order:
            return None
        uniq = self._by_order[n][1]
        code = _encode(prefix)
        i = int(np.searchsorted(uniq, code))
        return i if i < len(uniq) and uniq[i] == code else None

    def occurrences(self, prefix: Sequence[int]) -> np.ndarray:
        """Flat slot indices whose trailing n-gram equals ``prefix``."""
        idx = self._index(prefix)
        if idx is None:
            return np.zeros(0, dtype=np.int64)
        _, _, _, _, grouped, bounds = self._by_order[len(prefix)]
        return grouped[bounds[idx]:bounds[idx + 1]]

    def contexts(self, slots: np.ndarray, width: int) -> np.ndarray:
        """The ``width`` tokens before each slot, BOS-padded at sequence starts; shape (n, width)."""
        out = np.full((len(slots), width), BOS_ID, dtype=np.int64)
        for r in range(1, width + 1):
            pos = slots - r
            ok = pos >= self.seq_start[slots]
            out[ok, width - r] = self.flat[pos[ok]]
        return out


# Prefix codes are packed into int64 with a fixed 21-bit field per token so
# that codes sort consistently without knowing |V|.
_FIELD = 21
_MAX_ORDER = 3


def _tuple_codes(cols: list) -> np.ndarray:
    code = np.zeros(len(cols[0]) if cols else 0, dtype=np.int64)
    for c in cols:
        code = (code << _FIELD) | c
    return code


def _encode(prefix: Sequence[int]) -> int:
    code = 0
    for t in prefix:
        code = (code << _FIELD) | int(t)
    return code


def _decode(code: int, n: int) -> tuple:
    code = int(code)
    out = []
    for _ in range(n):
        out.append(code & ((1 << _FIELD) - 1))
        code >>= _FIELD
    return tuple(out[::-1])


def collect_contexts(corpus, orders: Iterable[int] = (1, 2), completions_only: bool = True) -> Census:
    """Census of a ``WatermarkedCorpus`` or a plain list of token sequences."""
    orders = tuple(orders)
    if any(n > _MAX_ORDER for n in orders):
        raise ValueError(f"prefix orders above {_MAX_ORDER} are not supported")
    seqs = getattr(corpus, "sequences", corpus)
    if len(seqs) == 0:
        raise EmptyCorpus("corpus has no sequences")
    starts = getattr(corpus, "prompt_lengths", None) if completions_only else None
    return Census(seqs, orders, starts)


def _check_vocab(student: NGramModel, base: NGramModel) -> None:
    if student.vocab.fingerprint() != base.vocab.fingerprint():
        raise VocabMismatch("student and base use different vocabularies")


def _key_diffs(student: NGramModel, base: NGramModel, keys: np.ndarray) -> np.ndarray:
    """Logit differences l_S(c) - l_O(c) for each row of ``keys``; shape (n, |V|)."""
    out = np.empty((len(keys), student.vocab.size))
    for i, row in enumerate(keys):
        ctx = tuple(int(t) for t in row)
        out[i] = student.logits(ctx) - base.logits(ctx)
    return out


def _slot_keys(census: Census, slots: np.ndarray, width: int):
    ctx = census.contexts(slots, width)
    return np.unique(ctx, axis=0, return_inverse=True, return_counts=True)


def _width(student: NGramModel, base: NGramModel, extra: int = 0) -> int:
    return max(student.window, base.window, extra, 1)


def global_bias(student: NGramModel, base: NGramModel, census: Census) -> np.ndarray:
    """Mean over all census slots of the student-minus-base logit difference."""
    _check_vocab(student, base)
    if len(census.slots) == 0:
        raise EmptyCorpus("empty census")
    keys, _, counts = _slot_keys(census, census.slots, _width(student, base))
    acc = np.zeros(student.vocab.size)
    for lo in range(0, len(keys), _CHUNK):
        d = _key_diffs(student, base, keys[lo:lo + _CHUNK])
        acc += counts[lo:lo + _CHUNK] @ d
    return acc / counts.sum()


def local_bias(
    student: NGramModel,
    base: NGramModel,
    census: Census,
    prefix: Sequence[int],
    min_support: int = 5,
) -> np.ndarray:
    """Mean logit difference over census slots whose trailing tokens equal ``prefix``."""
    _check_vocab(student, base)
    occ = census.occurrences(prefix)
    if len(occ) == 0 or len(occ) < min_support:
        raise InsufficientSupport(f"prefix {tuple(prefix)} seen {len(occ)} times (< {min_support})")
    keys, _, counts = _slot_keys(census, occ, _width(student, base))
    d = _key_diffs(student, base, keys)
    return counts @ d / counts.sum()


@dataclass
class LocalBias:
    indices: np.ndarray  # token ids with |bias| >= threshold
    values: np.ndarray
    weight: float
    support: int

    def dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.indices] = self.values
        return out


@dataclass
class EwsTable:
    vocab_size: int
    vocab_hash: str
    global_bias: np.ndarray
    local: dict = field(default_factory=dict)  # prefix tuple -> LocalBias
    orders: tuple = (1, 2)
    threshold: float = 0.05
    cap: int = 5000
    min_support: int = 5

    def __post_init__(self):
        self._cache: dict = {}

    @classmethod
    def empty(cls, vocab_size: int, vocab_hash: str = "", orders=(1, 2)) -> "EwsTable":
        return cls(vocab_size, vocab_hash, np.zeros(vocab_size), {}, tuple(orders))

    def lookup(self, context: Sequence[int]) -> np.ndarray:
        """global + sum of w(p) * delta_p over stored prefixes p that end the context."""
        width = max(self.orders) if self.orders else 0
        tail = tuple(int(t) for t in context[max(0, len(context) - width):])
        hit = self._cache.get(tail)
        if hit is not None:
            return hit
        out = self.global_bias.copy()
        for n in self.orders:
            if len(tail) >= n:
                entry = self.local.get(tail[len(tail) - n:])
                if entry is not None:
                    out[entry.indices] += entry.weight * entry.values
        out.flags.writeable = False
        if len(self._cache) > 200_000:
            self._cache.clear()
        self._cache[tail] = out
        return out

    def without(self, prefix: tuple) -> "EwsTable":
        local = {p: e for p, e in self.local.items() if p != tuple(prefix)}
        return EwsTable(self.vocab_size, self.vocab_hash, self.global_bias, local, self.orders,
                        self.threshold, self.cap, self.min_support)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
            "orders": list(self.orders),
            "threshold": self.threshold,
            "cap": self.cap,
            "min_support": self.min_support,
            "global_bias": [float(x) for x in self.global_bias],
            "local": [
                {
                    "prefix": list(p),
                    "weight": e.weight,
                    "support": e.support,
                    "indices": [int(i) for i in e.indices],
                    "values": [float(v) for v in e.values],
                }
                for p, e in sorted(self.local.items(), key=lambda kv: (len(kv[0]), kv[0]))
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EwsTable":
        local = {
            tuple(e["prefix"]): LocalBias(
                np.asarray(e["indices"], dtype=np.int64),
                np.asarray(e["values"], dtype=np.float64),
                float(e["weight"]),
                int(e["support"]),
            )
            for e in data["local"]
        }
        return cls(
            int(data["vocab_size"]),
            data["vocab_hash"],
            np.asarray(data["global_bias"], dtype=np.float64),
            local,
            tuple(data["orders"]),
            float(data["threshold"]),
            int(data["cap"]),
            int(data["min_support"]),
        )


def ews_lookup(table: EwsTable, context: Sequence[int]) -> np.ndarray:
    return table.lookup(context)


def select_prefixes(census: Census, order: int, cap: int, min_support: int) -> list:
    """The ``cap`` most frequent prefixes of one order with support >= min_support (ties lexicographic)."""
    ranked = sorted(census.prefix_counts(order).items(), key=lambda kv: (-kv[1], kv[0]))
    return [(p, c) for p, c in ranked[:cap] if c >= min_support]


def build_ews(
    student: NGramModel,
    base: NGramModel,
    corpus,
    orders: Iterable[int] = (1, 2),
    cap: int = 5000,
    threshold: float = 0.05,
    min_support: int = 5,
    census: Optional[Census] = None,
) -> EwsTable:
    """Global bias plus sparse local biases of the ``cap`` most frequent prefixes per order.

    w(p) = count(p) / (largest prefix count at p's order); entries with
    |bias| < ``threshold`` are dropped, and so are prefixes left empty.
    """
    _check_vocab(student, base)
    orders = tuple(sorted(set(orders)))
    census = census if census is not None else collect_contexts(corpus, orders)
    V = student.vocab.size
    width = _width(student, base, max(orders))

    keys, key_of_slot, key_counts = _slot_keys(census, census.slots, width)
    key_of_slot = key_of_slot.ravel()
    # flat slot index -> row in census.slots
    row_of = np.full(len(census.flat), -1, dtype=np.int64)
    row_of[census.slots] = np.arange(len(census.slots))

    selected: dict = {}
    pair_tables = []
    for n in orders:
        chosen = select_prefixes(census, n, cap, min_support)
        if not chosen:
            continue
        max_count = max(census.prefix_counts(n).values())
        for p, c in chosen:
            selected[p] = (len(selected), c, c / max_count)
        # (selected prefix id, key id) pairs with multiplicities
        valid, uniq, inverse, _, _, _ = census._by_order[n]
        code_to_sel = {int(_encode(p)): selected[p][0] for p, _ in chosen}
        sel_of_uniq = np.array([code_to_sel.get(int(u), -1) for u in uniq], dtype=np.int64)
        sel = sel_of_uniq[inverse]
        keep = sel >= 0
        kid = key_of_slot[row_of[valid[keep]]]
        pair = sel[keep] * len(keys) + kid
        up, pc = np.unique(pair, return_counts=True)
        pair_tables.append((up // len(keys), up % len(keys), pc))

    acc_global = np.zeros(V)
    acc_local = np.zeros((len(selected), V))
    if pair_tables:
        p_sel = np.concatenate([t[0] for t in pair_tables])
        p_key = np.concatenate([t[1] for t in pair_tables])
        p_cnt = np.concatenate([t[2] for t in pair_tables]).astype(np.float64)
        by_key = np.argsort(p_key, kind="stable")
        p_sel, p_key, p_cnt = p_sel[by_key], p_key[by_key], p_cnt[by_key]
    else:
        p_key = np.zeros(0, dtype=np.int64)
    for lo in range(0, len(keys), _CHUNK):
        hi = min(lo + _CHUNK, len(keys))
        d = _key_diffs(student, base, keys[lo:hi])
        acc_global += key_counts[lo:hi] @ d
        if pair_tables:
            a, b = np.searchsorted(p_key, [lo, hi])
            if b > a:
                np.add.at(acc_local, p_sel[a:b], d[p_key[a:b] - lo] * p_cnt[a:b, None])

    local = {}
    for p, (idx, count, weight) in selected.items():
        delta = acc_local[idx] / count
        nz = np.flatnonzero(np.abs(delta) >= threshold)
        if len(nz):
            local[p] = LocalBias(nz, delta[nz], float(weight), int(count))
    return EwsTable(
        V,
        student.vocab.fingerprint(),
        acc_global / key_counts.sum(),
        local,
        orders,
        float(threshold),
        int(cap),
        int(min_support),
    )
