"""Watermark injection and detection for two scheme families.

GreenList: per context a keyed pseudorandom gamma-fraction of the
vocabulary is "green" and receives a logit bonus delta; detection counts
green hits and applies a one-proportion z-test.

Tournament: 2**m candidates are drawn from the model and pass through m
knockout layers, each keeping the candidate with the larger keyed binary
g-value.  Detection sums g-values over positions and layers; under the null
each is an independent fair bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, NoScorableTokens
from .hashing import TAG_GREEN, TAG_TOURNAMENT, context_seed, token_hashes
from .textmodel import BOS_ID, Vocabulary, sample_next, softmax

GREENLIST = "greenlist"
TOURNAMENT = "tournament"
SCHEMES = (GREENLIST, TOURNAMENT)
Z_THRESHOLD = 4.0


@dataclass(frozen=True)
class WatermarkConfig:
    scheme: str = GREENLIST
    key: int = 0x5EED_CAFE_F00D_0001
    gamma: float = 0.5
    delta: float = 3.0
    context_width: int = 1
    tournament_depth: int = 4

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 <= self.key < 2**64:
            raise ConfigError("key", "must be a 64-bit unsigned integer")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma", f"must lie in (0, 1), got {self.gamma}")
        if not (self.delta >= 0.0 and math.isfinite(self.delta)):
            raise ConfigError("delta", f"must be finite and >= 0, got {self.delta}")
        if not 1 <= self.context_width <= 4:
            raise ConfigError("context_width", f"must lie in [1, 4], got {self.context_width}")
        if self.tournament_depth < 1:
            raise ConfigError("tournament_depth", f"must be >= 1, got {self.tournament_depth}")


@dataclass(frozen=True)
class GreenPartition:
    green: np.ndarray  # sorted green token ids
    mask: np.ndarray  # boolean membership over the vocabulary
    context_hash: int

    def __contains__(self, token: int) -> bool:
        return bool(self.mask[token])

    def __len__(self) -> int:
        return len(self.green)


@dataclass(frozen=True)
class DetectionReport:
    scheme: str
    T: int
    statistic: float  # green hits (greenlist) or mean g-value (tournament)
    z: float
    p: float
    verdict_at_z4: bool

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionReport":
        return cls(**data)


def window_of(context: Sequence[int], k: int) -> tuple:
    tail = tuple(int(t) for t in context[len(context) - k:]) if k else ()
    if len(tail) < k:
        tail = (BOS_ID,) * (k - len(tail)) + tail
    return tail


def green_size(gamma: float, vocab_size: int) -> int:
    return int(math.floor(gamma * vocab_size + 0.5))


@lru_cache(maxsize=1 << 16)
def _green(key: int, window: tuple, gamma: float, vocab_size: int) -> GreenPartition:
    seed = context_seed(key, TAG_GREEN, window)
    # Ranking ids by their keyed hash is a seeded uniform shuffle.
    order = np.argsort(token_hashes(seed, np.arange(vocab_size)), kind="stable")
    green = np.sort(order[: green_size(gamma, vocab_size)])
    mask = np.zeros(vocab_size, dtype=bool)
    mask[green] = True
    green.flags.writeable = False
    mask.flags.writeable = False
    return GreenPartition(green, mask, seed)


def green_list(
    key: int,
    context: Sequence[int],
    gamma: float,
    vocab: "Vocabulary | int",
    context_width: int = 1,
) -> GreenPartition:
    """Partition derived from (key, last ``context_width`` tokens, |V|); BOS-padded."""
    size = vocab if isinstance(vocab, int) else vocab.size
    return _green(int(key), window_of(context, context_width), float(gamma), int(size))


def kgw_transform(logits: np.ndarray, partition: GreenPartition, delta: float) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64) + delta * partition.mask


class GreenListWatermark:
    """Logit transform for ``generate``; remembers the last partition it applied."""

    def __init__(self, config: WatermarkConfig, vocab_size: int):
        self.config = config
        self.vocab_size = vocab_size
        self.last_partition: Optional[GreenPartition] = None

    def partition(self, context: Sequence[int]) -> GreenPartition:
        c = self.config
        return green_list(c.key, context, c.gamma, self.vocab_size, c.context_width)

    def __call__(self, context: Sequence[int], logits: np.ndarray) -> np.ndarray:
        self.last_partition = self.partition(context)
        return kgw_transform(logits, self.last_partition, self.config.delta)


def z_score(green_count: float, T: int, gamma: float) -> float:
    if T < 1:
        raise NoScorableTokens("no scored tokens")
    return (green_count - gamma * T) / math.sqrt(T * gamma * (1.0 - gamma))


def p_value(z: float) -> float:
    """One-sided upper-tail normal probability."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _report(scheme: str, T: int, statistic: float, z: float, p: float) -> DetectionReport:
    return DetectionReport(scheme, int(T), float(statistic), float(z), float(p), bool(z >= Z_THRESHOLD))


def _scored_positions(n: int, k: int, start: int) -> range:
    first = max(k, start)
    if n - first < 1:
        raise NoScorableTokens(f"{n} tokens leave nothing to score with context width {k}")
    return range(first, n)


def green_hits(tokens: Sequence[int], config: WatermarkConfig, vocab_size: int, start: int = 0) -> list[bool]:
    tokens = [int(t) for t in tokens]
    k = config.context_width
    return [
        tokens[t] in green_list(config.key, tokens[t - k:t], config.gamma, vocab_size, k)
        for t in _scored_positions(len(tokens), k, start)
    ]


def detect_greenlist(
    tokens: Sequence[int],
    config: WatermarkConfig,
    vocab_size: int,
    start: int = 0,
    exact: bool = False,
) -> DetectionReport:
    """Score positions ``t >= max(k, start)`` against the partition of their k predecessors.

    Repeated (context, token) pairs all count.  With ``exact`` and fewer than
    30 scored tokens the p-value comes from the binomial tail instead.
    """
    hits = green_hits(tokens, config, vocab_size, start)
    T, g = len(hits), sum(hits)
    z = z_score(g, T, config.gamma)
    if exact and T < 30:
        p = float(stats.binom.sf(g - 1, T, config.gamma))
    else:
        p = p_value(z)
    return _report(GREENLIST, T, g, z, p)


@lru_cache(maxsize=1 << 16)
def _g_table(key: int, window: tuple, depth: int, vocab_size: int) -> np.ndarray:
    ids = np.arange(vocab_size)
    table = np.empty((depth, vocab_size), dtype=np.int8)
    for j in range(depth):
        seed = context_seed(key, TAG_TOURNAMENT + j, window)
        table[j] = (token_hashes(seed, ids) & np.uint64(1)).astype(np.int8)
    table.flags.writeable = False
    return table


def g_values(key: int, context: Sequence[int], depth: int, vocab_size: int, context_width: int = 1) -> np.ndarray:
    """Binary g-values, shape (depth, |V|), for the given context."""
    return _g_table(int(key), window_of(context, context_width), int(depth), int(vocab_size))


def tournament_sample(
    base_logits: np.ndarray,
    key: int,
    context: Sequence[int],
    m: int,
    rng: np.random.Generator,
    context_width: int = 1,
    temperature: float = 1.0,
) -> int:
    """Knockout tournament over 2**m i.i.d. candidates; ties keep the first of each pair."""
    if m == 0:
        return sample_next(base_logits, temperature, rng)
    cdf = np.cumsum(softmax(base_logits, temperature))
    u = rng.random(2**m) * cdf[-1]
    cands = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    g = g_values(key, context, m, len(cdf), context_width)
    for j in range(m):
        a, b = cands[0::2], cands[1::2]
        cands = np.where(g[j, b] > g[j, a], b, a)
    return int(cands[0])


class TournamentSampler:
    """Sampler hook for ``generate`` implementing tournament sampling."""

    def __init__(self, config: WatermarkConfig, temperature: float = 1.0):
        self.config = config
        self.temperature = temperature

    def __call__(self, context: Sequence[int], logits: np.ndarray, rng: np.random.Generator) -> int:
        c = self.config
        return tournament_sample(logits, c.key, context, c.tournament_depth, rng, c.context_width, self.temperature)


def g_sums(tokens: Sequence[int], config: WatermarkConfig, vocab_size: int, start: int = 0) -> list[int]:
    tokens = [int(t) for t in tokens]
    k, m = config.context_width, config.tournament_depth
    return [
        int(g_values(config.key, tokens[t - k:t], m, vocab_size, k)[:, tokens[t]].sum())
        for t in _scored_positions(len(tokens), k, start)
    ]


def detect_tournament(
    tokens: Sequence[int], config: WatermarkConfig, vocab_size: int, start: int = 0
) -> DetectionReport:
    """z = (sum g - mT/2) / sqrt(mT/4) over all scored positions and layers."""
    sums = g_sums(tokens, config, vocab_size, start)
    T, m = len(sums), config.tournament_depth
    total = sum(sums)
    z = (total - m * T / 2.0) / math.sqrt(m * T / 4.0)
    return _report(TOURNAMENT, T, total / (m * T), z, p_value(z))


def detect(tokens: Sequence[int], config: WatermarkConfig, vocab_size: int, start: int = 0) -> DetectionReport:
    if config.scheme == TOURNAMENT:
        return detect_tournament(tokens, config, vocab_size, start)
    return detect_greenlist(tokens, config, vocab_size, start)


def z_spacing(report: DetectionReport, config: WatermarkConfig) -> float:
    """Gap between adjacent attainable z-scores for a text of this length (one more hit)."""
    if report.scheme == TOURNAMENT:
        return 1.0 / math.sqrt(config.tournament_depth * report.T / 4.0)
    return 1.0 / math.sqrt(report.T * config.gamma * (1.0 - config.gamma))
