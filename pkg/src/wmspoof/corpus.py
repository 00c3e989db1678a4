"""Seeded synthetic text source for runs without a user-supplied corpus.

A first-order Markov chain over ``n_words`` made-up words: Zipfian unigram
popularity, and per word a sparse Dirichlet successor distribution mixed
with a small share of the unigram distribution.  The result is a
high-entropy "language" in which additive-smoothed n-grams learn real
structure from a few hundred thousand tokens.
"""

from __future__ import annotations

import numpy as np


def synthetic_corpus(
    n_lines: int = 16000,
    min_len: int = 20,
    max_len: int = 60,
    n_words: int = 120,
    branching: int = 32,
    unigram_share: float = 0.4,
    zipf: float = 0.8,
    concentration: float = 1.0,
    seed: int = 0,
) -> str:
    rng = np.random.default_rng([seed, 0x5E7])
    words = [f"w{i:03d}" for i in range(n_words)]
    popularity = 1.0 / np.arange(1, n_words + 1) ** zipf
    popularity /= popularity.sum()

    trans = np.zeros((n_words, n_words))
    for a in range(n_words):
        succ = rng.choice(n_words, size=min(branching, n_words), replace=False, p=popularity)
        trans[a, succ] = rng.dirichlet(np.full(len(succ), concentration))
    trans = (1.0 - unigram_share) * trans + unigram_share * popularity
    cdf = np.cumsum(trans, axis=1)
    cdf /= cdf[:, -1:]
    start_cdf = np.cumsum(popularity)

    lines = []
    for _ in range(n_lines):
        n = int(rng.integers(min_len, max_len + 1))
        u = rng.random(n)
        cur = int(np.searchsorted(start_cdf, u[0] * start_cdf[-1], side="right"))
        out = [cur]
        for x in u[1:]:
            cur = int(np.searchsorted(cdf[cur], x, side="right"))
            cur = min(cur, n_words - 1)
            out.append(cur)
        lines.append(" ".join(words[i] for i in out))
    return "\n".join(lines) + "\n"
