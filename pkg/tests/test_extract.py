from collections import Counter

import numpy as np
import pytest

from wmspoof.distill import WatermarkedCorpus, fit_student, generate_dataset
from wmspoof.errors import EmptyCorpus, InsufficientSupport, VocabMismatch
from wmspoof.extract import (
    Census,
    EwsTable,
    LocalBias,
    build_ews,
    collect_contexts,
    ews_lookup,
    global_bias,
    local_bias,
    select_prefixes,
)
from wmspoof.textmodel import NGramModel, build_vocab, fit_ngram
from wmspoof.watermark import WatermarkConfig, green_list

KEY = 0x0BAD_5EED_0000_0042


def brute_census(seqs, order, starts=None):
    out = Counter()
    for i, s in enumerate(seqs):
        first = max(order, starts[i] if starts else 0, 1)
        for t in range(first, len(s)):
            out[tuple(s[t - order:t])] += 1
    return dict(out)


class Shifted(NGramModel):
    """Base model with +c added to the log-scores of a fixed token set, renormalized."""

    def __init__(self, base, group, c):
        super().__init__(base.vocab, base.order, base.smoothing, base.levels)
        self.base, self.group, self.c = base, np.asarray(group), c

    @property
    def window(self):
        return self.base.window

    def logits(self, context):
        l = np.array(self.base.logits(context))
        l[self.group] += self.c
        return l - np.logaddexp.reduce(l)


@pytest.fixture(scope="module")
def pair(small_seqs, small_vocab):
    teacher = fit_ngram(small_seqs[0::2], small_vocab, order=2)
    base = fit_ngram(small_seqs[1::2], small_vocab, order=2)
    prompts = [s[:4] for s in small_seqs[1::2][:40]]
    cfg = WatermarkConfig(key=KEY)
    ds = generate_dataset(teacher, cfg, prompts, 1500, 48, seed=1)
    return fit_student(base, ds, 0.3), cfg


# ---------------------------------------------------------------- census


def test_census_hand_count():
    c = collect_contexts([[2, 3, 2]], orders=(1,))
    assert c.prefix_counts(1) == {(2,): 1, (3,): 1}


def test_census_entry_count_identity():
    L = 9
    c = collect_contexts([list(range(2, 2 + L))], orders=(1, 2))
    assert sum(c.prefix_counts(1).values()) + sum(c.prefix_counts(2).values()) == (L - 1) + (L - 2)


def test_census_matches_sliding_window_recount(small_seqs):
    seqs = small_seqs[:200]
    starts = [i % 5 for i in range(len(seqs))]
    c = Census(seqs, (1, 2, 3), starts)
    for n in (1, 2, 3):
        assert c.prefix_counts(n) == brute_census(seqs, n, starts)


def test_census_occurrences(small_seqs):
    seqs = small_seqs[:50]
    c = Census(seqs, (1,))
    prefix, count = select_prefixes(c, 1, 1, 1)[0]
    assert len(c.occurrences(prefix)) == count == c.count(prefix)
    assert c.count((999_999,)) == 0


def test_census_empty():
    with pytest.raises(EmptyCorpus):
        collect_contexts([], (1,))


def test_census_completions_only(pair):
    res, _ = pair
    ds = res.dataset
    masked = collect_contexts(ds, (1,))
    full = collect_contexts(ds, (1,), completions_only=False)
    assert sum(full.prefix_counts(1).values()) > sum(masked.prefix_counts(1).values())
    assert masked.prefix_counts(1) == brute_census(ds.sequences, 1, ds.prompt_lengths)


# ---------------------------------------------------------------- biases


def test_identical_models_give_zero(pair):
    res, _ = pair
    c = collect_contexts(res.dataset, (1, 2))
    assert np.all(global_bias(res.base, res.base, c) == 0.0)
    prefix = select_prefixes(c, 1, 1, 5)[0][0]
    assert np.all(local_bias(res.base, res.base, c, prefix) == 0.0)
    t = build_ews(res.base, res.base, res.dataset, census=c)
    assert np.all(t.global_bias == 0.0) and t.local == {}
    for ctx in ([2, 3], [5], []):
        assert np.all(t.lookup(ctx) == 0.0)


def test_synthetic_shift_ranks_group_first(small_seqs, small_vocab):
    base = fit_ngram(small_seqs, small_vocab, order=1)
    group = [3, 5, 8, 13, 21]
    student = Shifted(base, group, 2.0)
    c = Census(small_seqs[:100], (1,))
    g = global_bias(student, base, c)
    rest = np.setdiff1d(np.arange(small_vocab.size), group)
    assert g[group].min() > g[rest].max()


def test_global_bias_is_occurrence_weighted_mean(pair):
    res, _ = pair
    c = collect_contexts(res.dataset, (1,))
    seqs = res.dataset.sequences
    acc, n = np.zeros(res.student.vocab.size), 0
    for s, p in zip(seqs, res.dataset.prompt_lengths):
        for t in range(max(p, 1), len(s)):
            acc += res.student.logits(s[:t]) - res.base.logits(s[:t])
            n += 1
    np.testing.assert_allclose(global_bias(res.student, res.base, c), acc / n, atol=1e-10)


def test_local_bias_errors(pair, small_vocab):
    res, _ = pair
    c = collect_contexts(res.dataset, (1, 2))
    rare = [p for p, n in c.prefix_counts(2).items() if n == 1][0]
    with pytest.raises(InsufficientSupport):
        local_bias(res.student, res.base, c, rare, min_support=5)
    with pytest.raises(InsufficientSupport):
        local_bias(res.student, res.base, c, (10_000,))
    other = fit_ngram([2, 3, 2, 3, 2], build_vocab("x y z"), order=1)
    with pytest.raises(VocabMismatch):
        global_bias(res.student, other, c)


def test_local_bias_separates_green_tokens(pair):
    res, cfg = pair
    c = collect_contexts(res.dataset, (1,))
    V = res.student.vocab.size
    wins = 0
    top = select_prefixes(c, 1, 100, 5)
    for p, _ in top:
        d = local_bias(res.student, res.base, c, p)
        mask = green_list(cfg.key, p, cfg.gamma, V).mask
        wins += d[mask].mean() - d[~mask].mean() >= 0
    assert wins / len(top) >= 0.85


# ---------------------------------------------------------------- table


def test_cap_keeps_most_frequent(pair):
    res, _ = pair
    c = collect_contexts(res.dataset, (1, 2))
    t = build_ews(res.student, res.base, res.dataset, cap=10, census=c, threshold=0.0)
    for n in (1, 2):
        stored = [p for p in t.local if len(p) == n]
        assert len(stored) <= 10
        ranked = sorted(c.prefix_counts(n).items(), key=lambda kv: (-kv[1], kv[0]))[:10]
        assert set(stored) == {p for p, _ in ranked}


def test_table_invariants(pair):
    res, _ = pair
    t = build_ews(res.student, res.base, res.dataset, min_support=5)
    c = collect_contexts(res.dataset, (1, 2))
    assert t.local
    for n in (1, 2):
        entries = [(p, e) for p, e in t.local.items() if len(p) == n]
        assert max(e.weight for _, e in entries) <= 1.0
        for p, e in entries:
            assert e.support >= 5 and e.support == c.count(p)
            assert 0 < e.weight <= 1
            assert np.all(np.abs(e.values) >= t.threshold) and np.all(np.isfinite(e.values))
        # weight order follows count order
        for (p1, e1) in entries[:30]:
            for (p2, e2) in entries[:30]:
                assert (e1.weight >= e2.weight) == (e1.support >= e2.support)


def test_local_entries_match_direct_local_bias(pair):
    res, _ = pair
    c = collect_contexts(res.dataset, (1, 2))
    t = build_ews(res.student, res.base, res.dataset, census=c, threshold=0.0)
    for p in list(t.local)[:15]:
        np.testing.assert_allclose(t.local[p].dense(t.vocab_size), local_bias(res.student, res.base, c, p),
                                   atol=1e-10)


def test_lookup_matches_naive_scan(pair):
    res, _ = pair
    t = build_ews(res.student, res.base, res.dataset)
    rng = np.random.default_rng(3)
    contexts = [list(rng.integers(0, t.vocab_size, size=int(rng.integers(0, 5)))) for _ in range(40)]
    contexts += [s[:k] for s in res.dataset.sequences[:20] for k in (5, 9)]
    for ctx in contexts:
        expected = t.global_bias.copy()
        for p, e in t.local.items():  # scan every stored prefix
            if len(ctx) >= len(p) and tuple(ctx[len(ctx) - len(p):]) == p:
                expected += e.weight * e.dense(t.vocab_size)
        np.testing.assert_allclose(ews_lookup(t, ctx), expected, atol=1e-12)


def test_lookup_empty_and_single_prefix():
    t = EwsTable.empty(6)
    assert np.all(t.lookup([1, 2]) == 0.0)
    g = np.array([0.1, 0, 0, 0, 0, -0.2])
    loc = {(3,): LocalBias(np.array([1, 4]), np.array([0.5, -0.7]), 1.0, 9)}
    t = EwsTable(6, "", g, loc, (1, 2))
    np.testing.assert_allclose(t.lookup([5, 3]), g + loc[(3,)].dense(6))
    np.testing.assert_allclose(t.lookup([5, 2]), g)


def test_removing_prefix_subtracts_its_term(pair):
    res, _ = pair
    t = build_ews(res.student, res.base, res.dataset)
    for p in list(t.local)[:10]:
        ctx = [2] * 3 + list(p)
        e = t.local[p]
        np.testing.assert_allclose(t.lookup(ctx) - t.without(p).lookup(ctx), e.weight * e.dense(t.vocab_size),
                                   atol=1e-12)


def test_dict_roundtrip(pair):
    res, _ = pair
    t = build_ews(res.student, res.base, res.dataset)
    r = EwsTable.from_dict(t.to_dict())
    for ctx in ([2, 3], [7], []):
        np.testing.assert_array_equal(t.lookup(ctx), r.lookup(ctx))


def test_sign_fidelity_on_small_pipeline(pair):
    res, cfg = pair
    t = build_ews(res.student, res.base, res.dataset)
    V = t.vocab_size
    agree = total = 0
    for p, e in t.local.items():
        if len(p) != 1:
            continue
        mask = green_list(cfg.key, p, cfg.gamma, V).mask
        agree += np.sum((e.values > 0) == mask[e.indices])
        total += len(e.values)
    assert agree / total >= 0.85


@pytest.mark.xfail(strict=True, reason="with per-context green lists the watermark has no context-independent "
                   "component, so the global bias carries only content and estimation shifts (see ledger)")
def test_global_bias_cancels_content_without_watermark(small_seqs, small_vocab):
    teacher = fit_ngram(small_seqs[0::2], small_vocab, order=2)
    base = fit_ngram(small_seqs[1::2], small_vocab, order=2)
    prompts = [s[:4] for s in small_seqs[1::2][:40]]
    size = []
    for delta in (0.0, 3.0):
        cfg = WatermarkConfig(key=KEY, delta=delta)
        ds = generate_dataset(teacher, cfg, prompts, 1500, 48, seed=1)
        res = fit_student(base, ds, 0.3)
        size.append(np.mean(np.abs(global_bias(res.student, base, collect_contexts(ds, (1,))))))
    assert size[0] <= 0.2 * size[1]
