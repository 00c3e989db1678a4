import numpy as np
import pytest

from wmspoof.distill import (
    WatermarkedCorpus,
    fit_student,
    generate_dataset,
    prompt_set_id,
    radioactivity_score,
)
from wmspoof.errors import EmptyCorpus, EmptyRequest, VocabMismatch
from wmspoof.corpus import synthetic_corpus
from wmspoof.textmodel import Vocabulary, build_vocab, corpus_lines, fit_ngram, softmax, tokenize
from wmspoof.watermark import TOURNAMENT, WatermarkConfig, detect, g_sums, green_hits, green_list

KEY = 0xA5A5_0000_1111_2222


@pytest.fixture(scope="module")
def models(small_seqs, small_vocab):
    teacher = fit_ngram(small_seqs[0::2], small_vocab, order=2, smoothing=0.1)
    base = fit_ngram(small_seqs[1::2], small_vocab, order=2, smoothing=0.1)
    prompts = [s[:4] for s in small_seqs[1::2][:50]]
    return teacher, base, prompts


def test_empty_request(models):
    teacher, _, prompts = models
    with pytest.raises(EmptyRequest):
        generate_dataset(teacher, WatermarkConfig(key=KEY), prompts, 0, 10)


def test_dataset_reproducible_from_provenance(models):
    teacher, _, prompts = models
    cfg = WatermarkConfig(key=KEY)
    a = generate_dataset(teacher, cfg, prompts, 12, 20, seed=5)
    b = generate_dataset(teacher, cfg, prompts, 12, 20, seed=a.provenance["seed"])
    assert a.sequences == b.sequences
    assert a.provenance["prompt_set"] == prompt_set_id(prompts)
    assert "key" not in a.provenance
    assert generate_dataset(teacher, cfg, prompts, 12, 20, seed=6).sequences != a.sequences


def test_sequence_independent_of_batch_size(models):
    teacher, _, prompts = models
    cfg = WatermarkConfig(key=KEY)
    small = generate_dataset(teacher, cfg, prompts, 3, 20, seed=1)
    large = generate_dataset(teacher, cfg, prompts, 9, 20, seed=1)
    assert large.sequences[:3] == small.sequences


@pytest.mark.parametrize("scheme", ["greenlist", TOURNAMENT])
def test_transcripts_match_detector(models, scheme):
    teacher, _, prompts = models
    cfg = WatermarkConfig(scheme, KEY)
    V = teacher.vocab.size
    ds = generate_dataset(teacher, cfg, prompts, 6, 30, seed=2)
    for seq, plen, tr in zip(ds.sequences, ds.prompt_lengths, ds.transcripts):
        assert len(tr) == len(seq)
        assert tr[:plen] == [-1] * plen
        replay = green_hits(seq, cfg, V, plen) if scheme == "greenlist" else g_sums(seq, cfg, V, plen)
        assert [int(x) for x in replay] == tr[plen:]


def test_delta_zero_corpus_is_null(models):
    teacher, _, prompts = models
    cfg = WatermarkConfig(key=KEY, delta=0.0)
    ds = generate_dataset(teacher, cfg, prompts, 40, 200, seed=3)
    z = [detect(s, cfg, teacher.vocab.size, p).z for s, p in zip(ds.sequences, ds.prompt_lengths)]
    assert np.median(z) < 1


def test_delta_three_corpus_detected(models):
    teacher, _, prompts = models
    cfg = WatermarkConfig(key=KEY, delta=3.0, gamma=0.5)
    ds = generate_dataset(teacher, cfg, prompts, 40, 200, seed=4)
    z = np.array([detect(s, cfg, teacher.vocab.size, p).z for s, p in zip(ds.sequences, ds.prompt_lengths)])
    assert np.mean(z >= 4) >= 0.95


def test_fit_student_identity_mix(models):
    teacher, base, prompts = models
    ds = generate_dataset(teacher, WatermarkConfig(key=KEY), prompts, 10, 20)
    res = fit_student(base, ds, mix=1.0)
    for ctx in ([2, 3], [5], []):
        np.testing.assert_array_equal(res.student.logits(ctx), base.logits(ctx))


def test_fit_student_errors(models, small_vocab):
    teacher, base, prompts = models
    ds = generate_dataset(teacher, WatermarkConfig(key=KEY), prompts, 4, 10)
    with pytest.raises(EmptyCorpus):
        fit_student(base, WatermarkedCorpus([], [], [], {}))
    other = fit_ngram([2, 3, 2, 3, 2], build_vocab("p q r"), order=1)
    with pytest.raises(VocabMismatch):
        fit_student(other, ds)
    bad = WatermarkedCorpus([[2, 3, 10_000]], [0], [[0, 0, 0]], {})
    with pytest.raises(VocabMismatch):
        fit_student(base, bad)


def test_student_repetition_limit():
    v = Vocabulary(("<bos>", "<unk>", "a", "b"))
    base = fit_ngram([2, 3, 3, 2, 2, 3], v, order=1, smoothing=0.1)
    corpus = WatermarkedCorpus([[2, 3] * 200], [0], [[0] * 400], {"vocab_hash": v.fingerprint()})
    res = fit_student(base, corpus, mix=0.0)
    # 200 observed (a, b) pairs; the only mass elsewhere is the additive smoothing
    assert res.student.probs([2])[3] == pytest.approx((200 + 0.1) / (200 + 0.1 * 4), rel=1e-12)
    assert res.student.probs([2])[3] > 0.998


def test_vocabulary_closure(models):
    teacher, base, prompts = models
    ds = generate_dataset(teacher, WatermarkConfig(key=KEY), prompts, 20, 30)
    res = fit_student(base, ds, mix=0.3)
    assert res.student.vocab == base.vocab
    ids = {int(i) for level in res.student.levels for ids, _, _ in level.values() for i in ids}
    assert ids <= set(range(base.vocab.size))


def test_train_on_prompt_flag(models):
    teacher, base, prompts = models
    ds = generate_dataset(teacher, WatermarkConfig(key=KEY), prompts, 20, 30)
    masked = fit_student(base, ds, 0.0, train_on_prompt=False).student
    full = fit_student(base, ds, 0.0, train_on_prompt=True).student
    total = lambda m: sum(t for _, _, t in m.levels[0].values())
    assert total(full) - total(masked) == sum(ds.prompt_lengths)


def test_student_approaches_watermarked_teacher_as_data_grows(models):
    teacher, base, prompts = models
    cfg = WatermarkConfig(key=KEY, delta=3.0)
    V = teacher.vocab.size
    big = generate_dataset(teacher, cfg, prompts, 100_000 // 64 + 1, 64, seed=9)
    # top-50 two-token training contexts in the largest corpus
    counts = {}
    for s, p in zip(big.sequences, big.prompt_lengths):
        for t in range(max(p, 2), len(s)):
            counts[tuple(s[t - 2:t])] = counts.get(tuple(s[t - 2:t]), 0) + 1
    top = [c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:50]]
    target = {c: softmax(teacher.logits(c) + cfg.delta * green_list(KEY, c, 0.5, V).mask) for c in top}
    tvs = []
    for n_tokens in (1_000, 10_000, 100_000):
        n = n_tokens // 64 + 1
        sub = WatermarkedCorpus(big.sequences[:n], big.prompt_lengths[:n], big.transcripts[:n], big.provenance)
        student = fit_student(base, sub, mix=0.0).student
        tvs.append(np.mean([0.5 * np.abs(student.probs(c) - target[c]).sum() for c in top]))
    assert tvs[0] > tvs[1] > tvs[2]


def test_radioactivity_identity_student_is_null():
    # A wide, flat language: with a few dozen words the fixed key alone shifts null z noticeably.
    text = synthetic_corpus(n_lines=1500, n_words=400, branching=64, zipf=0.0, seed=4)
    vocab = build_vocab(text)
    seqs = [tokenize(line, vocab) for line in corpus_lines(text)]
    teacher = fit_ngram(seqs[0::2], vocab, order=1)
    base = fit_ngram(seqs[1::2], vocab, order=1)
    prompts = [s[:4] for s in seqs[1::2][:50]]
    cfg = WatermarkConfig(key=KEY)
    ds = generate_dataset(teacher, cfg, prompts, 10, 20)
    rad = radioactivity_score(fit_student(base, ds, mix=1.0), cfg, 100, 200, seed=1, prompts=prompts)
    assert abs(rad.median_z) < 0.5
    assert len(rad.reports) == 100
    with pytest.raises(EmptyRequest):
        radioactivity_score(fit_student(base, ds, mix=1.0), cfg, 0, 200)


def test_radioactivity_on_pure_distillation(models):
    teacher, base, prompts = models
    cfg = WatermarkConfig(key=KEY, delta=3.0)
    ds = generate_dataset(teacher, cfg, prompts, 100_000 // 64 + 1, 64, seed=11)
    rad = radioactivity_score(fit_student(base, ds, mix=0.0), cfg, 100, 200, seed=2, prompts=prompts)
    assert rad.median_z >= 2
    assert rad.pooled_p < 1e-3


def test_radioactivity_monotone_in_teacher_delta(models):
    teacher, base, prompts = models
    medians = []
    for delta in (0.0, 1.5, 3.0):
        cfg = WatermarkConfig(key=KEY, delta=delta)
        ds = generate_dataset(teacher, cfg, prompts, 600, 64, seed=12)
        rad = radioactivity_score(fit_student(base, ds, mix=0.3), cfg, 40, 200, seed=3, prompts=prompts)
        medians.append(rad.median_z)
    assert medians[0] <= medians[1] <= medians[2]
