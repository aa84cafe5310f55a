import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrflow.corpus import generate_corpus
from lrflow.metrics import (ClassifierGateError, MetricReport, NgramLm, StyleClassifier,
                            length_success, ngram_ppl, sliced_wasserstein, style_accuracy)


def test_sw_identical_is_zero():
    a = np.random.default_rng(0).standard_normal((50, 3))
    assert sliced_wasserstein(a, a.copy()) == 0.0


def test_sw_one_dimensional_closed_form():
    assert sliced_wasserstein([[0.0]], [[3.0]]) == pytest.approx(3.0)


def test_sw_self_distance_small():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((10_000, 2)), rng.standard_normal((10_000, 2))
    assert sliced_wasserstein(a, b, 128, np.random.default_rng(2)) <= 0.1


def test_sw_symmetric_with_shared_projections():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((40, 2)), 1 + rng.standard_normal((60, 2))
    ab = sliced_wasserstein(a, b, rng=np.random.default_rng(9))
    ba = sliced_wasserstein(b, a, rng=np.random.default_rng(9))
    assert ab == ba > 0


def test_sw_rejects_degenerate():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 0)), np.zeros((3, 0)))
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))


def test_length_success_examples():
    assert length_success([[0] * 12] * 5, 12) == 1.0
    outs = [[0] * n for n in (10, 12, 14, 20)]
    assert length_success(outs, 12) == 0.75
    assert length_success(outs[::-1], 12) == 0.75


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 25), min_size=1, max_size=40), st.randoms())
def test_length_success_rate_bounds_and_order(lengths, rnd):
    outs = [[1] * n for n in lengths]
    r = length_success(outs, 12)
    rnd.shuffle(outs)
    assert 0 <= r <= 1 and length_success(outs, 12) == r


@pytest.fixture(scope="module")
def style_setup():
    corpus = generate_corpus("style_transfer", 2000, np.random.default_rng(0))
    train, labels = corpus.split("train")
    test = corpus.split("test")
    clf = StyleClassifier(corpus.vocab_size).fit(train, labels, heldout=test)
    return corpus, clf


def test_classifier_gate_and_self_consistency(style_setup):
    corpus, clf = style_setup
    assert clf.heldout_accuracy >= 0.99
    pos, _ = corpus.split("test", label=1)
    neg, _ = corpus.split("test", label=0)
    assert style_accuracy(pos, clf, 1) >= 0.99
    assert style_accuracy(neg, clf, 1) <= 0.01


def test_classifier_gate_refuses(style_setup):
    corpus, _ = style_setup
    weak = StyleClassifier(corpus.vocab_size)
    with pytest.raises(ClassifierGateError):
        style_accuracy([[3, 4]], weak)


def test_style_accuracy_empty_rejected(style_setup):
    _, clf = style_setup
    with pytest.raises(ValueError):
        style_accuracy([], clf)


def test_ngram_normalised_per_context():
    rng = np.random.default_rng(4)
    seqs = [list(rng.integers(0, 6, size=rng.integers(1, 8))) for _ in range(200)]
    lm = NgramLm().fit(seqs)
    for ctx in list(lm.counts)[:50]:
        total = sum(lm.prob(ctx, tok) for tok in lm.vocab)
        assert abs(total - 1.0) <= 1e-9


def test_ngram_single_token_corpus():
    # one-token sentences: every context has a single continuation
    lm = NgramLm(k=0.01).fit([[5]] * 100)
    assert ngram_ppl(lm, [[5]]) < 1.05


def test_ngram_uniform_source():
    rng = np.random.default_rng(5)
    V = 20
    train = [list(rng.integers(0, V, size=30)) for _ in range(4000)]
    lm = NgramLm().fit(train)
    test = [list(rng.integers(0, V, size=30)) for _ in range(200)]
    ppl = ngram_ppl(lm, test)
    # the end marker adds one rare symbol; the bulk is the uniform source
    assert abs(ppl - V) / V <= 0.10


def test_ngram_shuffle_oracle():
    corpus = generate_corpus("length_control", 2000, np.random.default_rng(6))
    train, _ = corpus.split("train")
    lm = NgramLm().fit(train)
    rng = np.random.default_rng(7)
    wins, total = 0, 0
    for s in train[:300]:
        if len(set(s)) < 2:
            continue
        shuf = list(s)
        while shuf == list(s):
            rng.shuffle(shuf)
        wins += ngram_ppl(lm, [s]) < ngram_ppl(lm, [shuf])
        total += 1
    assert wins / total >= 0.95


def test_metric_report_csv():
    rep = MetricReport("gauss2d", {"sliced_wasserstein": 0.1, "straightness": 0.02}, 200, 7, 10)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "task,metric,value,n,seed,steps"
    assert lines[1] == "gauss2d,sliced_wasserstein,0.1,200,7,10"
    assert len(lines) == 3


def test_metric_report_invariants():
    with pytest.raises(ValueError):
        MetricReport("gauss2d", {"x": math.nan}, 10)
    with pytest.raises(ValueError):
        MetricReport("gauss2d", {"x": 1.0}, 0)
