"""Evaluation quantities: transport distance, success rates, fluency proxy."""

from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from .config import gauss_mu1


@dataclass
class MetricReport:
    task: str
    values: dict = field(default_factory=dict)
    n: int = 1
    seed: int = 0
    steps: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("MetricReport needs a positive sample count")
        bad = {k: v for k, v in self.values.items() if not math.isfinite(v)}
        if bad:
            raise ValueError(f"non-finite metric values: {bad}")

    HEADER = ("task", "metric", "value", "n", "seed", "steps")

    def rows(self):
        return [(self.task, k, repr(float(v)), self.n, self.seed, self.steps)
                for k, v in self.values.items()]

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


def sliced_wasserstein(a, b, projections=128, rng=None):
    """Mean over random unit directions of the 1-d W2 between projections.

    Unequal sample sizes are compared through matched quantiles.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("sliced_wasserstein: dimension must be positive")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"sliced_wasserstein: dims differ ({a.shape[1]} vs {b.shape[1]})")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced_wasserstein: empty point set")
    rng = np.random.default_rng(0) if rng is None else rng
    theta = rng.standard_normal((projections, a.shape[1]))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    pa = np.sort(a @ theta.T, axis=0)
    pb = np.sort(b @ theta.T, axis=0)
    if len(pa) != len(pb):
        q = (np.arange(max(len(pa), len(pb))) + 0.5) / max(len(pa), len(pb))
        pa = np.quantile(pa, q, axis=0, method="inverted_cdf")
        pb = np.quantile(pb, q, axis=0, method="inverted_cdf")
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def length_success(outputs, target, tolerance=2):
    """Fraction of outputs whose length is within ``tolerance`` of ``target``."""
    if len(outputs) == 0:
        raise ValueError("length_success: no outputs")
    return float(np.mean([abs(len(o) - target) <= tolerance for o in outputs]))


class StyleClassifier:
    """Logistic regression on bag-of-token counts."""

    def __init__(self, vocab_size, C=10.0):
        self.vocab_size = vocab_size
        self.model = LogisticRegression(C=C, max_iter=1000)
        self.heldout_accuracy = None

    def features(self, seqs):
        x = np.zeros((len(seqs), self.vocab_size))
        for i, s in enumerate(seqs):
            for tok in s:
                x[i, tok] += 1.0
        return x

    def fit(self, seqs, labels, heldout=None):
        self.model.fit(self.features(seqs), np.asarray(labels))
        if heldout is not None:
            hx, hy = heldout
            self.heldout_accuracy = float(np.mean(self.predict(hx) == np.asarray(hy)))
        return self

    def predict(self, seqs):
        if len(seqs) == 0:
            return np.zeros(0, dtype=int)
        return self.model.predict(self.features(seqs))


class ClassifierGateError(RuntimeError):
    pass


def style_accuracy(outputs, classifier, target_style=1, gate=0.99):
    """Fraction of outputs the classifier assigns to ``target_style``."""
    if len(outputs) == 0:
        raise ValueError("style_accuracy: no outputs")
    acc = classifier.heldout_accuracy
    if acc is None or acc < gate:
        raise ClassifierGateError(f"classifier held-out accuracy {acc} below gate {gate}")
    return float(np.mean(classifier.predict(outputs) == target_style))


class NgramLm:
    """Add-k smoothed n-gram model over token ids plus an end marker."""

    END = -1
    START = -2

    def __init__(self, order=3, k=0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.k = k
        self.counts = defaultdict(Counter)
        self.totals = Counter()
        self.vocab = set()

    def _grams(self, seq):
        padded = [self.START] * (self.order - 1) + list(seq) + [self.END]
        for i in range(self.order - 1, len(padded)):
            yield tuple(padded[i - self.order + 1:i]), padded[i]

    def fit(self, seqs):
        for s in seqs:
            self.vocab.update(s)
        self.vocab.add(self.END)
        for s in seqs:
            for ctx, tok in self._grams(s):
                self.counts[ctx][tok] += 1
                self.totals[ctx] += 1
        return self

    @property
    def support_size(self):
        return len(self.vocab)

    def prob(self, ctx, tok):
        ctx = tuple(ctx)
        return (self.counts[ctx][tok] + self.k) / (self.totals[ctx] + self.k * self.support_size) \
            if ctx in self.counts else 1.0 / self.support_size

    def seq_logprob(self, seq):
        lp, n = 0.0, 0
        for ctx, tok in self._grams(seq):
            lp += math.log(self.prob(ctx, tok))
            n += 1
        return lp, n


def ngram_ppl(lm, outputs):
    """``exp`` of the mean per-token NLL (the end marker counts as a token)."""
    total, n = 0.0, 0
    for s in outputs:
        lp, k = lm.seq_logprob(s)
        total += lp
        n += k
    if n == 0:
        raise ValueError("ngram_ppl: no tokens")
    return math.exp(-total / n)


# ------------------------------------------------------------ task evaluation


class EvalContext:
    """Per-checkpoint reference material: corpus, fluency LM, style classifier."""

    def __init__(self, ckpt):
        from .pipeline import TaskSpec

        self.ckpt = ckpt
        self.spec = TaskSpec.from_config(ckpt.state["config"])
        self.corpus = self.spec.corpus()
        self.lm = self.classifier = None
        self.train_ppl = None
        if self.corpus is None:
            return
        train, labels = self.corpus.split("train")
        self.lm = NgramLm().fit(train)
        self.train_ppl = ngram_ppl(self.lm, train)
        if self.spec.task == "style_transfer":
            test, test_labels = self.corpus.split("test")
            self.classifier = StyleClassifier(self.corpus.vocab_size).fit(
                train, labels, heldout=(test, test_labels))

    def score(self, result, seed):
        """Metric values for one SampleResult."""
        cfg = self.spec.config
        out = result.outputs
        if self.spec.task == "gauss2d":
            from .flow import straightness
            from .pipeline import models_from_checkpoint

            rng = np.random.default_rng([seed, 1])
            mu1 = np.asarray(gauss_mu1(cfg))
            ref = mu1 + cfg["gauss_sigma1"] * rng.standard_normal((len(out), len(mu1)))
            _, _, flow = models_from_checkpoint(self.ckpt)
            return {
                "sliced_wasserstein": sliced_wasserstein(out, ref, rng=np.random.default_rng([seed, 2])),
                "endpoint_mean_error": float(np.linalg.norm(np.mean(out, axis=0) - mu1)),
                "straightness": straightness(flow, result.z_start[:256]),
            }
        values = {
            "ngram_ppl": ngram_ppl(self.lm, out),
            "train_ppl": self.train_ppl,
            "mean_length": float(np.mean([len(o) for o in out])),
        }
        if self.spec.task == "length_control":
            values["length_success"] = length_success(out, cfg["target_length"])
        else:
            values["style_accuracy"] = style_accuracy(out, self.classifier, cfg["target_style"])
        return values


def _sample_seed(spec, seed):
    if seed is not None:
        return int(seed)
    return int(spec.config["seed"])


def evaluate(ckpt, n=None, steps=None, seed=None, no_flow=False, context=None):
    """Sample ``n`` outputs and score them; returns a MetricReport."""
    from .pipeline import sample

    ctx = context or EvalContext(ckpt)
    cfg = ctx.spec.config
    n = int(cfg["eval_samples"]) if n is None else int(n)
    steps = int(cfg["steps"]) if steps is None else int(steps)
    seed = _sample_seed(ctx.spec, seed)
    res = sample(ckpt, n, steps=steps, seed=seed, no_flow=no_flow, corpus=ctx.corpus)
    return MetricReport(ctx.spec.task, ctx.score(res, seed), n, seed, 0 if no_flow else steps)


STEP_COUNTS = (1, 2, 5, 10, 20, 50, 100)


def timing_sweep(ckpt, step_counts=STEP_COUNTS, n=200, reps=3, seed=None, context=None):
    """Median wall time of ``sample`` at each step count plus quality metrics.

    Returns a list of dicts with keys ``steps``, ``wall_ms`` and the metric names.
    """
    from .pipeline import sample

    ctx = context or EvalContext(ckpt)
    seed = _sample_seed(ctx.spec, seed)
    rows = []
    for N in step_counts:
        walls = []
        for _ in range(reps):
            t0 = time.perf_counter()
            res = sample(ckpt, n, steps=N, seed=seed, corpus=ctx.corpus)
            walls.append((time.perf_counter() - t0) * 1000.0)
        row = {"steps": int(N), "wall_ms": float(np.median(walls))}
        row.update(ctx.score(res, seed))
        rows.append(row)
    return rows
