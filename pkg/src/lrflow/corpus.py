"""Deterministic synthetic corpora standing in for the real datasets.

``length_control`` draws restaurant-style sentences whose length is uniform
over [4, 20] tokens.  ``style_transfer`` draws review sentences whose style
(0 = negative, 1 = positive) is fixed by the adjective slots; every other
slot is shared between the styles.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .nets import BOS, EOS, PAD

SPECIALS = ("<pad>", "<bos>", "<eos>")

NAMES = ["aromi", "bibimbap", "cotto", "fitzbillies", "giraffe", "loch", "strada", "wildwood"]
FOODS = ["chinese", "english", "french", "indian", "italian", "japanese"]
PRICES = ["cheap", "moderate", "high"]

# optional extension slots, in sentence order; each option is a token template
LENGTH_SLOTS = [
    [(), ("by", "the", "river"), ("in", "the", "city", "centre")],
    [(), ("near", "the", "{name}")],
    [(), ("with", "{price}", "prices"), ("with", "a", "{price}", "price", "range")],
    [(), ("and", "is", "family", "friendly"), ("and", "is", "not", "family", "friendly")],
    [(), ("daily",), ("every", "day")],
]
LENGTH_CORE = ("{name}", "serves", "{food}", "food")
MIN_LEN, MAX_LEN = 4, 20

POS_ADJ = ["great", "delicious", "friendly", "amazing", "excellent"]
NEG_ADJ = ["awful", "bland", "rude", "terrible", "horrible"]
NOUNS = ["food", "service", "staff", "pizza", "coffee", "place", "menu", "pasta"]
STYLE_TEMPLATES = [
    ("the", "{noun}", "was", "{adj}"),
    ("the", "{noun}", "here", "is", "{adj}"),
    ("i", "thought", "the", "{noun}", "was", "{adj}"),
    ("the", "{noun}", "was", "{adj}", "and", "the", "{noun2}", "was", "{adj2}"),
    ("our", "{noun}", "was", "really", "{adj}", "today"),
]


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    sequences: list
    labels: list
    vocab: list
    splits: dict = field(default_factory=dict)
    task: str = ""

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode(self, words):
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise CorpusError(f"out-of-vocabulary token {e.args[0]!r}") from None

    def decode(self, ids):
        return [self.vocab[i] for i in ids]

    def split(self, name, label=None):
        idx = self.splits[name]
        if label is not None:
            idx = [i for i in idx if self.labels[i] == label]
        return [self.sequences[i] for i in idx], [self.labels[i] for i in idx]

    def to_text(self):
        return "".join(line + "\n" for line in self.to_lines())

    def content_hash(self):
        """Git blob hash of the TSV form (``git hash-object`` gives the same value)."""
        data = self.to_text().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

    def to_lines(self):
        """Tab-separated ``split, label, sentence`` lines."""
        where = {}
        for name, idx in self.splits.items():
            for i in idx:
                where[i] = name
        return [f"{where.get(i, '')}\t{lab}\t{' '.join(self.decode(s))}"
                for i, (s, lab) in enumerate(zip(self.sequences, self.labels))]


def template_vocab(templates):
    """Every word the templates can emit; unknown ``{slot}`` names are rejected."""
    fill = {"{name}": NAMES, "{food}": FOODS, "{price}": PRICES,
            "{noun}": NOUNS, "{noun2}": NOUNS, "{adj}": POS_ADJ + NEG_ADJ,
            "{adj2}": POS_ADJ + NEG_ADJ}
    words = []
    for tpl in templates:
        for tok in tpl:
            if tok.startswith("{") and tok not in fill:
                raise CorpusError(f"template {tpl} references unknown slot {tok}")
            for w in fill.get(tok, [tok]):
                if w not in words:
                    words.append(w)
    return words


def _length_combos():
    by_extra = {}
    for combo in itertools.product(*LENGTH_SLOTS):
        extra = sum(len(c) for c in combo)
        by_extra.setdefault(extra, []).append(combo)
    return by_extra


def _fill(tpl, slots):
    out = []
    for tok in tpl:
        if tok in slots:
            out.append(slots[tok])
        else:
            out.append(tok)
    return out


def _length_sentence(n, rng, combos):
    options = combos[n - len(LENGTH_CORE)]
    combo = options[rng.integers(len(options))]
    slots = {"{name}": NAMES[rng.integers(len(NAMES))],
             "{food}": FOODS[rng.integers(len(FOODS))],
             "{price}": PRICES[rng.integers(len(PRICES))]}
    words = _fill(LENGTH_CORE, slots)
    for part in combo:
        if "{name}" in part:
            slots["{name}"] = NAMES[rng.integers(len(NAMES))]
        words += _fill(part, slots)
    return words


def _style_sentence(style, rng):
    tpl = STYLE_TEMPLATES[rng.integers(len(STYLE_TEMPLATES))]
    adjs = POS_ADJ if style == 1 else NEG_ADJ
    slots = {"{noun}": NOUNS[rng.integers(len(NOUNS))],
             "{noun2}": NOUNS[rng.integers(len(NOUNS))],
             "{adj}": adjs[rng.integers(len(adjs))],
             "{adj2}": adjs[rng.integers(len(adjs))]}
    return _fill(tpl, slots)


def _splits(n, rng, val_frac=0.1, test_frac=0.1):
    perm = rng.permutation(n)
    n_val = int(round(n * val_frac))
    n_test = int(round(n * test_frac))
    return {"val": sorted(perm[:n_val].tolist()),
            "test": sorted(perm[n_val:n_val + n_test].tolist()),
            "train": sorted(perm[n_val + n_test:].tolist())}


def generate_corpus(task, size, rng):
    """Build a labelled corpus of ``size`` sentences for ``task``."""
    if task == "length_control":
        templates = [LENGTH_CORE, *[o for slot in LENGTH_SLOTS for o in slot]]
        vocab = list(SPECIALS) + template_vocab(templates)
        combos = _length_combos()
        missing = [n for n in range(MIN_LEN, MAX_LEN + 1) if n - len(LENGTH_CORE) not in combos]
        if missing:
            raise CorpusError(f"templates cannot realise lengths {missing}")
        corpus_words, labels = [], []
        for _ in range(size):
            n = int(rng.integers(MIN_LEN, MAX_LEN + 1))
            corpus_words.append(_length_sentence(n, rng, combos))
            labels.append(n)
    elif task == "style_transfer":
        vocab = list(SPECIALS) + template_vocab(STYLE_TEMPLATES)
        corpus_words, labels = [], []
        for _ in range(size):
            style = int(rng.integers(2))
            corpus_words.append(_style_sentence(style, rng))
            labels.append(style)
    else:
        raise CorpusError(f"no corpus for task {task!r}")
    corpus = Corpus([], labels, vocab, task=task)
    corpus.sequences = [corpus.encode(w) for w in corpus_words]
    corpus.splits = _splits(size, rng)
    assert all(0 <= i < len(vocab) for s in corpus.sequences for i in s)
    assert (PAD, BOS, EOS) == (0, 1, 2)
    return corpus
