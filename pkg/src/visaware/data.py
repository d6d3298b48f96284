"""Corpus model, synthetic topic corpus, and the plain-text corpus file formats.

Files inside a corpus directory::

    texts.tsv        id<TAB>space-separated tokens
    images.txt       id<TAB>R, followed by R lines of comma-separated decimals
    pairs.tsv        text_id<TAB>image_id          (training pairs)
    eval_pairs.tsv   text_id<TAB>image_id          (held-out pairs, optional)
    tag_train.tsv / tag_test.tsv   id<TAB>tokens<TAB>tags
    nli_train.tsv / nli_test.tsv   id<TAB>premise tokens<TAB>hypothesis tokens<TAB>label
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError, ReferentialError, VocabularyError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
OUTSIDE_TAG = "O"
NLI_LABELS = ("entailment", "neutral", "contradiction")


class Vocab:
    """Token <-> id map with the specials at 0, 1, 2."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class TagExample:
    id: str
    tokens: list
    tags: list


@dataclass
class PairExample:
    id: str
    premise: list
    hypothesis: list
    label: str


@dataclass
class Corpus:
    texts: dict = field(default_factory=dict)            # id -> list of tokens
    image_features: dict = field(default_factory=dict)   # id -> R x d_img array
    pairs: list = field(default_factory=list)            # (text id, image id)
    eval_pairs: list = field(default_factory=list)
    tag_train: list = field(default_factory=list)
    tag_test: list = field(default_factory=list)
    nli_train: list = field(default_factory=list)
    nli_test: list = field(default_factory=list)

    def vocab(self) -> Vocab:
        words = set()
        for toks in self.texts.values():
            words.update(toks)
        for ex in self.tag_train + self.tag_test:
            words.update(ex.tokens)
        for ex in self.nli_train + self.nli_test:
            words.update(ex.premise)
            words.update(ex.hypothesis)
        return Vocab(words)

    def tag_set(self) -> list[str]:
        tags = {t for ex in self.tag_train + self.tag_test for t in ex.tags}
        return [OUTSIDE_TAG] + sorted(tags - {OUTSIDE_TAG})

    def validate(self) -> None:
        for tid, toks in self.texts.items():
            if not toks:
                raise ReferentialError(f"text {tid!r} has no tokens")
        for kind, pairs in (("pair", self.pairs), ("eval pair", self.eval_pairs)):
            for t, i in pairs:
                if t not in self.texts:
                    raise ReferentialError(f"{kind} references missing text id {t!r}")
                if i not in self.image_features:
                    raise ReferentialError(f"{kind} references missing image id {i!r}")
        shapes = {a.shape for a in self.image_features.values()}
        if len(shapes) > 1:
            raise ReferentialError(f"image feature matrices differ in shape: {sorted(shapes)}")
        for ex in self.tag_train + self.tag_test:
            if not ex.tokens or len(ex.tokens) != len(ex.tags):
                raise ReferentialError(f"tag example {ex.id!r} has mismatched tokens/tags")

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        if self.image_features.keys() != other.image_features.keys():
            return False
        same_images = all(np.array_equal(a, other.image_features[k]) for k, a in self.image_features.items())
        return (same_images and self.texts == other.texts
                and [tuple(p) for p in self.pairs] == [tuple(p) for p in other.pairs]
                and [tuple(p) for p in self.eval_pairs] == [tuple(p) for p in other.eval_pairs]
                and self.tag_train == other.tag_train and self.tag_test == other.tag_test
                and self.nli_train == other.nli_train and self.nli_test == other.nli_test)


# -- synthetic corpus --------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_topics: int = 10
    words_per_topic: int = 40
    n_ambiguous: int = 6
    n_pairs: int = 2000
    n_eval_pairs: int = 500
    regions: int = 16
    d_img: int = 128
    min_objects: int = 3
    max_objects: int = 5
    center_scale: float = 1.0
    prototype_scale: float = 1.0
    noise: float = 0.3
    n_tag_train: int = 600
    n_tag_test: int = 300
    n_nli_train: int = 600
    n_nli_test: int = 300

    def __post_init__(self):
        if self.n_topics < 4:
            raise ContractError("n_topics must be at least 4 so every NLI label has a partner topic")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ContractError("need 1 <= min_objects <= max_objects")
        if self.words_per_topic < 2 * self.max_objects:
            raise ContractError(f"words_per_topic must be >= 2 * max_objects = {2 * self.max_objects}; "
                                "task sentences draw from half of a topic's words")
        if self.n_ambiguous < 1 or self.regions < 1 or self.d_img < 1:
            raise ContractError("n_ambiguous, regions and d_img must be positive")


def _topic_word(k: int, j: int) -> str:
    return f"t{k}w{j}"


def _ambiguous_word(j: int) -> str:
    return f"amb{j}"


def _topic_tag(k: int) -> str:
    return f"T{k}"


def generate_synthetic_corpus(cfg: SyntheticConfig | None = None, seed: int = 0) -> Corpus:
    """Clustered text-image corpus plus topic-hint tagging and topic-entailment tasks.

    Each topic owns ``words_per_topic`` content words with a visual prototype and
    a cluster centre in region-feature space. A caption names a few of the
    topic's words and an ambiguous word or two; its image has one region per
    object slot drawn near ``centre + prototype(word)``.

    Tagging sentences tag every content word ``O`` and every ambiguous word with
    its sentence's topic. Task training sentences use only the first half of each
    topic's words and test sentences only the second half, so the topic of a
    test sentence is available through the caption corpus but not from the task
    training text.
    """
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    K, W = cfg.n_topics, cfg.words_per_topic
    centres = rng.standard_normal((K, cfg.d_img)) * cfg.center_scale
    protos = rng.standard_normal((K, W, cfg.d_img)) * cfg.prototype_scale
    corpus = Corpus()

    def caption(k, words):
        toks = [_topic_word(k, j) for j in words]
        for _ in range(rng.integers(1, 3)):
            toks.insert(int(rng.integers(0, len(toks) + 1)), _ambiguous_word(int(rng.integers(cfg.n_ambiguous))))
        return toks

    def image(k, words):
        slots = np.arange(cfg.regions) % len(words)
        feats = centres[k] + protos[k, np.asarray(words)[slots]]
        feats = feats + rng.standard_normal((cfg.regions, cfg.d_img)) * cfg.noise
        return np.round(feats, 4)

    counter = 0
    for split, n in (("pairs", cfg.n_pairs), ("eval_pairs", cfg.n_eval_pairs)):
        for _ in range(n):
            k = int(rng.integers(K))
            n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
            words = rng.choice(W, size=n_obj, replace=False)
            tid, iid = f"s{counter:05d}", f"i{counter:05d}"
            counter += 1
            corpus.texts[tid] = caption(k, words)
            corpus.image_features[iid] = image(k, words)
            getattr(corpus, split).append((tid, iid))

    half = W // 2

    def sentence(k, lo, hi):
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        words = rng.choice(np.arange(lo, hi), size=n_obj, replace=False)
        toks = [_topic_word(k, int(j)) for j in words]
        tags = [OUTSIDE_TAG] * len(toks)
        for _ in range(rng.integers(1, 3)):
            pos = int(rng.integers(0, len(toks) + 1))
            toks.insert(pos, _ambiguous_word(int(rng.integers(cfg.n_ambiguous))))
            tags.insert(pos, _topic_tag(k))
        return toks, tags

    for name, n, lo, hi in (("tag_train", cfg.n_tag_train, 0, half), ("tag_test", cfg.n_tag_test, half, W)):
        for i in range(n):
            toks, tags = sentence(int(rng.integers(K)), lo, hi)
            getattr(corpus, name).append(TagExample(f"{name}{i:05d}", toks, tags))

    for name, n, lo, hi in (("nli_train", cfg.n_nli_train, 0, half), ("nli_test", cfg.n_nli_test, half, W)):
        for i in range(n):
            k = int(rng.integers(K))
            label = NLI_LABELS[int(rng.integers(3))]
            if label == "entailment":
                k2 = k
            elif label == "neutral":
                k2 = k ^ 1 if (k ^ 1) < K else k - 1
            else:
                k2 = int(rng.choice([j for j in range(K) if j != k and j != (k ^ 1)]))
            prem, _ = sentence(k, lo, hi)
            hyp, _ = sentence(k2, lo, hi)
            getattr(corpus, name).append(PairExample(f"{name}{i:05d}", prem, hyp, label))
    return corpus


def majority_tag_accuracy(corpus: Corpus) -> float:
    """Ambiguous-token accuracy on ``tag_test`` of always predicting the most common training tag."""
    counts: dict = {}
    for ex in corpus.tag_train:
        for t in ex.tags:
            if t != OUTSIDE_TAG:
                counts[t] = counts.get(t, 0) + 1
    best = min(counts, key=lambda t: (-counts[t], t))
    gold = [t for ex in corpus.tag_test for t in ex.tags if t != OUTSIDE_TAG]
    return sum(t == best for t in gold) / len(gold)


# -- file formats ------------------------------------------------------------------

def _write(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def _format_row(row: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in row)


def save_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "texts.tsv", (f"{k}\t{' '.join(v)}" for k, v in corpus.texts.items()))

    def image_lines():
        for k, feats in corpus.image_features.items():
            yield f"{k}\t{feats.shape[0]}"
            for row in feats:
                yield _format_row(row)

    _write(d / "images.txt", image_lines())
    _write(d / "pairs.tsv", (f"{t}\t{i}" for t, i in corpus.pairs))
    _write(d / "eval_pairs.tsv", (f"{t}\t{i}" for t, i in corpus.eval_pairs))
    for name in ("tag_train", "tag_test"):
        _write(d / f"{name}.tsv", (f"{e.id}\t{' '.join(e.tokens)}\t{' '.join(e.tags)}"
                                   for e in getattr(corpus, name)))
    for name in ("nli_train", "nli_test"):
        _write(d / f"{name}.tsv", (f"{e.id}\t{' '.join(e.premise)}\t{' '.join(e.hypothesis)}\t{e.label}"
                                   for e in getattr(corpus, name)))
    return d


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().split("\n")


def _fields(path: Path, n_fields: int):
    for n, line in enumerate(_read_lines(path), start=1):
        if line == "":
            continue
        parts = line.split("\t")
        if len(parts) != n_fields:
            raise ParseError(f"expected {n_fields} tab-separated fields, got {len(parts)}", path, n)
        if any(p.strip() == "" for p in parts):
            raise ParseError("empty field", path, n)
        yield n, parts


def read_images(path: Path) -> dict:
    lines = _read_lines(path)
    if lines and lines[-1] == "":
        lines = lines[:-1]
    out: dict = {}
    width = None
    i = 0
    while i < len(lines):
        header = lines[i].split("\t")
        if len(header) != 2:
            raise ParseError("expected 'id<TAB>R' header", path, i + 1)
        image_id, count = header
        try:
            R = int(count)
        except ValueError:
            raise ParseError(f"region count {count!r} is not an integer", path, i + 1) from None
        if R < 1:
            raise ParseError("region count must be positive", path, i + 1)
        if image_id in out:
            raise ParseError(f"duplicate image id {image_id!r}", path, i + 1)
        rows = []
        for r in range(R):
            n = i + 2 + r
            if n > len(lines):
                raise ParseError(f"image {image_id!r} ends after {r} of {R} rows", path, n)
            try:
                row = [float(v) for v in lines[n - 1].split(",")]
            except ValueError:
                raise ParseError("feature row is not comma-separated decimals", path, n) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"feature row has {len(row)} values, expected {width}", path, n)
            rows.append(row)
        out[image_id] = np.array(rows, dtype=np.float64)
        i += R + 1
    return out


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    corpus = Corpus()
    for n, (tid, toks) in _fields(d / "texts.tsv", 2):
        if tid in corpus.texts:
            raise ParseError(f"duplicate text id {tid!r}", d / "texts.tsv", n)
        corpus.texts[tid] = toks.split()
    corpus.image_features = read_images(d / "images.txt")
    corpus.pairs = [tuple(p) for _, p in _fields(d / "pairs.tsv", 2)]
    if (d / "eval_pairs.tsv").exists():
        corpus.eval_pairs = [tuple(p) for _, p in _fields(d / "eval_pairs.tsv", 2)]
    for name in ("tag_train", "tag_test"):
        path = d / f"{name}.tsv"
        if path.exists():
            items = []
            for n, (eid, toks, tags) in _fields(path, 3):
                ex = TagExample(eid, toks.split(), tags.split())
                if len(ex.tokens) != len(ex.tags):
                    raise ParseError("token and tag counts differ", path, n)
                items.append(ex)
            setattr(corpus, name, items)
    for name in ("nli_train", "nli_test"):
        path = d / f"{name}.tsv"
        if path.exists():
            items = []
            for n, (eid, prem, hyp, label) in _fields(path, 4):
                if label not in NLI_LABELS:
                    raise ParseError(f"unknown label {label!r}", path, n)
                items.append(PairExample(eid, prem.split(), hyp.split(), label))
            setattr(corpus, name, items)
    corpus.validate()
    return corpus
