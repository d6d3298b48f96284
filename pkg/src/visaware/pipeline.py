"""Glue between a :class:`Corpus` and the models: training, indexing, retrieval for tasks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import NLI_LABELS, Corpus, Vocab
from .embedding import EmbeddingModel, train_embedding
from .errors import ReferentialError
from .retrieval import ImageIndex, RetrievalResult, build_index, recall_at_k, retrieve_batch
from .tasks import (TaskModel, copy_token_accuracy, copy_vocab, decode_copy, init_task_model,
                    predict_pairs, predict_tags, sample_copy_batch, tagging_metrics, train_copy,
                    train_pair_classifier, train_tagger)


def train_embedding_on_corpus(corpus: Corpus, vocab: Vocab, run: RunConfig,
                              on_epoch: Callable[[dict], None] | None = None) -> EmbeddingModel:
    text_ids = sorted({t for t, _ in corpus.pairs})
    image_ids = sorted({i for _, i in corpus.pairs})
    tpos = {k: n for n, k in enumerate(text_ids)}
    ipos = {k: n for n, k in enumerate(image_ids)}
    for t, i in corpus.pairs:
        if t not in corpus.texts or i not in corpus.image_features:
            raise ReferentialError(f"pair ({t}, {i}) references a missing text or image")
    texts = [vocab.encode(corpus.texts[k]) for k in text_ids]
    images = np.stack([corpus.image_features[k] for k in image_ids])
    pairs = [(tpos[t], ipos[i]) for t, i in corpus.pairs]
    return train_embedding(texts, images, pairs, run.embedding(len(vocab)), run.embedding_training(),
                           on_epoch=on_epoch)


def index_images(model: EmbeddingModel, corpus: Corpus, image_ids: Sequence[str]) -> ImageIndex:
    regions = np.stack([corpus.image_features[i] for i in image_ids])
    return build_index(zip(image_ids, model.embed_images(regions)))


def training_image_ids(corpus: Corpus) -> list[str]:
    seen, out = set(), []
    for _, i in corpus.pairs:
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def eval_recall(model: EmbeddingModel, corpus: Corpus, vocab: Vocab, ks=(1, 5, 8, 10)) -> dict:
    """recall@k of eval captions against an index of the eval images."""
    image_ids = list(dict.fromkeys(i for _, i in corpus.eval_pairs))
    index = index_images(model, corpus, image_ids)
    queries = model.embed_texts([vocab.encode(corpus.texts[t]) for t, _ in corpus.eval_pairs])
    pairs = list(zip(queries, [i for _, i in corpus.eval_pairs]))
    return {k: recall_at_k(pairs, index, k) for k in ks}


def retrieve_for_sentences(model: EmbeddingModel, vocab: Vocab, index: ImageIndex,
                           sentences: Sequence[Sequence[str]], m: int,
                           query_ids: Sequence | None = None) -> list[RetrievalResult]:
    if m == 0:
        return [RetrievalResult((), q) for q in (query_ids or [None] * len(sentences))]
    queries = model.embed_texts([vocab.encode(s) for s in sentences])
    return retrieve_batch(queries, index, m, query_ids)


def image_features_for(results: Sequence[RetrievalResult], pooled: dict, d_img: int) -> np.ndarray:
    """Stack the pooled vectors of each result's images into ``[n, m, d_img]``."""
    m = max((len(r.entries) for r in results), default=0)
    out = np.zeros((len(results), m, d_img))
    for n, r in enumerate(results):
        if len(r.entries) != m:
            raise ReferentialError("retrieval results have differing lengths")
        for j, image_id in enumerate(r.ids):
            out[n, j] = pooled[image_id]
    return out


@dataclass
class Retriever:
    """Frozen retrieval model + image index + pooled image vectors for task inputs."""
    model: EmbeddingModel
    vocab: Vocab
    index: ImageIndex
    pooled: dict

    @classmethod
    def from_corpus(cls, model: EmbeddingModel, vocab: Vocab, corpus: Corpus,
                    index: ImageIndex | None = None) -> "Retriever":
        image_ids = list(index.ids) if index is not None else training_image_ids(corpus)
        if index is None:
            index = index_images(model, corpus, image_ids)
        regions = np.stack([corpus.image_features[i] for i in image_ids])
        pooled = dict(zip(image_ids, model.pool_images(regions)))
        return cls(model, vocab, index, pooled)

    def features(self, sentences, m: int) -> tuple[np.ndarray, list[RetrievalResult]]:
        results = retrieve_for_sentences(self.model, self.vocab, self.index, sentences, m)
        return image_features_for(results, self.pooled, self.model.config.d_img), results


# -- task runners ------------------------------------------------------------------------

@dataclass
class TaskOutcome:
    model: TaskModel
    metrics: dict
    predictions: list
    gold: list
    inputs: list


def run_tag_task(corpus: Corpus, vocab: Vocab, retriever: Retriever | None, run: RunConfig,
                 m: int | None = None, on_epoch=None) -> TaskOutcome:
    m = run.m if m is None else m
    if m > 0 and retriever is None:
        raise ValueError("visual-aware training needs a retriever")
    tags = corpus.tag_set()
    tag_index = {t: n for n, t in enumerate(tags)}
    cfg = run.task_config("tag", m)
    model = init_task_model(cfg, len(vocab), tags)
    train_tokens = [vocab.encode(e.tokens) for e in corpus.tag_train]
    test_tokens = [vocab.encode(e.tokens) for e in corpus.tag_test]
    train_feats = test_feats = None
    if m > 0:
        train_feats, _ = retriever.features([e.tokens for e in corpus.tag_train], m)
        test_feats, _ = retriever.features([e.tokens for e in corpus.tag_test], m)
    train_tagger(model, train_tokens, [[tag_index[t] for t in e.tags] for e in corpus.tag_train],
                 train_feats, on_epoch=on_epoch)
    pred = [[tags[i] for i in p] for p in predict_tags(model, test_tokens, test_feats)]
    gold = [e.tags for e in corpus.tag_test]
    return TaskOutcome(model, tagging_metrics(gold, pred), pred, gold, [e.tokens for e in corpus.tag_test])


def run_nli_task(corpus: Corpus, vocab: Vocab, retriever: Retriever | None, run: RunConfig,
                 m: int | None = None, on_epoch=None) -> TaskOutcome:
    m = run.m if m is None else m
    if m > 0 and retriever is None:
        raise ValueError("visual-aware training needs a retriever")
    labels = list(NLI_LABELS)
    cfg = run.task_config("nli", m)
    model = init_task_model(cfg, len(vocab), labels)

    def encode(examples):
        prem = [vocab.encode(e.premise) for e in examples]
        hyp = [vocab.encode(e.hypothesis) for e in examples]
        if m == 0:
            return prem, hyp, None, None
        # premise and hypothesis retrieve independently
        fp, _ = retriever.features([e.premise for e in examples], m)
        fh, _ = retriever.features([e.hypothesis for e in examples], m)
        return prem, hyp, fp, fh

    prem, hyp, fp, fh = encode(corpus.nli_train)
    train_pair_classifier(model, prem, hyp, [labels.index(e.label) for e in corpus.nli_train], fp, fh,
                          on_epoch=on_epoch)
    prem, hyp, fp, fh = encode(corpus.nli_test)
    pred = [labels[i] for i in predict_pairs(model, prem, hyp, fp, fh)]
    gold = [e.label for e in corpus.nli_test]
    acc = sum(a == b for a, b in zip(gold, pred)) / len(gold)
    return TaskOutcome(model, {"accuracy": acc}, pred, gold, [e.id for e in corpus.nli_test])


def run_copy_task(run: RunConfig, on_step=None, target: float | None = None) -> TaskOutcome:
    vocab = copy_vocab()
    cfg = run.task_config("copy", 0)
    model = init_task_model(cfg, len(vocab), [])
    train_copy(model, vocab, on_step=on_step, target=target)
    sources = sample_copy_batch(np.random.default_rng(run.seed + 3), 500, vocab, cfg.copy_max_len)
    decoded = decode_copy(model, vocab, sources)
    acc = copy_token_accuracy(sources, decoded, vocab.eos_id)
    return TaskOutcome(model, {"token_accuracy": acc}, [d.tokens for d in decoded], sources, sources)
