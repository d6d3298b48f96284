"""Training and evaluation loops for the downstream tasks.

Every task model is encoder + image projection + fusion + head, initialized in
that order from one seed, so the text-only baseline (``m = 0``) starts from
exactly the same weights as the visual-aware model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import EOS, NLI_LABELS, OUTSIDE_TAG, SPECIALS, Vocab
from .embedding import pad_batch
from .errors import ContractError
from .fusion import (FusionConfig, encode_and_fuse, init_encoder, init_fusion,
                     init_image_projection)
from .heads import (decoder_loss, greedy_decode_batch, init_decoder, init_pair_head,
                    init_tag_head, pair_logits, tag_loss, tag_sequence)
from .optim import Adam
from .tensor import Tensor, cross_entropy, no_grad

TASKS = ("tag", "nli", "copy")


@dataclass
class TaskConfig:
    task: str = "tag"
    d: int = 64
    n_heads: int = 4
    n_fusion_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 64
    d_img: int = 128
    m: int = 8
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    copy_vocab: int = 20
    copy_max_len: int = 10
    copy_steps: int = 1000
    copy_batch: int = 64
    copy_eval_size: int = 300

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.m < 0:
            raise ContractError("m must be non-negative")

    def fusion_config(self, vocab_size: int) -> FusionConfig:
        max_len = max(self.max_len, self.copy_max_len + 2)
        return FusionConfig(vocab_size=vocab_size, d=self.d, n_heads=self.n_heads,
                            n_fusion_heads=self.n_fusion_heads, n_layers=self.n_layers,
                            d_ff=self.d_ff, max_len=max_len, d_img=self.d_img)


@dataclass
class TaskModel:
    config: TaskConfig
    fusion: FusionConfig
    params: dict
    labels: list            # tag names, NLI labels, or [] for copy
    log: list = field(default_factory=list)


def init_task_model(cfg: TaskConfig, vocab_size: int, labels: Sequence[str]) -> TaskModel:
    fcfg = cfg.fusion_config(vocab_size)
    rng = np.random.default_rng(cfg.seed)
    params = {}
    params.update(init_encoder(fcfg, rng))
    params.update(init_image_projection(fcfg, rng))
    params.update(init_fusion(fcfg, rng))
    if cfg.task == "tag":
        params.update(init_tag_head(fcfg.d, len(labels), rng))
    elif cfg.task == "nli":
        params.update(init_pair_head(fcfg.d, len(labels), rng))
    else:
        params.update(init_decoder(fcfg.d, fcfg.d_ff, vocab_size, fcfg.max_len, rng))
    return TaskModel(cfg, fcfg, params, list(labels))


def _image_batch(features: np.ndarray | None, rows: np.ndarray):
    if features is None or features.shape[1] == 0:
        return None
    return features[rows]


def _fuse(model: TaskModel, seqs, features, rows):
    ids, mask = pad_batch(seqs)
    return encode_and_fuse(ids, mask, _image_batch(features, rows), model.params, model.fusion), mask


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- tagging -------------------------------------------------------------------------

def train_tagger(model: TaskModel, token_ids: Sequence[list[int]], tag_ids: Sequence[list[int]],
                 features: np.ndarray | None, on_epoch: Callable[[dict], None] | None = None) -> TaskModel:
    """``features`` is ``[n, m, d_img]`` pooled image vectors per sentence, or None for text only."""
    cfg = model.config
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.lr)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for rows in _epoch_batches(len(token_ids), cfg.batch_size, rng):
            fused, mask = _fuse(model, [token_ids[i] for i in rows], features, rows)
            tags, _ = pad_batch([tag_ids[i] for i in rows])
            loss = tag_loss(fused, model.params, tags, mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)
        record = {"epoch": epoch, "loss": total / count}
        model.log.append(record)
        if on_epoch:
            on_epoch(record)
    return model


def predict_tags(model: TaskModel, token_ids, features, batch_size: int = 128) -> list[list[int]]:
    preds = []
    with no_grad():
        for start in range(0, len(token_ids), batch_size):
            rows = np.arange(start, min(start + batch_size, len(token_ids)))
            fused, mask = _fuse(model, [token_ids[i] for i in rows], features, rows)
            best = np.argmax(tag_sequence(fused, model.params).data, axis=-1)
            preds.extend(best[j, :mask[j].sum()].tolist() for j in range(len(rows)))
    return preds


def spans(tags: Sequence[str]) -> set:
    """Maximal runs of one non-O tag as (start, end, tag)."""
    out, start = set(), None
    for i, t in enumerate(list(tags) + [OUTSIDE_TAG]):
        if start is not None and t != tags[start]:
            out.add((start, i, tags[start]))
            start = None
        if start is None and t != OUTSIDE_TAG and i < len(tags):
            start = i
    return out


def tagging_metrics(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> dict:
    tok = amb = amb_ok = tok_ok = 0
    tp = n_gold = n_pred = 0
    for g, p in zip(gold, pred):
        for a, b in zip(g, p):
            tok += 1
            tok_ok += a == b
            if a != OUTSIDE_TAG:
                amb += 1
                amb_ok += a == b
        gs, ps = spans(g), spans(p)
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": amb_ok / amb if amb else 0.0, "span_f1": f1,
            "token_accuracy": tok_ok / tok if tok else 0.0}


def tagging_tsv(tokens: Sequence[Sequence[str]], gold, pred) -> str:
    blocks = []
    for toks, g, p in zip(tokens, gold, pred):
        blocks.append("\n".join(f"{t}\t{a}\t{b}" for t, a, b in zip(toks, g, p)))
    return "\n\n".join(blocks) + "\n"


# -- sentence pairs ----------------------------------------------------------------------

def train_pair_classifier(model: TaskModel, premises, hypotheses, labels: Sequence[int],
                          prem_features, hyp_features,
                          on_epoch: Callable[[dict], None] | None = None) -> TaskModel:
    cfg = model.config
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.lr)
    labels = np.asarray(labels, dtype=np.int64)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for rows in _epoch_batches(len(premises), cfg.batch_size, rng):
            fp, _ = _fuse(model, [premises[i] for i in rows], prem_features, rows)
            fh, _ = _fuse(model, [hypotheses[i] for i in rows], hyp_features, rows)
            loss = cross_entropy(pair_logits(fp, fh, model.params), labels[rows])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)
        record = {"epoch": epoch, "loss": total / count}
        model.log.append(record)
        if on_epoch:
            on_epoch(record)
    return model


def predict_pairs(model: TaskModel, premises, hypotheses, prem_features, hyp_features,
                  batch_size: int = 128) -> list[int]:
    preds = []
    with no_grad():
        for start in range(0, len(premises), batch_size):
            rows = np.arange(start, min(start + batch_size, len(premises)))
            fp, _ = _fuse(model, [premises[i] for i in rows], prem_features, rows)
            fh, _ = _fuse(model, [hypotheses[i] for i in rows], hyp_features, rows)
            preds.extend(np.argmax(pair_logits(fp, fh, model.params).data, axis=-1).tolist())
    return preds


# -- copy task ----------------------------------------------------------------------------

def copy_vocab(size: int = 20) -> Vocab:
    return Vocab(f"c{i}" for i in range(size))


def sample_copy_batch(rng, n: int, vocab: Vocab, max_len: int) -> list[list[int]]:
    lo = len(SPECIALS)
    return [rng.integers(lo, len(vocab), size=int(rng.integers(1, max_len + 1))).tolist() for _ in range(n)]


def copy_token_accuracy(sources: Sequence[list[int]], decoded, eos_id: int) -> float:
    """Position-wise accuracy against ``source + [EOS]``; missing positions count as wrong."""
    ok = total = 0
    for src, res in zip(sources, decoded):
        out = list(res.tokens) + ([] if res.truncated else [eos_id])
        for i, tok in enumerate(list(src) + [eos_id]):
            total += 1
            ok += i < len(out) and out[i] == tok
    return ok / total if total else 0.0


def decode_copy(model: TaskModel, vocab: Vocab, sources, batch_size: int = 128):
    out = []
    with no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = sources[start:start + batch_size]
            ids, mask = pad_batch(chunk)
            fused = encode_and_fuse(ids, mask, None, model.params, model.fusion)
            out.extend(greedy_decode_batch(fused, model.params, model.fusion.n_heads,
                                           model.config.copy_max_len + 1, vocab.bos_id, vocab.eos_id))
    return out


def train_copy(model: TaskModel, vocab: Vocab, on_step: Callable[[dict], None] | None = None,
               eval_every: int = 250, target: float | None = None) -> TaskModel:
    """Teacher-forced training on random copy sequences; text only.

    Stops early once the held-out token accuracy reaches ``target``.
    """
    cfg = model.config
    rng = np.random.default_rng(cfg.seed + 1)
    held_out = sample_copy_batch(np.random.default_rng(cfg.seed + 2), cfg.copy_eval_size, vocab, cfg.copy_max_len)
    opt = Adam(model.params, lr=cfg.lr)
    for step in range(1, cfg.copy_steps + 1):
        batch = sample_copy_batch(rng, cfg.copy_batch, vocab, cfg.copy_max_len)
        ids, mask = pad_batch(batch)
        t_in, _ = pad_batch([[vocab.bos_id] + s for s in batch])
        t_out, t_mask = pad_batch([s + [vocab.eos_id] for s in batch])
        fused = encode_and_fuse(ids, mask, None, model.params, model.fusion)
        loss = decoder_loss(t_in, t_out, t_mask, fused, model.params, model.fusion.n_heads)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == cfg.copy_steps:
            acc = copy_token_accuracy(held_out, decode_copy(model, vocab, held_out), vocab.eos_id)
            record = {"epoch": step, "loss": loss.item(), "token_accuracy": acc}
            model.log.append(record)
            if on_step:
                on_step(record)
            if target is not None and acc >= target:
                break
    return model
