"""Task layers on top of the fused representation: token tagging, sentence-pair
classification, and a one-layer transformer decoder with greedy search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .fusion import (FusedSequence, _glorot, as_params, attention_params, feed_forward,
                     feed_forward_params, layer_norm, layer_norm_params, multi_head_attention)
from .tensor import Tensor, no_grad


def init_tag_head(d: int, n_tags: int, rng) -> dict[str, Tensor]:
    if n_tags < 2:
        raise ContractError("a tagging head needs at least 2 tags")
    return as_params({"tag.w": _glorot(rng, d, n_tags), "tag.b": np.zeros(n_tags)})


def init_pair_head(d: int, n_classes: int, rng) -> dict[str, Tensor]:
    if n_classes < 2:
        raise ContractError("a pair head needs at least 2 classes")
    return as_params({"pair.w": _glorot(rng, 4 * d, n_classes), "pair.b": np.zeros(n_classes)})


def init_decoder(d: int, d_ff: int, vocab_size: int, max_len: int, rng) -> dict[str, Tensor]:
    p = {"dec.embed": rng.standard_normal((vocab_size, d)) * 0.5,
         "dec.pos": rng.standard_normal((max_len, d)) * 0.1}
    p.update(attention_params("dec.self", d, rng))
    p.update(layer_norm_params("dec.ln1", d))
    p.update(attention_params("dec.cross", d, rng))
    p.update(layer_norm_params("dec.ln2", d))
    p.update(feed_forward_params("dec.ff", d, d_ff, rng))
    p.update(layer_norm_params("dec.ln3", d))
    p["dec.out.w"] = _glorot(rng, d, vocab_size)
    p["dec.out.b"] = np.zeros(vocab_size)
    return as_params(p)


def _values(seq) -> Tensor:
    return seq.values if isinstance(seq, FusedSequence) else T.as_tensor(seq)


# -- tagging -----------------------------------------------------------------------

def tag_logits(fused, params: dict) -> Tensor:
    return _values(fused) @ params["tag.w"] + params["tag.b"]


def tag_sequence(fused, params: dict) -> Tensor:
    """Per-token distribution over tags, ``[..., I, T]``."""
    return T.softmax(tag_logits(fused, params), axis=-1)


def tag_loss(fused, params: dict, tags, mask=None) -> Tensor:
    """Mean token cross-entropy over unmasked positions."""
    return T.cross_entropy(tag_logits(fused, params), tags, mask)


# -- pair classification ---------------------------------------------------------------

def _pooled(seq) -> Tensor:
    vals = _values(seq)
    if vals.shape[-2] == 0:
        raise ContractError("cannot classify an empty sequence")
    mask = seq.mask if isinstance(seq, FusedSequence) and seq.mask is not None else np.ones(vals.shape[:-1])
    return T.masked_mean(vals, mask)


def pair_features(premise, hypothesis) -> Tensor:
    """``[h_p; h_h; |h_p - h_h|; h_p * h_h]`` from mean-pooled sequences."""
    hp, hh = _pooled(premise), _pooled(hypothesis)
    return T.concat([hp, hh, T.abs_(hp - hh), hp * hh], axis=-1)


def pair_logits(premise, hypothesis, params: dict) -> Tensor:
    feats = pair_features(premise, hypothesis)
    single = feats.ndim == 1
    if single:
        feats = feats.reshape(1, -1)
    out = feats @ params["pair.w"] + params["pair.b"]
    return out[0] if single else out


def classify_pair(premise, hypothesis, params: dict) -> Tensor:
    return T.softmax(pair_logits(premise, hypothesis, params), axis=-1)


# -- decoder -------------------------------------------------------------------

@dataclass
class DecodeResult:
    tokens: list
    truncated: bool


def decoder_logits(target_in, memory, params: dict, n_heads: int, eps: float = 1e-5,
                   memory_mask=None) -> Tensor:
    """Teacher-forced logits ``[B, J, V]`` for decoder inputs ``[B, J]`` over ``memory[B, I, d]``."""
    ids = np.asarray(target_in, dtype=np.int64)
    mem = _values(memory)
    if memory_mask is None and isinstance(memory, FusedSequence):
        memory_mask = memory.mask
    J = ids.shape[1]
    if J > params["dec.pos"].shape[0]:
        raise ContractError(f"decoder input length {J} exceeds positional table")
    x = T.embedding(params["dec.embed"], ids) + params["dec.pos"][:J]
    att, _ = multi_head_attention(x, x, params, "dec.self", n_heads, causal=True)
    x = layer_norm(x + att, params, "dec.ln1", eps)
    att, _ = multi_head_attention(x, mem, params, "dec.cross", n_heads, key_mask=memory_mask)
    x = layer_norm(x + att, params, "dec.ln2", eps)
    x = layer_norm(x + feed_forward(x, params, "dec.ff"), params, "dec.ln3", eps)
    return x @ params["dec.out.w"] + params["dec.out.b"]


def decoder_loss(target_in, target_out, target_mask, memory, params: dict, n_heads: int,
                 eps: float = 1e-5) -> Tensor:
    return T.cross_entropy(decoder_logits(target_in, memory, params, n_heads, eps), target_out, target_mask)


def greedy_decode_batch(memory, params: dict, n_heads: int, max_len: int, bos_id: int, eos_id: int,
                        eps: float = 1e-5) -> list[DecodeResult]:
    """Greedy decoding from BOS for every sequence in ``memory[B, I, d]``."""
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    mem = _values(memory)
    mask = memory.mask if isinstance(memory, FusedSequence) else None
    B = mem.shape[0]
    seqs = np.full((B, 1), bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with no_grad():
        for _ in range(max_len):
            logits = decoder_logits(seqs, mem, params, n_heads, eps, memory_mask=mask).data[:, -1]
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, eos_id, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all():
                break
    results = []
    for row in seqs[:, 1:]:
        hits = np.flatnonzero(row == eos_id)
        if hits.size:
            results.append(DecodeResult([int(t) for t in row[:hits[0]]], False))
        else:
            results.append(DecodeResult([int(t) for t in row], True))
    return results


def greedy_decode(fused, params: dict, n_heads: int, max_len: int, bos_id: int, eos_id: int,
                  eps: float = 1e-5) -> DecodeResult:
    """Decode one fused sequence ``[I, d]``; truncation at ``max_len`` is flagged."""
    vals = _values(fused)
    mask = fused.mask if isinstance(fused, FusedSequence) else None
    if vals.ndim == 2:
        vals = vals.reshape(1, *vals.shape)
        mask = None if mask is None else np.asarray(mask).reshape(1, -1)
    return greedy_decode_batch(FusedSequence(vals, mask), params, n_heads, max_len, bos_id, eos_id, eps)[0]
