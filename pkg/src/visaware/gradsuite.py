"""The registered gradient-check cases: every differentiable op plus whole model stacks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .embedding import EmbeddingConfig, encode_image, encode_text_batch, init_embedding_model, triplet_loss, weldon_pool
from .fusion import (FusionConfig, attend_fuse, encode_and_fuse, init_encoder, init_fusion,
                     init_image_projection, project_images, residual_norm_fuse, transformer_encode)
from .gradcheck import GradCheckReport, grad_check
from .heads import (decoder_logits, init_decoder, init_pair_head, init_tag_head, pair_logits,
                    tag_logits, tag_loss)
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    shapes: list | None = None
    sampler: Callable | None = None
    coords_per_input: int | None = None


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _spread_regions(rng, shape):
    # distinct per-channel values keep the Weldon selection stable under +-h
    *lead, R, d = shape
    ranks = np.argsort(rng.random((*lead, d, R)), axis=-1)
    return 0.3 * np.swapaxes(ranks, -1, -2) + 0.01 * rng.standard_normal(shape)


def _param_case(name: str, params: dict[str, Tensor], body: Callable, extra_sampler=None,
                coords_per_input: int | None = None, noise: float = 0.2) -> GradCase:
    """Case differentiating ``body(param_dict, *extra)`` w.r.t. every parameter and extra input."""
    names = list(params)
    base = [params[k].data for k in names]

    def fn(*arrays):
        return body(dict(zip(names, arrays[:len(names)])), *arrays[len(names):])

    def sampler(rng):
        arrays = [b + noise * rng.standard_normal(b.shape) for b in base]
        if extra_sampler is not None:
            arrays.extend(extra_sampler(rng))
        return arrays

    return GradCase(name, fn, sampler=sampler, coords_per_input=coords_per_input)


def op_cases() -> list[GradCase]:
    ids = np.array([[1, 3, 0], [2, 2, 4]])
    mask = np.array([[True, True, False], [True, True, True]])
    soft_mask = np.array([[True, False, True, True, True, False, True]])
    targets = np.array([[0, 2, 1], [3, 1, 1]])
    return [
        GradCase("add", lambda a, b: a + b, [(3, 4), (4,)]),
        GradCase("sub", lambda a, b: a - b, [(2, 3, 4), (3, 4)]),
        GradCase("mul", lambda a, b: a * b, [(3, 4), (3, 4)]),
        GradCase("scale", lambda a: T.scale(a, -2.5), [(3, 4)]),
        GradCase("sigmoid", T.sigmoid, [(3, 4)]),
        GradCase("tanh", T.tanh, [(3, 4)]),
        GradCase("relu", T.relu, sampler=lambda r: [_away_from_zero(r, (3, 4))]),
        GradCase("abs", T.abs_, sampler=lambda r: [_away_from_zero(r, (3, 4))]),
        GradCase("sum", lambda a: T.sum_(a, axis=1), [(3, 4)]),
        GradCase("mean", lambda a: T.mean(a, axis=-1), [(2, 3, 4)]),
        GradCase("masked_mean", lambda a: T.masked_mean(a, mask), [(2, 3, 4)]),
        GradCase("matmul", T.matmul, [(3, 4), (4, 2)]),
        GradCase("matmul_batched", T.matmul, [(2, 3, 4), (2, 4, 5)]),
        GradCase("matmul_broadcast", T.matmul, [(2, 3, 4), (4, 5)]),
        GradCase("transpose", lambda a: T.transpose(a, (1, 0, 2)) * Tensor(np.arange(24.0).reshape(3, 2, 4)),
                 [(2, 3, 4)]),
        GradCase("reshape", lambda a: T.reshape(a, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3)), [(3, 4)]),
        GradCase("getitem", lambda a: a[:, 1:3], [(3, 4)]),
        GradCase("concat", lambda a, b: T.concat([a, b], axis=-1), [(2, 3), (2, 5)]),
        GradCase("stack", lambda a, b: T.stack([a, b], axis=1), [(2, 3), (2, 3)]),
        GradCase("embedding", lambda w: T.embedding(w, ids), [(5, 3)]),
        GradCase("gather_last", lambda a: T.gather_last(a, targets), [(2, 3, 4)]),
        GradCase("softmax", lambda a: T.softmax(a, axis=-1), [(2, 7)]),
        GradCase("softmax_masked", lambda a: T.softmax(a, mask=soft_mask), [(1, 7)]),
        GradCase("log_softmax", lambda a: T.log_softmax(a), [(3, 5)]),
        GradCase("cross_entropy", lambda a: T.cross_entropy(a, targets, mask), [(2, 3, 4)]),
        GradCase("layer_norm", lambda a, g, b: T.layer_norm(a, g, b, 1e-5), [(3, 6), (6,), (6,)]),
        GradCase("l2_normalize", T.l2_normalize, [(3, 5)]),
        GradCase("weldon_pool", lambda a: weldon_pool(a, 3, 2, 0.7), sampler=lambda r: [_spread_regions(r, (2, 8, 5))]),
        GradCase("triplet_loss",
                 lambda a, b, c: triplet_loss(T.l2_normalize(a), T.l2_normalize(b), T.l2_normalize(c), 2.5),
                 [(4, 6), (4, 6), (4, 6)]),
    ]


def model_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    ecfg = EmbeddingConfig(vocab_size=9, d_t=6, d_s=5, d_img=7, k_plus=2, k_minus=1)
    emb = init_embedding_model(ecfg, seed).params
    text_ids = np.array([[3, 4, 5, 6], [7, 8, 3, 0]])
    text_mask = np.array([[True] * 4, [True, True, True, False]])

    def embed_body(p, regions):
        y = encode_text_batch(text_ids, text_mask, p, ecfg)
        x = encode_image(regions, p, ecfg)
        z = y[np.array([1, 0])]
        return triplet_loss(x, y, z, alpha=2.5)

    fcfg = FusionConfig(vocab_size=11, d=8, n_heads=2, n_fusion_heads=2, n_layers=2, d_ff=12, max_len=8, d_img=6)
    enc = init_encoder(fcfg, rng)
    img = init_image_projection(fcfg, rng)
    fus = init_fusion(fcfg, rng)
    tag = init_tag_head(fcfg.d, 4, rng)
    pair = init_pair_head(fcfg.d, 3, rng)
    dec = init_decoder(fcfg.d, fcfg.d_ff, fcfg.vocab_size, fcfg.max_len, rng)
    tok = np.array([[2, 5, 7, 1, 0], [3, 3, 9, 10, 4]])
    tok_mask = np.array([[True] * 4 + [False], [True] * 5])
    tags = np.array([[0, 1, 3, 2, 0], [2, 2, 1, 0, 3]])

    def images(rng):
        return [rng.standard_normal((2, 3, fcfg.d_img))]

    def hidden(rng):
        return [rng.standard_normal((2, 5, fcfg.d)), rng.standard_normal((2, 3, fcfg.d))]

    stack = {**enc, **img, **fus, **tag}
    return [
        _param_case("sru_text_path+image_path+triplet", emb, embed_body,
                    extra_sampler=lambda r: [_spread_regions(r, (2, 6, ecfg.d_img))], coords_per_input=10),
        _param_case("transformer_encode", enc, lambda p: transformer_encode(tok, p, fcfg, tok_mask),
                    coords_per_input=8),
        _param_case("project_images", img, lambda p, x: project_images(x, p),
                    extra_sampler=lambda r: [r.uniform(0.2, 1.0, (2, 3, fcfg.d_img))]),
        _param_case("attend_fuse", fus, lambda p, h, m: attend_fuse(T.as_tensor(h), T.as_tensor(m), p, fcfg),
                    extra_sampler=hidden, coords_per_input=12),
        _param_case("residual_norm_fuse", fus,
                    lambda p, h, hp: residual_norm_fuse(T.as_tensor(h), T.as_tensor(hp), p, fcfg).values,
                    extra_sampler=lambda r: [r.standard_normal((2, 5, fcfg.d)), r.standard_normal((2, 5, fcfg.d))],
                    coords_per_input=12),
        _param_case("encoder+attend+fuse+tag_head", stack,
                    lambda p, x: tag_loss(encode_and_fuse(tok, tok_mask, x, p, fcfg), p, tags, tok_mask),
                    extra_sampler=images, coords_per_input=6),
        _param_case("pair_head", {**fus, **pair},
                    lambda p, a, b, c: pair_logits(residual_norm_fuse(T.as_tensor(a), T.as_tensor(b), p, fcfg),
                                                   residual_norm_fuse(T.as_tensor(c), T.as_tensor(b), p, fcfg), p),
                    extra_sampler=lambda r: [r.standard_normal((2, 5, fcfg.d)) for _ in range(3)],
                    coords_per_input=12),
        _param_case("decoder", dec, lambda p, mem: decoder_logits(tok[:, :4], mem, p, fcfg.n_heads,
                                                                  memory_mask=tok_mask),
                    extra_sampler=lambda r: [r.standard_normal((2, 5, fcfg.d))], coords_per_input=8),
    ]


def all_cases(seed: int = 0) -> list[GradCase]:
    return op_cases() + model_cases(seed)


def run_suite(n_points: int = 10, seed: int = 0, tolerance: float = TOLERANCE,
              cases: list[GradCase] | None = None) -> list[GradCheckReport]:
    reports = []
    for case in cases or all_cases(seed):
        reports.append(grad_check(case.fn, case.shapes or [], tolerance=tolerance, n_points=n_points,
                                  seed=seed, sampler=case.sampler, name=case.name,
                                  coords_per_input=case.coords_per_input))
    return reports
