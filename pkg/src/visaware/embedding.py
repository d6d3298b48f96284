"""Shared semantic-visual embedding: an SRU text path and a Weldon-pooled image path.

Both paths end in an L2 normalization, so similarities in the shared space are
plain dot products. Training pairs every image with its caption and with the
most similar non-matching caption in the same mini-batch, under the hinge

    loss(x, y, z) = max(0, alpha - x.y + x.z)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import (ContractError, EmptyInputError, IngestionError, LengthError,
                     NoNegativeError, PoolingConfigError, VocabularyError)
from .optim import Adam
from .tensor import Tensor, make_op, no_grad


@dataclass
class EmbeddingConfig:
    vocab_size: int
    d_t: int = 64
    d_s: int = 64
    d_img: int = 128
    n_layers: int = 1
    k_plus: int = 3
    k_minus: int = 3
    beta: float = 1.0
    alpha: float = 0.2
    max_len: int = 64
    symmetric: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


# -- parameters --------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


def init_text_path(cfg: EmbeddingConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.d_t
    p = {"text.embed": rng.standard_normal((cfg.vocab_size, d)) * 0.5}
    for layer in range(cfg.n_layers):
        pre = f"text.sru{layer}."
        p[pre + "w"] = _glorot(rng, d, d)
        p[pre + "w_f"] = _glorot(rng, d, d)
        p[pre + "b_f"] = np.zeros(d)
        p[pre + "w_r"] = _glorot(rng, d, d)
        p[pre + "b_r"] = np.zeros(d)
    p["text.proj.w"] = _glorot(rng, d, cfg.d_s)
    p["text.proj.b"] = np.zeros(cfg.d_s)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def init_image_path(cfg: EmbeddingConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {"image.proj.w": _glorot(rng, cfg.d_img, cfg.d_s), "image.proj.b": np.zeros(cfg.d_s)}
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# -- text path ---------------------------------------------------------------

def sru_layer(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """One SRU layer over ``x[B, T, d]``; gates see only the current input.

    f_t = sigmoid(e_t W_f + b_f); c_t = f_t * c_{t-1} + (1 - f_t) * (e_t W)
    r_t = sigmoid(e_t W_r + b_r); h_t = r_t * c_t + (1 - r_t) * e_t
    """
    u = x @ params[prefix + "w"]
    f = T.sigmoid(x @ params[prefix + "w_f"] + params[prefix + "b_f"])
    r = T.sigmoid(x @ params[prefix + "w_r"] + params[prefix + "b_r"])
    steps = x.shape[1]
    c = None
    hs = []
    for t in range(steps):
        f_t, r_t = f[:, t], r[:, t]
        carry = (1.0 - f_t) * u[:, t]
        c = carry if c is None else f_t * c + carry
        hs.append(r_t * c + (1.0 - r_t) * x[:, t])
    return T.stack(hs, axis=1)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences into ``ids[B, T]`` and a boolean ``mask[B, T]``."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def validate_tokens(tokens: Sequence[int], vocab_size: int, max_len: int) -> None:
    if len(tokens) == 0:
        raise EmptyInputError("empty token sequence")
    if len(tokens) > max_len:
        raise LengthError(f"sequence of length {len(tokens)} exceeds max_len={max_len}")
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise VocabularyError(f"token id {t} outside vocabulary of size {vocab_size}")


def encode_text_batch(ids: np.ndarray, mask: np.ndarray, params: dict[str, Tensor],
                      cfg: EmbeddingConfig) -> Tensor:
    h = T.embedding(params["text.embed"], ids)
    for layer in range(cfg.n_layers):
        h = sru_layer(h, params, f"text.sru{layer}.")
    pooled = T.masked_mean(h, mask)
    return T.l2_normalize(pooled @ params["text.proj.w"] + params["text.proj.b"])


def encode_text(tokens: Sequence[int], params: dict[str, Tensor], cfg: EmbeddingConfig) -> Tensor:
    """Embed one token-id sequence into the shared space (unit norm)."""
    validate_tokens(tokens, cfg.vocab_size, cfg.max_len)
    ids, mask = pad_batch([tokens])
    return encode_text_batch(ids, mask, params, cfg)[0]


# -- image path --------------------------------------------------------------

def _sequential_mean(vals: np.ndarray) -> np.ndarray:
    # left-to-right accumulation along axis -2, matching a plain Python loop
    acc = vals[..., 0, :]
    for j in range(1, vals.shape[-2]):
        acc = acc + vals[..., j, :]
    return acc / vals.shape[-2]


def weldon_pool(regions, k_plus: int = 3, k_minus: int = 3, beta: float = 1.0) -> Tensor:
    """Per channel: mean of the ``k_plus`` largest regions + ``beta`` * mean of the ``k_minus`` smallest.

    ``regions`` is ``[..., R, d]``. The top values are summed in descending
    order and the bottom values in ascending order.
    """
    regions = T.as_tensor(regions)
    if regions.ndim < 2:
        raise PoolingConfigError(f"regions must be at least 2-D, got shape {regions.shape}")
    R = regions.shape[-2]
    if k_plus < 1 or k_minus < 0:
        raise PoolingConfigError(f"need k_plus >= 1 and k_minus >= 0, got {k_plus}, {k_minus}")
    if k_plus + k_minus > R:
        raise PoolingConfigError(f"k_plus + k_minus = {k_plus + k_minus} exceeds region count {R}")
    x = regions.data
    top_idx = np.argsort(-x, axis=-2, kind="stable")[..., :k_plus, :]
    out = _sequential_mean(np.take_along_axis(x, top_idx, axis=-2))
    bot_idx = None
    if k_minus:
        bot_idx = np.argsort(x, axis=-2, kind="stable")[..., :k_minus, :]
        out = out + beta * _sequential_mean(np.take_along_axis(x, bot_idx, axis=-2))

    def bw(g):
        gx = np.zeros_like(x)
        share = np.broadcast_to(g[..., None, :] / k_plus, top_idx.shape)
        np.put_along_axis(gx, top_idx, share, axis=-2)
        if bot_idx is not None:
            gb = np.zeros_like(x)
            share = np.broadcast_to(beta * g[..., None, :] / k_minus, bot_idx.shape)
            np.put_along_axis(gb, bot_idx, share, axis=-2)
            gx = gx + gb
        return (gx,)

    return make_op(out, (regions,), bw, "weldon_pool")


def encode_image(regions, params: dict[str, Tensor], cfg: EmbeddingConfig) -> Tensor:
    """Weldon pooling, affine projection, L2 normalization. Works on ``[R, d]`` or ``[B, R, d]``."""
    pooled = weldon_pool(regions, cfg.k_plus, cfg.k_minus, cfg.beta)
    single = pooled.ndim == 1
    if single:
        pooled = pooled.reshape(1, -1)
    out = T.l2_normalize(pooled @ params["image.proj.w"] + params["image.proj.b"])
    return out[0] if single else out


# -- objective ---------------------------------------------------------------

def _check_unit(t: Tensor, label: str, tol: float = 1e-4) -> None:
    norms = np.sqrt((t.data * t.data).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{label} is not unit norm (|norm - 1| up to {np.abs(norms - 1).max():.2e})")


def triplet_loss(x, y, z, alpha: float = 0.2) -> Tensor:
    """``max(0, alpha - x.y + x.z)`` per row of unit vectors; a scalar for 1-D inputs."""
    x, y, z = T.as_tensor(x), T.as_tensor(y), T.as_tensor(z)
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    for t, label in ((x, "anchor x"), (y, "positive y"), (z, "negative z")):
        _check_unit(t, label)
    pos = (x * y).sum(axis=-1)
    neg = (x * z).sum(axis=-1)
    return T.relu(alpha - pos + neg)


def mine_hard_negative(anchor, candidates, forbidden=()) -> int:
    """Index of the allowed candidate most similar to ``anchor``; ties go to the lowest index."""
    a = np.asarray(anchor.data if isinstance(anchor, Tensor) else anchor, dtype=np.float64)
    c = np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates, dtype=np.float64)
    if c.ndim == 1:
        c = c[None, :]
    banned = set(int(i) for i in forbidden)
    allowed = [i for i in range(c.shape[0]) if i not in banned]
    if not allowed:
        raise NoNegativeError("every candidate is forbidden")
    sims = c @ a
    best = allowed[0]
    for i in allowed[1:]:
        if sims[i] > sims[best]:
            best = i
    return best


def mine_hard_negatives(sims: np.ndarray, forbidden: np.ndarray) -> np.ndarray:
    """Row-wise argmax of ``sims`` over entries not in ``forbidden``; -1 when a row has none."""
    masked = np.where(forbidden, -np.inf, sims)
    idx = np.argmax(masked, axis=1)
    idx[np.all(forbidden, axis=1)] = -1
    return idx


# -- model ---------------------------------------------------------------------

@dataclass
class EmbeddingModel:
    config: EmbeddingConfig
    params: dict[str, Tensor]
    log: list = field(default_factory=list)

    def embed_texts(self, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        for s in seqs:
            validate_tokens(s, self.config.vocab_size, self.config.max_len)
        out = []
        with no_grad():
            for start in range(0, len(seqs), batch_size):
                ids, mask = pad_batch(seqs[start:start + batch_size])
                out.append(encode_text_batch(ids, mask, self.params, self.config).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.d_s))

    def embed_images(self, regions: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(regions), batch_size):
                out.append(encode_image(regions[start:start + batch_size], self.params, self.config).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.d_s))

    def pool_images(self, regions: np.ndarray) -> np.ndarray:
        """Weldon-pooled image vectors before the shared-space projection."""
        c = self.config
        with no_grad():
            return weldon_pool(np.asarray(regions, dtype=np.float64), c.k_plus, c.k_minus, c.beta).data


def init_embedding_model(cfg: EmbeddingConfig, seed: int) -> EmbeddingModel:
    rng = np.random.default_rng(seed)
    params = init_text_path(cfg, rng)
    params.update(init_image_path(cfg, rng))
    return EmbeddingModel(cfg, params)


def batch_loss(model: EmbeddingModel, seqs, regions: np.ndarray, image_ids: np.ndarray) -> tuple[Tensor, int]:
    """Mean in-batch hard-negative triplet loss and the number of triplets used."""
    cfg = model.config
    ids, mask = pad_batch(seqs)
    y = encode_text_batch(ids, mask, model.params, cfg)
    x = encode_image(regions, model.params, cfg)
    forbidden = image_ids[:, None] == image_ids[None, :]
    sims = x.data @ y.data.T
    neg = mine_hard_negatives(sims, forbidden)
    rows = np.flatnonzero(neg >= 0)
    if rows.size == 0:
        return None, 0
    losses = triplet_loss(x[rows], y[rows], y[neg[rows]], cfg.alpha)
    total = losses.sum()
    count = rows.size
    if cfg.symmetric:
        neg_img = mine_hard_negatives(sims.T, forbidden.T)
        rows_t = np.flatnonzero(neg_img >= 0)
        if rows_t.size:
            total = total + triplet_loss(y[rows_t], x[rows_t], x[neg_img[rows_t]], cfg.alpha).sum()
            count += rows_t.size
    return total / count, count


def train_embedding(texts: Sequence[Sequence[int]], images: np.ndarray, pairs: Sequence[tuple[int, int]],
                    cfg: EmbeddingConfig, train: EmbeddingTrainConfig,
                    on_epoch: Callable[[dict], None] | None = None,
                    model: EmbeddingModel | None = None) -> EmbeddingModel:
    """Learn both paths jointly on ``pairs`` of (text index, image index).

    ``images`` is ``[N_img, R, d_img]``. Returns the trained model; its ``log``
    holds one record per epoch with the mean triplet loss.
    """
    if len(pairs) == 0:
        raise IngestionError("training corpus has no pairs")
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.min() < 0 or pairs[:, 0].max() >= len(texts) or pairs[:, 1].max() >= len(images):
        raise IngestionError("a pair references a text or image that does not exist")
    for s in texts:
        validate_tokens(s, cfg.vocab_size, cfg.max_len)
    if model is None:
        model = init_embedding_model(cfg, train.seed)
    rng = np.random.default_rng(train.seed + 1)
    opt = Adam(model.params, lr=train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.eps)
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(len(pairs))
        loss_sum, n = 0.0, 0
        for start in range(0, len(order), train.batch_size):
            chunk = pairs[order[start:start + train.batch_size]]
            loss, count = batch_loss(model, [texts[i] for i in chunk[:, 0]], images[chunk[:, 1]], chunk[:, 1])
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * count
            n += count
        record = {"epoch": epoch, "loss": loss_sum / max(n, 1)}
        model.log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return model
