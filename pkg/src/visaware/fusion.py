"""Visual-aware sentence encoder.

Text goes through a post-LN transformer encoder to give ``H``; each retrieved
image's pooled feature vector goes through ``relu(x W + b)`` to give ``M``.
One multi-head attention layer lets every text position attend over the images,

    H' = ATT(H, K_M, V_M)

and the two are fused as

    H_hat = LayerNorm((H + H') W^T + b)

Images carry no positional signal, so ``H'`` does not depend on the order of
the retrieved set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, LengthError
from .tensor import Tensor


@dataclass
class FusionConfig:
    vocab_size: int
    d: int = 64
    n_heads: int = 4
    n_fusion_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 64
    d_img: int = 128
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.n_heads or self.d % self.n_fusion_heads:
            raise ContractError(f"d={self.d} must be divisible by n_heads and n_fusion_heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusedSequence:
    values: Tensor            # [..., I, d]
    mask: np.ndarray | None   # [..., I], True on real tokens

    @property
    def shape(self):
        return self.values.shape


def _glorot(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


def attention_params(prefix: str, d: int, rng) -> dict:
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = _glorot(rng, d, d)
        p[f"{prefix}.b{name}"] = np.zeros(d)
    return p


def layer_norm_params(prefix: str, d: int) -> dict:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def feed_forward_params(prefix: str, d: int, d_ff: int, rng) -> dict:
    return {f"{prefix}.w1": _glorot(rng, d, d_ff), f"{prefix}.b1": np.zeros(d_ff),
            f"{prefix}.w2": _glorot(rng, d_ff, d), f"{prefix}.b2": np.zeros(d)}


def as_params(raw: dict) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def init_encoder(cfg: FusionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {"enc.embed": rng.standard_normal((cfg.vocab_size, cfg.d)) * 0.5,
         "enc.pos": rng.standard_normal((cfg.max_len, cfg.d)) * 0.1}
    for layer in range(cfg.n_layers):
        pre = f"enc.l{layer}"
        p.update(attention_params(pre + ".attn", cfg.d, rng))
        p.update(layer_norm_params(pre + ".ln1", cfg.d))
        p.update(feed_forward_params(pre + ".ff", cfg.d, cfg.d_ff, rng))
        p.update(layer_norm_params(pre + ".ln2", cfg.d))
    return as_params(p)


def init_image_projection(cfg: FusionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return as_params({"img.w": _glorot(rng, cfg.d_img, cfg.d), "img.b": np.zeros(cfg.d)})


def init_fusion(cfg: FusionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = attention_params("fuse.attn", cfg.d, rng)
    p["fuse.w"] = np.eye(cfg.d)
    p["fuse.b"] = np.zeros(cfg.d)
    p.update(layer_norm_params("fuse.ln", cfg.d))
    return as_params(p)


# -- building blocks -----------------------------------------------------------

def multi_head_attention(queries: Tensor, keys_values: Tensor, params: dict, prefix: str, n_heads: int,
                         key_mask: np.ndarray | None = None, causal: bool = False) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``n_heads`` subspaces of ``[B, I, d]`` inputs.

    ``key_mask[B, J]`` marks usable keys. Returns the projected output and the
    attention weights ``[B, h, I, J]``.
    """
    B, I, d = queries.shape
    J = keys_values.shape[1]
    dh = d // n_heads

    def heads(x, name, length):
        proj = x @ params[f"{prefix}.w{name}"] + params[f"{prefix}.b{name}"]
        return proj.reshape(B, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(queries, "q", I)
    k = heads(keys_values, "k", J)
    v = heads(keys_values, "v", J)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        tri = np.tril(np.ones((I, J), dtype=bool))[None, None]
        mask = tri if mask is None else (mask & tri)
    weights = T.softmax(scores, axis=-1, mask=mask)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, I, d)
    return ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"], weights


def layer_norm(x: Tensor, params: dict, prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], eps)


def feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    hidden = T.relu(x @ params[prefix + ".w1"] + params[prefix + ".b1"])
    return hidden @ params[prefix + ".w2"] + params[prefix + ".b2"]


def _batched_ids(tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    return ids, False


# -- the four stages -------------------------------------------------------------

def transformer_encode(tokens, params: dict, cfg: FusionConfig, mask=None,
                       return_attention: bool = False):
    """Token ids ``[I]`` or ``[B, I]`` to ``H`` of shape ``[I, d]`` / ``[B, I, d]``.

    ``mask`` marks real tokens; padded keys get zero attention weight.
    """
    ids, single = _batched_ids(tokens)
    B, I = ids.shape
    if I < 1:
        raise ContractError("empty token sequence")
    if I > cfg.max_len:
        raise LengthError(f"sequence of length {I} exceeds max_len={cfg.max_len}")
    key_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(B, I)
    h = T.embedding(params["enc.embed"], ids) + params["enc.pos"][:I]
    attentions = []
    for layer in range(cfg.n_layers):
        pre = f"enc.l{layer}"
        att, w = multi_head_attention(h, h, params, pre + ".attn", cfg.n_heads, key_mask)
        attentions.append(w)
        h = layer_norm(h + att, params, pre + ".ln1", cfg.ln_eps)
        h = layer_norm(h + feed_forward(h, params, pre + ".ff"), params, pre + ".ln2", cfg.ln_eps)
    if single:
        h = h[0]
    return (h, attentions) if return_attention else h


def project_images(images, params: dict) -> Tensor:
    """Per-image affine map and relu: ``[..., m, d_img]`` to ``[..., m, d]``."""
    x = T.as_tensor(images)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ContractError("project_images needs at least one image")
    return T.relu(x @ params["img.w"] + params["img.b"])


def attend_fuse(H: Tensor, M: Tensor | None, params: dict, cfg: FusionConfig,
                return_attention: bool = False):
    """Multi-head attention with queries from ``H`` and keys/values from ``M``.

    An empty image set (``M`` is None or has zero rows) yields an all-zero result.
    """
    if M is None or M.shape[-2] == 0:
        out = Tensor(np.zeros(H.shape))
        return (out, None) if return_attention else out
    if H.shape[-1] != M.shape[-1]:
        raise ContractError(f"H has width {H.shape[-1]} but M has width {M.shape[-1]}")
    single = H.ndim == 2
    if single:
        H = H.reshape(1, *H.shape)
        if M.ndim == 2:
            M = M.reshape(1, *M.shape)
    elif M.ndim == 2:
        raise ContractError("batched H needs batched M")
    out, w = multi_head_attention(H, M, params, "fuse.attn", cfg.n_fusion_heads)
    if single:
        out, w = out[0], w[0]
    return (out, w) if return_attention else out


def residual_norm_fuse(H: Tensor, H_att: Tensor, params: dict, cfg: FusionConfig,
                       mask: np.ndarray | None = None) -> FusedSequence:
    """``LayerNorm((H + H') W^T + b)`` row by row."""
    if H.shape != H_att.shape:
        raise ContractError(f"H {H.shape} and H' {H_att.shape} differ in shape")
    summed = (H + H_att) @ T.transpose(params["fuse.w"])
    fused = layer_norm(summed + params["fuse.b"], params, "fuse.ln", cfg.ln_eps)
    return FusedSequence(fused, mask)


def encode_and_fuse(tokens, mask, images, params: dict, cfg: FusionConfig) -> FusedSequence:
    """Full text+image stack. ``images`` is ``[B, m, d_img]`` pooled vectors, or None / m=0 for text only."""
    H = transformer_encode(tokens, params, cfg, mask)
    M = None
    if images is not None and np.shape(getattr(images, "data", images))[-2] > 0:
        M = project_images(images, params)
    return residual_norm_fuse(H, attend_fuse(H, M, params, cfg), params, cfg, mask)
