"""Attention primitives and Transformer blocks with attention/style routing.

Blocks are post-norm: ``LN(x + sublayer(x))``. A decoder block fuses masked
self-attention over the decoded prefix with cross-attention over the encoder
output by averaging the two, optionally adds a style embedding at every time
step, and then runs the usual residual / feed-forward path.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

POST_NORM = True
LN_EPS = 1e-5


@dataclass
class BlockWeights:
    """Weights of one block. Attention projections are ``[h, h]``."""

    n_heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "n_heads"]

    @classmethod
    def init(cls, h: int, n_heads: int, rng: np.random.Generator, std: float = 0.02) -> "BlockWeights":
        if h % n_heads:
            raise ValueError(f"hidden size {h} is not divisible by {n_heads} heads")

        def normal(*shape):
            return T.parameter(rng.normal(0.0, std, size=shape))

        def const(value, n):
            return T.parameter(np.full(n, value))

        return cls(
            n_heads=n_heads,
            wq=normal(h, h), bq=const(0.0, h),
            wk=normal(h, h), bk=const(0.0, h),
            wv=normal(h, h), bv=const(0.0, h),
            wo=normal(h, h), bo=const(0.0, h),
            ln1_g=const(1.0, h), ln1_b=const(0.0, h),
            w1=normal(h, 4 * h), b1=const(0.0, 4 * h),
            w2=normal(4 * h, h), b2=const(0.0, h),
            ln2_g=const(1.0, h), ln2_b=const(0.0, h),
        )


@dataclass
class RoutingState:
    r_prev: Tensor
    r_post: Tensor
    r_avg: Tensor
    r_merge: Tensor | None = None


def causal_mask(length: int) -> np.ndarray:
    """Boolean ``[l, l]`` mask, True where attention is allowed."""
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(key_valid: np.ndarray, lq: int) -> np.ndarray:
    """``[B, lq, lk]`` mask from a ``[B, lk]`` key-validity array."""
    key_valid = np.asarray(key_valid, dtype=bool)
    return np.broadcast_to(key_valid[:, None, :], (key_valid.shape[0], lq, key_valid.shape[1]))


def _additive(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, -np.inf)


def multi_head_attention(
    query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None, w: BlockWeights
) -> Tensor:
    """Scaled dot-product attention over ``w.n_heads`` heads.

    Inputs are ``[l, h]`` or batched ``[B, l, h]``. ``mask`` is boolean,
    True where a query may attend to a key, shaped ``[lq, lk]`` or
    ``[B, lq, lk]``.
    """
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = (x.reshape(1, *x.shape) for x in (query, key, value))
    B, lq, h = query.shape
    lk = key.shape[1]
    if h != w.hidden or key.shape[-1] != h or value.shape != key.shape or key.shape[0] != B:
        raise ShapeError(
            f"attention: query {query.shape}, key {key.shape}, value {value.shape} vs hidden {w.hidden}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (lq, lk) or (mask.ndim == 3 and mask.shape[0] != B):
            raise ShapeError(f"attention: mask shape {mask.shape} vs scores ({B}, {lq}, {lk})")
    H = w.n_heads
    d = h // H

    def heads(x: Tensor, length: int) -> Tensor:
        return x.reshape(B, length, H, d).transpose(0, 2, 1, 3)

    q = heads(query @ w.wq + w.bq, lq)
    k = heads(key @ w.wk + w.bk, lk)
    v = heads(value @ w.wv + w.bv, lk)
    scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(d))
    if mask is not None:
        add = _additive(mask)
        add = add[None, None] if add.ndim == 2 else add[:, None]
        scores = scores + Tensor(add)
    attn = T.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, lq, h)
    out = ctx @ w.wo + w.bo
    return out.reshape(lq, h) if squeeze else out


def attention_routing(
    prefix_emb: Tensor,
    enc_out: Tensor,
    w_self: BlockWeights,
    w_cross: BlockWeights,
    self_mask: np.ndarray | None = None,
    cross_mask: np.ndarray | None = None,
) -> RoutingState:
    """Masked self-attention and cross-attention on the prefix, averaged.

    ``self_mask`` defaults to a causal mask over the prefix.
    """
    l = prefix_emb.shape[-2]
    if l == 0:
        raise ValueError("attention_routing: empty prefix (decoding starts from a start token)")
    if self_mask is None:
        self_mask = causal_mask(l)
    r_prev = multi_head_attention(prefix_emb, prefix_emb, prefix_emb, self_mask, w_self)
    r_post = multi_head_attention(prefix_emb, enc_out, enc_out, cross_mask, w_cross)
    r_avg = (r_prev + r_post) * 0.5
    return RoutingState(r_prev, r_post, r_avg)


def style_routing(r_avg: Tensor, style_emb: Tensor) -> Tensor:
    """Add the style embedding to every time step of ``r_avg``."""
    if style_emb.shape[-1] != r_avg.shape[-1]:
        raise ShapeError(f"style_routing: style {style_emb.shape} vs states {r_avg.shape}")
    return r_avg + style_emb


def feed_forward(x: Tensor, w: BlockWeights) -> Tensor:
    return T.gelu(x @ w.w1 + w.b1) @ w.w2 + w.b2


def decoder_block(
    prefix_states: Tensor,
    enc_out: Tensor,
    style_emb: Tensor | None,
    w: BlockWeights,
    self_mask: np.ndarray | None = None,
    cross_mask: np.ndarray | None = None,
    trace: Counter | None = None,
    routing_state: list | None = None,
) -> Tensor:
    """One decoder block.

    ``style_emb`` is None for the inverse model, in which case style routing
    is skipped entirely. ``trace`` counts routing events; ``routing_state``
    collects the intermediate :class:`RoutingState` when given.
    """
    state = attention_routing(prefix_states, enc_out, w, w, self_mask, cross_mask)
    fused = state.r_avg
    if style_emb is not None:
        fused = style_routing(fused, style_emb)
        state.r_merge = fused
        if trace is not None:
            trace["style_routing"] += 1
    if routing_state is not None:
        routing_state.append(state)
    x = T.layer_norm(prefix_states + fused, w.ln1_g, w.ln1_b, LN_EPS)
    return T.layer_norm(x + feed_forward(x, w), w.ln2_g, w.ln2_b, LN_EPS)


def encoder_block(states: Tensor, w: BlockWeights, mask: np.ndarray | None = None) -> Tensor:
    """Unmasked (apart from padding) self-attention block."""
    x = T.layer_norm(states + multi_head_attention(states, states, states, mask, w), w.ln1_g, w.ln1_b, LN_EPS)
    return T.layer_norm(x + feed_forward(x, w), w.ln2_g, w.ln2_b, LN_EPS)
