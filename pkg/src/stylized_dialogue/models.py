"""The stylized dialogue model and its style-free inverse twin.

Each :class:`DialogueModel` owns one :class:`ModelWeights`. Its encoder and
decoder are thin views over the *same* block list, token embedding and
position table, so there is exactly one copy of every parameter per
sub-module. The token embedding doubles as the output projection.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, S0, S1
from .tensor import Tensor
from .transformer import BlockWeights, causal_mask, decoder_block, encoder_block, padding_mask

STYLIZED = "stylized"
INVERSE = "inverse"
INIT_STD = 0.02


class ContractError(ValueError):
    """A call that violates a model's interface contract."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 2
    max_len: int = 64
    # style conditioning switches for the stylized model
    routing: bool = True
    style_start_token: bool = True
    word_style_emb: bool = False

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 7:
            raise ValueError(f"vocab_size {self.vocab_size} too small (need specials plus one token)")
        if min(self.n_layers, self.hidden, self.n_heads, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.n_heads} heads")
        if self.max_len < 2:
            raise ValueError("max_len must allow at least [BOS] [EOS]")
        return self


@dataclass
class ModelWeights:
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockWeights]
    style_table: Tensor | None = None

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, b in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", p) for n, p in b.named_params())
        if self.style_table is not None:
            out.append(("style_table", self.style_table))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


class _Half:
    """Encoder or decoder handle; both handles of a model alias one storage."""

    def __init__(self, weights: ModelWeights):
        self._w = weights

    @property
    def tok_emb(self) -> Tensor:
        return self._w.tok_emb

    @property
    def pos_emb(self) -> Tensor:
        return self._w.pos_emb

    @property
    def blocks(self) -> list[BlockWeights]:
        return self._w.blocks


@dataclass
class DialogueModel:
    weights: ModelWeights
    kind: str
    config: ModelConfig
    trace: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.kind not in (STYLIZED, INVERSE):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if (self.kind == INVERSE) != (self.weights.style_table is None):
            raise ValueError("only the stylized model carries a style table")
        self.encoder = _Half(self.weights)
        self.decoder = _Half(self.weights)

    @property
    def stylized(self) -> bool:
        return self.kind == STYLIZED

    def params(self) -> list[Tensor]:
        return self.weights.params()

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.weights.named_params()

    def n_params(self) -> int:
        seen: dict[int, Tensor] = {}
        for p in self.params():
            seen[id(p.data)] = p
        return sum(p.data.size for p in seen.values())

    def style_vectors(self, styles: np.ndarray) -> Tensor:
        """Rows of the style table for each example, shaped ``[B, 1, h]``.

        The only read path into the style table; every call is counted.
        """
        if self.weights.style_table is None:
            raise ContractError("the inverse model has no style table")
        self.trace["style_table_reads"] += 1
        styles = np.asarray(styles, dtype=np.int64)
        return T.embedding(self.weights.style_table, styles[:, None])

    def start_token(self, style: int | None) -> int:
        if self.stylized and self.config.style_start_token:
            return S1 if style == 1 else S0
        return BOS


def param_count_formula(cfg: ModelConfig, kind: str) -> int:
    """Closed-form number of scalars in one sub-module."""
    h = cfg.hidden
    per_block = 12 * h * h + 13 * h
    n = cfg.vocab_size * h + cfg.max_len * h + cfg.n_layers * per_block
    return n + (2 * h if kind == STYLIZED else 0)


def _init_weights(cfg: ModelConfig, rng: np.random.Generator, stylized: bool) -> ModelWeights:
    h = cfg.hidden
    return ModelWeights(
        tok_emb=T.parameter(rng.normal(0.0, INIT_STD, size=(cfg.vocab_size, h))),
        pos_emb=T.parameter(rng.normal(0.0, INIT_STD, size=(cfg.max_len, h))),
        blocks=[BlockWeights.init(h, cfg.n_heads, rng, INIT_STD) for _ in range(cfg.n_layers)],
        style_table=T.parameter(rng.normal(0.0, INIT_STD, size=(2, h))) if stylized else None,
    )


def build_models(cfg: ModelConfig, seed: int) -> tuple[DialogueModel, DialogueModel]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    stylized = DialogueModel(_init_weights(cfg, rng, True), STYLIZED, cfg)
    inverse = DialogueModel(_init_weights(cfg, rng, False), INVERSE, cfg)
    return stylized, inverse


def with_config(model: DialogueModel, **changes) -> DialogueModel:
    """Same weights, different switches (used to toggle conditioning in tests)."""
    return DialogueModel(model.weights, model.kind, replace(model.config, **changes), model.trace)


# ---------------------------------------------------------------------------
# batching helpers


def truncate(seq: Sequence[int], max_len: int) -> list[int]:
    """Keep the head of an overlong sequence, re-terminated with [EOS]."""
    seq = list(seq)
    if len(seq) <= max_len:
        return seq
    return seq[: max_len - 1] + [EOS]


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``[B, L]`` id array plus a boolean validity mask."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


def _embed(model: DialogueModel, ids: np.ndarray) -> Tensor:
    L = ids.shape[1]
    if L > model.config.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {model.config.max_len}")
    w = model.weights
    return T.embedding(w.tok_emb, ids) + T.embedding(w.pos_emb, np.arange(L))


def encode_batch(model: DialogueModel, ids: np.ndarray, valid: np.ndarray) -> Tensor:
    """Encoder states ``[B, L, h]`` for padded ids."""
    x = _embed(model, ids)
    mask = padding_mask(valid, ids.shape[1])
    for w in model.encoder.blocks:
        x = encoder_block(x, w, mask)
    return x


def decode_batch(
    model: DialogueModel,
    enc_out: Tensor,
    enc_valid: np.ndarray,
    prefix: np.ndarray,
    prefix_valid: np.ndarray,
    styles: np.ndarray | None,
    routing_states: list | None = None,
) -> Tensor:
    """Output logits ``[B, l, V]`` for every prefix position."""
    if model.stylized:
        if styles is None:
            raise ContractError("the stylized model needs a style label")
    elif styles is not None:
        raise ContractError("the inverse model does not take a style label")
    cfg = model.config
    l = prefix.shape[1]
    if l == 0:
        raise ContractError("empty decoder prefix")
    y = _embed(model, prefix)
    style_vec = None
    if model.stylized and (cfg.routing or cfg.word_style_emb):
        style_vec = model.style_vectors(styles)
        if cfg.word_style_emb:
            y = y + style_vec
    self_mask = causal_mask(l)[None] & padding_mask(prefix_valid, l)
    cross_mask = padding_mask(enc_valid, l)
    routed = style_vec if cfg.routing else None
    for w in model.decoder.blocks:
        y = decoder_block(y, enc_out, routed, w, self_mask, cross_mask, model.trace, routing_states)
    return y @ T.swap_last(model.weights.tok_emb)


def encode(model: DialogueModel, tokens: Sequence[int]) -> Tensor:
    """Encoder output ``[l, h]`` for one token sequence (``[BOS] ... [EOS]``)."""
    tokens = truncate(tokens, model.config.max_len)
    if len(tokens) < 2:
        raise ContractError("encoder input must contain at least [BOS] [EOS]")
    ids, valid = pad_batch([tokens])
    out = encode_batch(model, ids, valid)
    return out.reshape(out.shape[1:])


def next_token_distribution(
    model: DialogueModel, enc_out: Tensor, prefix: Sequence[int], style: int | None = None
) -> np.ndarray:
    """Probability vector over the vocabulary for the token after ``prefix``."""
    if not model.stylized and style is not None:
        raise ContractError("the inverse model does not take a style label")
    if model.stylized and style not in (0, 1):
        raise ContractError(f"style must be 0 or 1, got {style!r}")
    ids = np.asarray([list(prefix)], dtype=np.int64)
    enc = enc_out.reshape(1, *enc_out.shape) if enc_out.ndim == 2 else enc_out
    with T.no_grad():
        logits = decode_batch(
            model,
            enc,
            np.ones(enc.shape[:2], dtype=bool),
            ids,
            np.ones(ids.shape, dtype=bool),
            np.array([style]) if model.stylized else None,
        )
        return T.softmax(logits[0, -1]).data


def teacher_forcing(model: DialogueModel, target: Sequence[int], style: int | None) -> tuple[list[int], list[int]]:
    """Decoder input and gold output for a ``[BOS] w1..wn [EOS]`` target."""
    target = truncate(target, model.config.max_len + 1)
    return [model.start_token(style)] + list(target[1:-1]), list(target[1:])


def sequence_loss(
    model: DialogueModel,
    sources: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    styles: Sequence[int] | None,
) -> Tensor:
    """Teacher-forced NLL: token mean within each pair, then mean over pairs."""
    if not sources or len(sources) != len(targets):
        raise ContractError("sequence_loss: need equally many non-empty sources and targets")
    cfg = model.config
    src_ids, src_valid = pad_batch([truncate(s, cfg.max_len) for s in sources])
    style_list = list(styles) if styles is not None else [None] * len(targets)
    pairs = [teacher_forcing(model, t, s) for t, s in zip(targets, style_list)]
    dec_ids, dec_valid = pad_batch([p[0] for p in pairs])
    gold, _ = pad_batch([p[1] for p in pairs])
    enc = encode_batch(model, src_ids, src_valid)
    logits = decode_batch(
        model, enc, src_valid, dec_ids, dec_valid, None if styles is None else np.asarray(styles)
    )
    lengths = dec_valid.sum(axis=1, keepdims=True)
    return T.cross_entropy(logits, gold, dec_valid / lengths)


# ---------------------------------------------------------------------------
# incremental decoding


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + 1e-5) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, key_mask: np.ndarray | None) -> np.ndarray:
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


class DecodeState:
    """Key/value cache for step-by-step decoding of ``n`` sequences.

    Produces the same next-token log-probabilities as :func:`decode_batch`
    on the full prefix, but each step only processes the newest token.
    Gradients are never recorded.
    """

    def __init__(self, model: DialogueModel, enc_out: np.ndarray, enc_valid: np.ndarray, styles: np.ndarray | None):
        if model.stylized == (styles is None):
            raise ContractError("style labels are required by, and only by, the stylized model")
        self.model = model
        cfg = model.config
        self.n_heads = cfg.n_heads
        self.enc_valid = np.asarray(enc_valid, dtype=bool)
        self.style = None
        if model.stylized and (cfg.routing or cfg.word_style_emb):
            with T.no_grad():
                self.style = model.style_vectors(styles).data  # [n, 1, h]
        self.cross = []
        for w in model.decoder.blocks:
            self.cross.append((self._heads(enc_out @ w.wk.data + w.bk.data), self._heads(enc_out @ w.wv.data + w.bv.data)))
        n = enc_out.shape[0]
        d = cfg.hidden // cfg.n_heads
        self.self_kv = [(np.zeros((n, self.n_heads, 0, d)), np.zeros((n, self.n_heads, 0, d))) for _ in model.decoder.blocks]
        self.t = 0

    def _heads(self, x: np.ndarray) -> np.ndarray:
        n, l, h = x.shape
        return x.reshape(n, l, self.n_heads, h // self.n_heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        n, H, l, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(n, l, H * d)

    def reorder(self, parents: np.ndarray) -> None:
        """Keep cache rows ``parents`` (one row per surviving hypothesis)."""
        parents = np.asarray(parents, dtype=np.int64)
        self.self_kv = [(k[parents], v[parents]) for k, v in self.self_kv]
        self.cross = [(k[parents], v[parents]) for k, v in self.cross]
        self.enc_valid = self.enc_valid[parents]
        if self.style is not None:
            self.style = self.style[parents]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per sequence; return next-token log-probs ``[n, V]``."""
        model, cfg = self.model, self.model.config
        if self.t >= cfg.max_len:
            raise ContractError(f"decoder prefix would exceed max_len {cfg.max_len}")
        w_all = model.weights
        x = w_all.tok_emb.data[np.asarray(tokens, dtype=np.int64)][:, None, :] + w_all.pos_emb.data[self.t]
        if self.style is not None and cfg.word_style_emb:
            x = x + self.style
        routed = self.style if (self.style is not None and cfg.routing) else None
        for i, w in enumerate(model.decoder.blocks):
            q = self._heads(x @ w.wq.data + w.bq.data)
            k_new = self._heads(x @ w.wk.data + w.bk.data)
            v_new = self._heads(x @ w.wv.data + w.bv.data)
            k_cache, v_cache = self.self_kv[i]
            k_cache = np.concatenate([k_cache, k_new], axis=2)
            v_cache = np.concatenate([v_cache, v_new], axis=2)
            self.self_kv[i] = (k_cache, v_cache)
            wo, bo = w.wo.data, w.bo.data
            r_prev = self._merge(_attend(q, k_cache, v_cache, None)) @ wo + bo
            ck, cv = self.cross[i]
            r_post = self._merge(_attend(q, ck, cv, self.enc_valid)) @ wo + bo
            fused = (r_prev + r_post) * 0.5
            if routed is not None:
                fused = fused + routed
                model.trace["style_routing"] += 1
            x = _ln(x + fused, w.ln1_g.data, w.ln1_b.data)
            ff = _gelu(x @ w.w1.data + w.b1.data) @ w.w2.data + w.b2.data
            x = _ln(x + ff, w.ln2_g.data, w.ln2_b.data)
        self.t += 1
        logits = x[:, 0, :] @ w_all.tok_emb.data.T
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
