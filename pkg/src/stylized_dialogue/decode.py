"""Greedy decoding and top-K-within-beam sampling.

The sampler is a stochastic beam search: every live hypothesis draws
``beam_size`` continuations without replacement from the renormalised top-K
of its next-token distribution, and the pooled candidates are ranked by
length-normalised log-probability. It is what produces diverse pseudo posts
from the inverse model.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS
from .models import ContractError, DecodeState, DialogueModel, encode_batch, pad_batch, truncate


@dataclass
class SamplerConfig:
    k: int = 20
    beam_size: int = 4
    max_len: int = 32
    seed: int = 0
    length_penalty: float = 0.7
    m: int | None = None

    @property
    def n_return(self) -> int:
        return self.beam_size if self.m is None else self.m

    def validate(self, vocab_size: int | None = None) -> "SamplerConfig":
        if not 1 <= self.beam_size <= self.k:
            raise ValueError(f"need 1 <= beam_size ({self.beam_size}) <= K ({self.k})")
        if vocab_size is not None and self.k > vocab_size:
            raise ValueError(f"K={self.k} exceeds vocabulary size {vocab_size}")
        if not 1 <= self.n_return <= self.beam_size:
            raise ValueError(f"m={self.n_return} must lie in [1, beam_size={self.beam_size}]")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        return self


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_prob: float = 0.0
    finished: bool = False

    def score(self, alpha: float) -> float:
        return self.log_prob / (max(len(self.tokens), 1) ** alpha)


class Samples(list):
    """List of decoded sequences; ``shortfall`` counts missing distinct outputs."""

    shortfall: int = 0
    hypotheses: list[BeamHypothesis]

    def __init__(self, seqs=(), shortfall: int = 0, hypotheses=None):
        super().__init__(seqs)
        self.shortfall = shortfall
        self.hypotheses = list(hypotheses or [])


def _check_style(model: DialogueModel, style: int | None) -> None:
    if model.stylized and style not in (0, 1):
        raise ContractError(f"the stylized model needs style 0 or 1, got {style!r}")
    if not model.stylized and style is not None:
        raise ContractError("the inverse model does not take a style label")


def _start(model: DialogueModel, sources: Sequence[Sequence[int]], style: int | None) -> DecodeState:
    ids, valid = pad_batch([truncate(src, model.config.max_len) for src in sources])
    with T.no_grad():
        enc = encode_batch(model, ids, valid).data
    styles = np.full(len(sources), style) if model.stylized else None
    return DecodeState(model, enc, valid, styles)


def greedy_decode(model: DialogueModel, post: Sequence[int], style: int | None = None, max_len: int = 32) -> list[int]:
    """Arg-max decoding; returns generated ids, ending in [EOS] if one was emitted."""
    _check_style(model, style)
    limit = min(max_len, model.config.max_len)
    state = _start(model, [post], style)
    tok = model.start_token(style)
    out: list[int] = []
    while len(out) < limit:
        tok = int(np.argmax(state.step(np.array([tok]))[0]))
        out.append(tok)
        if tok == EOS:
            break
    return out


def greedy_decode_many(
    model: DialogueModel, posts: Sequence[Sequence[int]], style: int | None = None, max_len: int = 32
) -> list[list[int]]:
    """Batched :func:`greedy_decode`; rows stop independently at ``[EOS]``."""
    _check_style(model, style)
    if not posts:
        return []
    limit = min(max_len, model.config.max_len)
    state = _start(model, posts, style)
    outs: list[list[int]] = [[] for _ in posts]
    active = list(range(len(posts)))
    feed = np.full(len(posts), model.start_token(style), dtype=np.int64)
    for _ in range(limit):
        toks = np.argmax(state.step(feed), axis=-1)
        keep = []
        for row, (i, tok) in enumerate(zip(active, toks)):
            outs[i].append(int(tok))
            if tok != EOS:
                keep.append(row)
        if not keep:
            break
        active = [active[r] for r in keep]
        state.reorder(np.array(keep))
        feed = toks[keep]
    return outs


def _top_k(logp: np.ndarray, k: int) -> np.ndarray:
    # stable sort: ties resolve to the lowest id, like argmax
    return np.argsort(-logp, kind="stable")[:k]


def beam_sample_many(
    model: DialogueModel,
    sources: Sequence[Sequence[int]],
    cfg: SamplerConfig,
    seeds: Sequence[int],
    style: int | None = None,
    trace: Counter | None = None,
) -> list[Samples]:
    """Top-K beam sampling for several inputs sharing forward passes.

    Each input draws from its own generator seeded by ``seeds[i]``.
    """
    cfg.validate(model.config.vocab_size)
    _check_style(model, style)
    if not sources:
        return []
    limit = min(cfg.max_len, model.config.max_len)
    alpha = cfg.length_penalty
    n = len(sources)
    rngs = [np.random.default_rng(s) for s in seeds]
    start = model.start_token(style)
    live: list[list[BeamHypothesis]] = [[BeamHypothesis([])] for _ in range(n)]
    done: list[list[BeamHypothesis]] = [[] for _ in range(n)]

    state = _start(model, sources, style)
    feed = np.full(n, start, dtype=np.int64)
    for _ in range(limit):
        logp_all = state.step(feed)
        parents: list[int] = []
        row = 0
        for i in range(n):
            if not live[i]:
                continue
            candidates: list[tuple[BeamHypothesis, int]] = []
            for hyp in live[i]:
                logp = logp_all[row]
                top = _top_k(logp, cfg.k)
                p = np.exp(logp[top] - logp[top].max())
                p /= p.sum()
                n_draw = min(cfg.beam_size, int((p > 0).sum()))
                picks = rngs[i].choice(top, size=n_draw, replace=False, p=p)
                if trace is not None:
                    kth = np.partition(logp, -cfg.k)[-cfg.k]
                    trace["draws"] += len(picks)
                    trace["outside_topk"] += int((logp[picks] < kth).sum())
                for tok in picks:
                    tok = int(tok)
                    cand = BeamHypothesis(hyp.tokens + [tok], hyp.log_prob + float(logp[tok]), tok == EOS)
                    candidates.append((cand, row))
                row += 1
            candidates.sort(key=lambda c: (-c[0].score(alpha), c[0].tokens))
            kept = candidates[: cfg.beam_size]
            done[i].extend(h for h, _ in kept if h.finished)
            live[i] = [h for h, _ in kept if not h.finished]
            if len(done[i]) >= cfg.beam_size:
                live[i] = []
            else:
                parents.extend(r for h, r in kept if not h.finished)
        if not parents:
            break
        state.reorder(np.array(parents))
        feed = np.array([h.tokens[-1] for i in range(n) for h in live[i]], dtype=np.int64)

    results = []
    for i in range(n):
        pool = sorted(done[i] + live[i], key=lambda h: (not h.finished, -h.score(alpha), h.tokens))
        seqs, seen, chosen = [], set(), []
        for h in pool:
            key = tuple(h.tokens)
            if key in seen:
                continue
            seen.add(key)
            seqs.append(list(h.tokens))
            chosen.append(h)
            if len(seqs) == cfg.n_return:
                break
        results.append(Samples(seqs, shortfall=cfg.n_return - len(seqs), hypotheses=chosen))
    return results


def topk_beam_sample(
    model: DialogueModel,
    response: Sequence[int],
    cfg: SamplerConfig,
    trace: Counter | None = None,
) -> Samples:
    """Up to ``m`` distinct sequences sampled from the style-free inverse model.

    Finished hypotheses rank ahead of ones cut off at ``max_len``; the
    returned list is shorter than ``m`` (``shortfall > 0``) when the beam did
    not produce enough distinct outputs.
    """
    if model.stylized:
        raise ContractError("topk_beam_sample draws pseudo posts from the inverse model")
    return beam_sample_many(model, [response], cfg, [cfg.seed], None, trace)[0]


def as_post(generated: Sequence[int]) -> list[int]:
    """Wrap generated ids as an encoder input ``[BOS] ... [EOS]``."""
    body = [t for t in generated if t != EOS]
    return [BOS] + body + [EOS]


@dataclass
class Strategy:
    """``name`` is ``"greedy"`` or ``"sample"``; sampling uses ``sampler``."""

    name: str = "greedy"
    max_len: int = 32
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


def _generate_one(args) -> list[int]:
    model, post, style, strategy, seed = args
    if strategy.name == "greedy":
        return greedy_decode(model, post, style, strategy.max_len)
    cfg = SamplerConfig(
        k=strategy.sampler.k,
        beam_size=strategy.sampler.beam_size,
        max_len=strategy.max_len,
        seed=seed,
        length_penalty=strategy.sampler.length_penalty,
        m=1,
    )
    out = beam_sample_many(model, [post], cfg, [seed], style)[0]
    return out[0] if out else []


def batch_generate(
    model: DialogueModel,
    posts: Sequence[Sequence[int]],
    style: int | None,
    strategy: Strategy | None = None,
    workers: int = 1,
) -> list[list[int]]:
    """Decode every post; item ``i`` samples with seed ``base_seed ^ i``."""
    strategy = strategy or Strategy()
    if strategy.name not in ("greedy", "sample"):
        raise ValueError(f"unknown strategy {strategy.name!r}")
    jobs = [(model, list(p), style, strategy, strategy.sampler.seed ^ i) for i, p in enumerate(posts)]
    if workers <= 1 or len(jobs) <= 1:
        return [_generate_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
