"""Losses, optimiser and the joint training loop.

One iteration mirrors the published joint-training procedure: a batch of
dialogue pairs updates the stylized model (post -> response, style S0) and
the inverse model (response -> post); once the warm-up of ``n_f`` steps is
over, a batch of unpaired stylised texts is turned into pseudo pairs by
sampling posts from the inverse model, and those pairs update the stylized
model under style S1. Pseudo posts are plain token ids, so no gradient can
flow back into the inverse model.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import format_value, from_mapping, to_mapping
from .decode import SamplerConfig, as_post, beam_sample_many
from .models import ContractError, DialogueModel, ModelConfig, build_models, sequence_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)

TokenPair = tuple[Sequence[int], Sequence[int]]


class DivergenceError(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


@dataclass
class TrainConfig:
    n_d: int = 32
    n_s: int = 32
    m: int = 4
    n_f: float = 300
    lr: float = 1e-4
    max_steps: int = 5000
    routing_on: bool = True
    joint_training_on: bool = True
    sampling_on: bool = True
    k: int = 20
    beam_size: int = 4
    decode_max_len: int = 24
    length_penalty: float = 0.7
    inverse_pretrain_steps: int = 1000
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    max_bad_steps: int = 10
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.n_f < 0:
            raise ValueError("n_f must be >= 0")
        if min(self.n_d, self.n_s, self.m) < 1:
            raise ValueError("n_d, n_s and m must be >= 1")
        if self.lr <= 0 or self.max_steps < 0:
            raise ValueError("lr must be positive and max_steps non-negative")
        if self.sampling_on and self.m > self.beam_size:
            raise ValueError(f"m={self.m} cannot exceed beam_size={self.beam_size}")
        return self

    def sampler(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(
            k=self.k,
            beam_size=self.beam_size,
            max_len=self.decode_max_len,
            seed=seed,
            length_penalty=self.length_penalty,
            m=self.m,
        )


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# losses


def loss_p2r(stylized: DialogueModel, batch: Sequence[TokenPair]) -> Tensor:
    """Mean per-pair NLL of responses given posts under style S0."""
    if not batch:
        raise ContractError("loss_p2r: empty batch")
    posts, responses = zip(*batch)
    return sequence_loss(stylized, posts, responses, [0] * len(batch))


def loss_r2p(inverse: DialogueModel, batch: Sequence[TokenPair]) -> Tensor:
    """Mean per-pair NLL of posts given responses; no style label."""
    if not batch:
        raise ContractError("loss_r2p: empty batch")
    posts, responses = zip(*batch)
    return sequence_loss(inverse, responses, posts, None)


def pseudo_posts(
    inverse: DialogueModel,
    texts: Sequence[Sequence[int]],
    m: int,
    sampling_on: bool = True,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    stats: Counter | None = None,
    trace: Counter | None = None,
) -> list[list[list[int]]]:
    """Up to ``m`` distinct pseudo posts per text, decoded without gradients.

    Text ``i`` samples with seed ``seed ^ i``. With ``sampling_on=False``
    posts are decoded greedily, one per text. An empty list marks a text
    that produced nothing; it is counted in ``stats["skipped_texts"]``.
    """
    sampler = sampler or SamplerConfig(m=m)
    if sampling_on:
        cfg = SamplerConfig(sampler.k, sampler.beam_size, sampler.max_len, seed, sampler.length_penalty, m)
    else:
        cfg = SamplerConfig(1, 1, sampler.max_len, seed, sampler.length_penalty, 1)
    with T.no_grad():
        samples = beam_sample_many(inverse, texts, cfg, [seed ^ i for i in range(len(texts))], None, trace)
    out = []
    for seqs in samples:
        posts: list[list[int]] = []
        for s in seqs:
            p = as_post(s)
            if p not in posts:
                posts.append(p)
        if stats is not None:
            if not posts:
                stats["skipped_texts"] += 1
            stats["pseudo_shortfall"] += seqs.shortfall
        out.append(posts)
    return out


def make_pseudo_pairs(
    inverse: DialogueModel,
    texts: Sequence[Sequence[int]],
    m: int,
    sampling_on: bool = True,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    stats: Counter | None = None,
    trace: Counter | None = None,
) -> list[tuple[list[int], list[int]]]:
    """Flattened ``(pseudo post, text)`` pairs; skipped texts contribute none."""
    posts = pseudo_posts(inverse, texts, m, sampling_on, sampler, seed, stats, trace)
    return [(p, list(t)) for t, ps in zip(texts, posts) for p in ps]


def loss_on_pseudo_pairs(stylized: DialogueModel, pairs: Sequence[TokenPair]) -> Tensor:
    if not pairs:
        raise ContractError("loss_inv: every text in the batch was skipped")
    posts, texts = zip(*pairs)
    return sequence_loss(stylized, posts, texts, [1] * len(pairs))


def loss_inv(
    stylized: DialogueModel,
    inverse: DialogueModel,
    texts: Sequence[Sequence[int]],
    m: int,
    sampling_on: bool = True,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    stats: Counter | None = None,
    trace: Counter | None = None,
) -> Tensor:
    """Mean NLL of each stylised text given its sampled pseudo posts, style S1."""
    pairs = make_pseudo_pairs(inverse, texts, m, sampling_on, sampler, seed, stats, trace)
    return loss_on_pseudo_pairs(stylized, pairs)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with global-norm clipping; skips updates on non-finite gradients."""

    def __init__(
        self,
        named_params: Sequence[tuple[str, Tensor]],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 1.0,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> bool:
        live = [(n, p) for n, p in self.params if p.grad is not None]
        if not all(np.isfinite(p.grad).all() for _, p in live):
            self.skipped += 1
            logger.warning("non-finite gradient; update skipped (%d so far)", self.skipped)
            self.zero_grad()
            return False
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in live))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in live:
            g = p.grad * scale
            m = self.m[n]
            v = self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()
        return True

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t), f"{prefix}.skipped": np.array(self.skipped)}
        for n, _ in self.params:
            out[f"{prefix}.m.{n}"] = self.m[n]
            out[f"{prefix}.v.{n}"] = self.v[n]
        return out

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        self.skipped = int(arrays[f"{prefix}.skipped"])
        for n, _ in self.params:
            self.m[n] = arrays[f"{prefix}.m.{n}"].copy()
            self.v[n] = arrays[f"{prefix}.v.{n}"].copy()


# ---------------------------------------------------------------------------
# training loop


class EpochSampler:
    """Draws indices from shuffled passes over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ContractError("cannot sample from an empty corpus")
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0
        self.epoch = 0

    def draw(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.cursor == self.n:
                self.perm = self.rng.permutation(self.n)
                self.cursor = 0
                self.epoch += 1
            take = min(k - len(out), self.n - self.cursor)
            out.extend(int(i) for i in self.perm[self.cursor : self.cursor + take])
            self.cursor += take
        return out

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.perm": self.perm.astype(np.int64),
            f"{prefix}.cursor": np.array(self.cursor),
            f"{prefix}.epoch": np.array(self.epoch),
        }

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.perm = arrays[f"{prefix}.perm"].copy()
        self.cursor = int(arrays[f"{prefix}.cursor"])
        self.epoch = int(arrays[f"{prefix}.epoch"])


@dataclass
class StepRecord:
    step: int
    l_p2r: float | None
    l_r2p: float | None
    l_inv: float | None
    lr: float
    wallclock_ms: float

    def line(self) -> str:
        def f(x):
            return "-" if x is None else repr(x)

        return "\t".join([str(self.step), f(self.l_p2r), f(self.l_r2p), f(self.l_inv), repr(self.lr), f"{self.wallclock_ms:.1f}"])

    def losses(self) -> tuple:
        return (self.step, self.l_p2r, self.l_r2p, self.l_inv)


METRICS_HEADER = "step\tL_p2r\tL_r2p\tL_inv\tlr\twallclock_ms"


def _rng_state(rng: np.random.Generator, prefix: str) -> dict[str, str]:
    st = rng.bit_generator.state
    return {
        f"{prefix}.bit_generator": st["bit_generator"],
        f"{prefix}.state": str(st["state"]["state"]),
        f"{prefix}.inc": str(st["state"]["inc"]),
        f"{prefix}.has_uint32": str(st["has_uint32"]),
        f"{prefix}.uinteger": str(st["uinteger"]),
    }


def _set_rng_state(rng: np.random.Generator, prefix: str, values: dict[str, str]) -> None:
    rng.bit_generator.state = {
        "bit_generator": values[f"{prefix}.bit_generator"],
        "state": {"state": int(values[f"{prefix}.state"]), "inc": int(values[f"{prefix}.inc"])},
        "has_uint32": int(values[f"{prefix}.has_uint32"]),
        "uinteger": int(values[f"{prefix}.uinteger"]),
    }


class JointTrainer:
    """Stateful joint trainer; everything needed to resume is checkpointed."""

    def __init__(
        self,
        stylized: DialogueModel,
        inverse: DialogueModel,
        pairs: Sequence[TokenPair],
        texts: Sequence[Sequence[int]],
        cfg: TrainConfig,
    ):
        cfg.validate()
        if not pairs or not texts:
            raise ContractError("joint training needs non-empty paired and unpaired corpora")
        self.stylized = stylized
        self.inverse = inverse
        self.pairs = [(list(p), list(r)) for p, r in pairs]
        self.texts = [list(t) for t in texts]
        self.cfg = cfg
        self.data_rng = substream(cfg.seed, "train")
        self.decode_rng = substream(cfg.seed, "decode")
        self.pair_order = EpochSampler(len(self.pairs), self.data_rng)
        self.text_order = EpochSampler(len(self.texts), self.data_rng)
        self.opt_sty = Adam(stylized.named_params(), cfg.lr, clip_norm=cfg.clip_norm)
        self.opt_inv = Adam(inverse.named_params(), cfg.lr, clip_norm=cfg.clip_norm)
        self.step = 0
        self.bad_steps = 0
        self.inverse_frozen = False
        self.fixed_pseudo: dict[int, list[list[int]]] | None = None
        self.stats: Counter = Counter()
        self.sampler_trace: Counter = Counter()
        self.events: list[tuple[int, str]] = []
        self.history: list[StepRecord] = []
        self.on_inv_backward: Callable[["JointTrainer"], None] | None = None

    # -- phases ----------------------------------------------------------

    def _optimize(self, opt: Adam, loss_fn: Callable[[], Tensor], after_backward=None) -> float:
        opt.zero_grad()
        try:
            loss = loss_fn()
        except FloatingPointError:
            # non-finite activations: count it like a non-finite loss
            loss = None
        value = math.nan if loss is None else loss.item()
        if math.isfinite(value):
            T.backward(loss)
            if after_backward is not None:
                after_backward(self)
            self.bad_steps = 0
            opt.step()
        else:
            self.bad_steps += 1
            opt.skipped += 1
            opt.zero_grad()
            if self.bad_steps >= self.cfg.max_bad_steps:
                raise DivergenceError(f"loss non-finite for {self.bad_steps} consecutive updates at step {self.step}")
        return value

    def _fix_inverse(self) -> None:
        """Without joint training: train the inverse model alone, freeze it,
        and decode one fixed pseudo-post set for the whole unpaired corpus."""
        cfg = self.cfg
        order = EpochSampler(len(self.pairs), substream(cfg.seed, "pretrain"))
        for _ in range(cfg.inverse_pretrain_steps):
            batch = [self.pairs[j] for j in order.draw(cfg.n_d)]
            self._optimize(self.opt_inv, lambda: loss_r2p(self.inverse, batch))
        self.inverse_frozen = True
        seed = int(self.decode_rng.integers(2**31))
        fixed: dict[int, list[list[int]]] = {}
        for start in range(0, len(self.texts), cfg.n_s):
            chunk = self.texts[start : start + cfg.n_s]
            made = pseudo_posts(self.inverse, chunk, cfg.m, cfg.sampling_on, cfg.sampler(), seed + start, self.stats)
            for j, posts in enumerate(made, start=start):
                fixed[j] = posts
        self.fixed_pseudo = fixed
        self.events.append((0, "fixed_pseudo"))
        logger.info("fixed pseudo set: %d pairs for %d texts", sum(map(len, fixed.values())), len(fixed))

    def train_step(self) -> StepRecord:
        cfg = self.cfg
        if not cfg.joint_training_on and self.fixed_pseudo is None:
            self._fix_inverse()
        t0 = time.perf_counter()
        self.step += 1
        s = self.step
        batch = [self.pairs[i] for i in self.pair_order.draw(cfg.n_d)]
        l_p2r = self._optimize(self.opt_sty, lambda: loss_p2r(self.stylized, batch))
        self.events.append((s, "p2r"))
        l_r2p = None
        if not self.inverse_frozen:
            l_r2p = self._optimize(self.opt_inv, lambda: loss_r2p(self.inverse, batch))
            self.events.append((s, "r2p"))
        l_inv = None
        if s > cfg.n_f:
            idx = self.text_order.draw(cfg.n_s)
            if cfg.joint_training_on:
                seed = int(self.decode_rng.integers(2**31))
                pseudo = make_pseudo_pairs(
                    self.inverse,
                    [self.texts[i] for i in idx],
                    cfg.m,
                    cfg.sampling_on,
                    cfg.sampler(),
                    seed,
                    self.stats,
                    self.sampler_trace,
                )
                self.events.append((s, "decode"))
            else:
                pseudo = [(p, self.texts[i]) for i in idx for p in self.fixed_pseudo.get(i, [])]
            self.stats["pseudo_pairs"] += len(pseudo)
            l_inv = self._optimize(
                self.opt_sty, lambda: loss_on_pseudo_pairs(self.stylized, pseudo), self.on_inv_backward
            )
            self.events.append((s, "inv"))
        rec = StepRecord(s, l_p2r, l_r2p, l_inv, cfg.lr, (time.perf_counter() - t0) * 1000.0)
        self.history.append(rec)
        return rec

    def run(self, until: int | None = None, on_step: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
        until = self.cfg.max_steps if until is None else until
        while self.step < until:
            rec = self.train_step()
            if on_step is not None:
                on_step(rec)
        return self.history

    # -- persistence -----------------------------------------------------

    def state_dict(self, vocab: Sequence[str] = ()) -> Checkpoint:
        config = {f"model.{k}": format_value(v) for k, v in to_mapping(self.stylized.config).items()}
        config.update({f"train.{k}": format_value(v) for k, v in to_mapping(self.cfg).items()})
        params = {f"stylized.{n}": p.data for n, p in self.stylized.named_params()}
        params.update({f"inverse.{n}": p.data for n, p in self.inverse.named_params()})
        optimizer = {**self.opt_sty.state("stylized"), **self.opt_inv.state("inverse")}
        loop = {**self.pair_order.state("pairs"), **self.text_order.state("texts")}
        if self.fixed_pseudo is not None:
            owners, lengths, flat = [], [], []
            for j in sorted(self.fixed_pseudo):
                for p in self.fixed_pseudo[j]:
                    owners.append(j)
                    lengths.append(len(p))
                    flat.extend(p)
            loop["pseudo.owner"] = np.array(owners, dtype=np.int64)
            loop["pseudo.length"] = np.array(lengths, dtype=np.int64)
            loop["pseudo.tokens"] = np.array(flat, dtype=np.int64)
            loop["pseudo.texts"] = np.array(sorted(self.fixed_pseudo), dtype=np.int64)
        meta = {
            "step": str(self.step),
            "bad_steps": str(self.bad_steps),
            "inverse_frozen": format_value(self.inverse_frozen),
            **{f"stats.{k}": str(v) for k, v in sorted(self.stats.items())},
            **{f"trace.{k}": str(v) for k, v in sorted(self.sampler_trace.items())},
        }
        rng = {**_rng_state(self.data_rng, "data"), **_rng_state(self.decode_rng, "decode")}
        return Checkpoint(config=config, vocab=list(vocab), params=params, optimizer=optimizer, meta=meta, rng=rng, loop=loop)

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, pairs: Sequence[TokenPair], texts: Sequence[Sequence[int]], **overrides
    ) -> "JointTrainer":
        mcfg, tcfg = configs_from_checkpoint(ckpt)
        if overrides:
            tcfg = from_mapping(TrainConfig, {**to_mapping(tcfg), **overrides})
        stylized, inverse = models_from_checkpoint(ckpt, mcfg)
        tr = cls(stylized, inverse, pairs, texts, tcfg)
        tr.opt_sty.load_state("stylized", ckpt.optimizer)
        tr.opt_inv.load_state("inverse", ckpt.optimizer)
        tr.pair_order.load_state("pairs", ckpt.loop)
        tr.text_order.load_state("texts", ckpt.loop)
        _set_rng_state(tr.data_rng, "data", ckpt.rng)
        _set_rng_state(tr.decode_rng, "decode", ckpt.rng)
        tr.step = ckpt.step
        tr.bad_steps = int(ckpt.meta.get("bad_steps", 0))
        tr.inverse_frozen = ckpt.meta.get("inverse_frozen") == "true"
        for k, v in ckpt.meta.items():
            if k.startswith("stats."):
                tr.stats[k[6:]] = int(v)
            elif k.startswith("trace."):
                tr.sampler_trace[k[6:]] = int(v)
        if "pseudo.owner" in ckpt.loop:
            fixed: dict[int, list[list[int]]] = {int(j): [] for j in ckpt.loop["pseudo.texts"]}
            pos = 0
            for owner, n in zip(ckpt.loop["pseudo.owner"], ckpt.loop["pseudo.length"]):
                fixed[int(owner)].append([int(t) for t in ckpt.loop["pseudo.tokens"][pos : pos + n]])
                pos += int(n)
            tr.fixed_pseudo = fixed
        return tr


def configs_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelConfig, TrainConfig]:
    model = {k[6:]: v for k, v in ckpt.config.items() if k.startswith("model.")}
    train = {k[6:]: v for k, v in ckpt.config.items() if k.startswith("train.")}
    return from_mapping(ModelConfig, model), from_mapping(TrainConfig, train)


def models_from_checkpoint(ckpt: Checkpoint, mcfg: ModelConfig | None = None) -> tuple[DialogueModel, DialogueModel]:
    if mcfg is None:
        mcfg, _ = configs_from_checkpoint(ckpt)
    stylized, inverse = build_models(mcfg, 0)
    for prefix, model in (("stylized", stylized), ("inverse", inverse)):
        for n, p in model.named_params():
            arr = ckpt.params[f"{prefix}.{n}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint parameter {prefix}.{n} has shape {arr.shape}, expected {p.data.shape}")
            p.data[...] = arr
    return stylized, inverse


def joint_train(
    stylized: DialogueModel,
    inverse: DialogueModel,
    pairs: Sequence[TokenPair],
    texts: Sequence[Sequence[int]],
    cfg: TrainConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> tuple[DialogueModel, DialogueModel, list[StepRecord]]:
    """Run the joint loop for ``cfg.max_steps`` steps; returns models and the loss log."""
    tr = JointTrainer(stylized, inverse, pairs, texts, cfg)
    tr.run(on_step=on_step)
    return tr.stylized, tr.inverse, tr.history
