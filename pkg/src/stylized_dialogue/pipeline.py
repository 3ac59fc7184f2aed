"""End-to-end wiring: corpora -> training run -> generation -> evaluation.

A :class:`RunConfig` is the flat union of every knob, so a single
``key=value`` file can describe a run.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import dump_kv, from_mapping, to_mapping
from .data import DialoguePair, Vocab, build_vocab, detokenize, load_paired, load_unpaired, tokenize
from .decode import SamplerConfig, Strategy, batch_generate, greedy_decode_many
from .metrics import EvalReport, StyleClassifier, config_hash, score_style, train_style_classifier
from .models import DialogueModel, ModelConfig, build_models
from .train import METRICS_HEADER, JointTrainer, StepRecord, TrainConfig, models_from_checkpoint, substream

logger = logging.getLogger(__name__)

ABLATIONS = ("none", "no-joint", "no-routing", "no-sampling")
ABLATION_LABELS = {
    "none": "full (w/o PreT)",
    "no-joint": "w/o JointT",
    "no-routing": "w/o Rout.",
    "no-sampling": "w/o Samp.",
}


@dataclass
class RunConfig:
    # corpora
    pairs: str = ""
    unpaired: str = ""
    test_s0: str = ""
    test_s1: str = ""
    vocab_cap: int = 8192
    # model
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 2
    max_len: int = 64
    style_start_token: bool = True
    word_style_emb: bool = False
    # training
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
    # evaluation
    eval_strategy: str = "greedy"
    eval_max_len: int = 24
    ablation: str = "none"

    def validate(self) -> "RunConfig":
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        if self.eval_strategy not in ("greedy", "sample"):
            raise ValueError(f"eval_strategy must be greedy or sample, got {self.eval_strategy!r}")
        self.train_config()
        return self

    def with_ablation(self) -> "RunConfig":
        """Copy with the ablation toggles applied on top of the other fields."""
        values = to_mapping(self)
        if self.ablation == "no-joint":
            values["joint_training_on"] = False
        elif self.ablation == "no-routing":
            values["routing_on"] = False
            values["word_style_emb"] = True
        elif self.ablation == "no-sampling":
            values["sampling_on"] = False
        return from_mapping(RunConfig, values)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_layers=self.n_layers,
            hidden=self.hidden,
            n_heads=self.n_heads,
            max_len=self.max_len,
            routing=self.routing_on,
            style_start_token=self.style_start_token,
            word_style_emb=self.word_style_emb,
        ).validate()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return from_mapping(TrainConfig, {k: v for k, v in to_mapping(self).items() if k in names}).validate()


@dataclass
class Corpora:
    vocab: Vocab
    pairs: list[tuple[list[int], list[int]]]
    texts: list[list[int]]
    raw_pairs: list[DialoguePair]
    raw_texts: list[str]


def load_corpora(cfg: RunConfig, vocab: Vocab | None = None) -> Corpora:
    raw_pairs = load_paired(cfg.pairs)
    raw_texts = [u.text for u in load_unpaired(cfg.unpaired)]
    if vocab is None:
        texts = [t for p in raw_pairs for t in (p.post, p.response)] + raw_texts
        vocab = build_vocab(texts, cap=cfg.vocab_cap)
    pairs = [(tokenize(p.post, vocab), tokenize(p.response, vocab)) for p in raw_pairs]
    return Corpora(vocab, pairs, [tokenize(t, vocab) for t in raw_texts], raw_pairs, raw_texts)


def _step_fields(line: str) -> list[str]:
    return line.rstrip("\n").split("\t")


def train_run(
    cfg: RunConfig,
    out_dir,
    resume: str | os.PathLike | None = None,
    until: int | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
    corpora: Corpora | None = None,
    setup: Callable[[JointTrainer], None] | None = None,
) -> JointTrainer:
    """Train per ``cfg`` writing ``metrics.tsv`` and checkpoints into ``out_dir``.

    With ``resume`` the trainer state is restored from that checkpoint and the
    metrics log is truncated to the checkpoint step before appending.
    ``setup`` sees the trainer before the first step, e.g. to install hooks.
    """
    cfg = cfg.validate().with_ablation()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        corpora = corpora or load_corpora(cfg, Vocab(ckpt.vocab))
        overrides = {"max_steps": cfg.max_steps, "checkpoint_every": cfg.checkpoint_every}
        trainer = JointTrainer.from_checkpoint(ckpt, corpora.pairs, corpora.texts, **overrides)
    else:
        corpora = corpora or load_corpora(cfg)
        stylized, inverse = build_models(cfg.model_config(len(corpora.vocab)), cfg.seed)
        trainer = JointTrainer(stylized, inverse, corpora.pairs, corpora.texts, cfg.train_config())
    if setup is not None:
        setup(trainer)
    (out / "config.txt").write_text(dump_kv(to_mapping(cfg)), encoding="utf-8")

    log_path = out / "metrics.tsv"
    kept = [METRICS_HEADER + "\n"]
    if resume is not None and log_path.exists():
        lines = log_path.read_text(encoding="utf-8").splitlines(keepends=True)[1:]
        kept += [ln for ln in lines if ln.strip() and int(_step_fields(ln)[0]) <= trainer.step]
    log_path.write_text("".join(kept), encoding="utf-8")

    every = trainer.cfg.checkpoint_every

    def save(path: Path) -> None:
        ckpt = trainer.state_dict(corpora.vocab.itos)
        ckpt.meta["ablation"] = cfg.ablation
        save_checkpoint(ckpt, path)

    with open(log_path, "a", encoding="utf-8") as log:

        def after(rec: StepRecord) -> None:
            log.write(rec.line() + "\n")
            log.flush()
            if every and rec.step % every == 0:
                save(out / f"step{rec.step:06d}.ckpt")
            if rec.step % 100 == 0:
                logger.info("step %d  p2r=%.4f  r2p=%s  inv=%s", rec.step, rec.l_p2r, rec.l_r2p, rec.l_inv)
            if on_step is not None:
                on_step(rec)

        trainer.run(until=until, on_step=after)
    save(out / "final.ckpt")
    return trainer


def read_loss_trace(path) -> list[tuple[str, ...]]:
    """Loss columns of a metrics log (wallclock dropped)."""
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [tuple(_step_fields(r)[:5]) for r in rows if r.strip()]


# ---------------------------------------------------------------------------
# generation and evaluation


def load_stylized(path) -> tuple[DialogueModel, DialogueModel, Vocab, Checkpoint]:
    ckpt = load_checkpoint(path)
    stylized, inverse = models_from_checkpoint(ckpt)
    return stylized, inverse, Vocab(ckpt.vocab), ckpt


def generate(
    model: DialogueModel,
    vocab: Vocab,
    posts: Sequence[str],
    style: int,
    strategy: str = "greedy",
    max_len: int = 24,
    sampler: SamplerConfig | None = None,
) -> list[str]:
    """One response string per post, in order."""
    ids = [tokenize(p, vocab) for p in posts]
    if strategy == "greedy":
        outs = greedy_decode_many(model, ids, style, max_len)
    else:
        outs = batch_generate(model, ids, style, Strategy("sample", max_len, sampler or SamplerConfig()))
    return [detokenize(o, vocab) for o in outs]


def style_classifier(cfg: RunConfig, holdout_frac: float = 0.1) -> StyleClassifier:
    """Classifier trained on D_p responses (S0) against D_s texts (S1)."""
    s0 = [p.response for p in load_paired(cfg.pairs)]
    s1 = [u.text for u in load_unpaired(cfg.unpaired)]
    return train_style_classifier(s0, s1, holdout_frac, seed=int(substream(cfg.seed, "eval").integers(2**31)))


def evaluate(
    model: DialogueModel,
    vocab: Vocab,
    cfg: RunConfig,
    label: str,
    clf: StyleClassifier | None = None,
    out_dir=None,
) -> tuple[EvalReport, dict[str, list[str]]]:
    """Generate for every test set and score it under its own style."""
    clf = clf or style_classifier(cfg)
    report = EvalReport(label, config_hash=config_hash(to_mapping(cfg)))
    report.extra["classifier.heldout_accuracy"] = f"{clf.heldout_accuracy:.6f}"
    sampler = SamplerConfig(cfg.k, cfg.beam_size, cfg.eval_max_len, cfg.seed, cfg.length_penalty, 1)
    responses: dict[str, list[str]] = {}
    for style, path in ((0, cfg.test_s0), (1, cfg.test_s1)):
        if not path:
            continue
        test = load_paired(path)
        name = f"s{style}"
        outs = generate(model, vocab, [p.post for p in test], style, cfg.eval_strategy, cfg.eval_max_len, sampler)
        responses[name] = outs
        report.styles[name] = score_style(outs, [p.response for p in test], clf, style)
        if out_dir is not None:
            Path(out_dir, f"responses_{name}.txt").write_text("".join(o + "\n" for o in outs), encoding="utf-8")
    if out_dir is not None:
        Path(out_dir, "report.txt").write_text(report.to_text(), encoding="utf-8")
    return report, responses


def differing_fraction(a: Sequence[str], b: Sequence[str]) -> float:
    return float(np.mean([x != y for x, y in zip(a, b)])) if a else 0.0
