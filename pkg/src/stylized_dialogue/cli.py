"""Command line entry point: ``synth``, ``train``, ``generate``, ``pseudo``, ``eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 training
divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, from_mapping, parse_kv, to_mapping
from .data import MIN_SIZES, CorpusError, detokenize, load_paired, load_unpaired, synth_corpus, tokenize
from .decode import SamplerConfig
from .metrics import EvalReport, bootstrap_test, config_hash, per_item_scores, score_style
from .pipeline import ABLATION_LABELS, ABLATIONS, RunConfig, evaluate, generate, load_stylized, style_classifier, train_run
from .train import DivergenceError, configs_from_checkpoint, pseudo_posts

logger = logging.getLogger("stylized_dialogue")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# flags that map straight onto RunConfig fields
_RUN_FLAGS = {
    "pairs": "pairs",
    "unpaired": "unpaired",
    "test_s0": "test_s0",
    "test_s1": "test_s1",
    "nf": "n_f",
    "k": "k",
    "beam": "beam_size",
    "m": "m",
    "lr": "lr",
    "steps": "max_steps",
    "batch": "n_d",
    "checkpoint_every": "checkpoint_every",
    "ablation": "ablation",
    "seed": "seed",
    "strategy": "eval_strategy",
}


def _style(value: str) -> int:
    if value not in ("s0", "s1"):
        raise argparse.ArgumentTypeError("style must be s0 or s1")
    return int(value[1])


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p: argparse.ArgumentParser, default) -> None:
        p.add_argument("--config", default=default, help="key=value run configuration file")
        p.add_argument("--seed", type=int, default=default, help="root random seed")
        p.add_argument("--out", default=default, help="output directory (synth, train) or file")
        p.add_argument("--quiet", action="store_true", default=default or False, help="only log warnings")

    # global flags may appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="stylized-dialogue", description=__doc__.splitlines()[0])
    global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic two-style corpus")
    p.add_argument("--pairs-size", type=int, default=5000)
    p.add_argument("--unpaired-size", type=int, default=2000)
    p.add_argument("--test-size", type=int, default=400)
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("train", parents=[common], help="joint training run")
    p.add_argument("--pairs", help="paired corpus (JSONL post/response)")
    p.add_argument("--unpaired", help="unpaired stylised texts (JSONL text)")
    p.add_argument("--nf", type=float, help="warm-up steps before pseudo pairs (inf disables)")
    p.add_argument("--k", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", parents=[common], help="decode responses for a posts file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--posts", required=True, help="one post per line, or JSONL with a post field")
    p.add_argument("--style", type=_style, required=True, help="s0 or s1")
    p.add_argument("--strategy", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--beam", type=int, default=4)

    p = sub.add_parser("pseudo", parents=[common], help="sample pseudo posts for unpaired texts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--texts", required=True, help="unpaired texts (JSONL text)")
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true", help="one greedy post per text")

    p = sub.add_parser("eval", parents=[common], help="score responses and print the metric table")
    p.add_argument("--pairs", help="S0 classifier corpus (paired JSONL, responses used)")
    p.add_argument("--unpaired", help="S1 classifier corpus (JSONL text)")
    p.add_argument("--checkpoint", help="generate from this checkpoint for every test set")
    p.add_argument("--test-s0", help="held-out S0 pairs")
    p.add_argument("--test-s1", help="held-out S1 pairs")
    p.add_argument("--responses", help="responses file, one per line")
    p.add_argument("--references", help="JSONL pairs whose responses are the references")
    p.add_argument("--style", type=_style, help="target style of --responses")
    p.add_argument("--compare", help="second responses file for paired bootstrap tests")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--strategy", choices=("greedy", "sample"))
    p.add_argument("--label", default="")
    return parser


def _run_config(args) -> RunConfig:
    """Built-in defaults, then the config file, then explicit flags."""
    values = to_mapping(RunConfig())
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(parse_kv(text))
    for flag, key in _RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    try:
        return from_mapping(RunConfig, values).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"{args.command}: missing {', '.join(missing)}")


def _read_posts(path) -> list[str]:
    if str(path).endswith(".jsonl"):
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line)["post"] for line in fh if line.strip()]
    return _read_lines(path)


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    _need(args, "out")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    sizes = {"pairs": args.pairs_size, "unpaired": args.unpaired_size, "test": args.test_size}
    for key, lo in MIN_SIZES.items():
        if sizes[key] < lo:
            raise UsageError(f"{key} size {sizes[key]} below minimum {lo}")
    paths = synth_corpus(args.seed or 0, out, sizes)
    print(paths.manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _need(args, "out")
    if not cfg.pairs or not cfg.unpaired:
        raise UsageError("train: --pairs and --unpaired (or config keys) are required")
    trainer = train_run(cfg, args.out, resume=args.resume)
    logger.info("finished at step %d; final checkpoint %s", trainer.step, Path(args.out) / "final.ckpt")
    return EXIT_OK


def cmd_generate(args) -> int:
    stylized, _, vocab, _ = load_stylized(args.checkpoint)
    posts = _read_posts(args.posts)
    sampler = SamplerConfig(args.k, args.beam, args.max_len, args.seed or 0, m=1)
    outs = generate(stylized, vocab, posts, args.style, args.strategy, args.max_len, sampler)
    _emit("".join(o + "\n" for o in outs), args.out)
    return EXIT_OK


def cmd_pseudo(args) -> int:
    _, inverse, vocab, ckpt = load_stylized(args.checkpoint)
    _, tcfg = configs_from_checkpoint(ckpt)
    m = args.m or tcfg.m
    sampler = SamplerConfig(args.k or tcfg.k, args.beam or tcfg.beam_size, tcfg.decode_max_len, m=m)
    texts = [u.text for u in load_unpaired(args.texts)]
    seed = 0 if args.seed is None else args.seed
    posts = pseudo_posts(inverse, [tokenize(t, vocab) for t in texts], m, not args.greedy, sampler.validate(len(vocab)), seed)
    lines = [
        json.dumps({"post": detokenize(p, vocab), "response": t}, ensure_ascii=False) + "\n"
        for t, ps in zip(texts, posts)
        for p in ps
    ]
    _emit("".join(lines), args.out)
    return EXIT_OK


def _eval_files(args, cfg: RunConfig) -> EvalReport:
    _need(args, "references", "style")
    refs = [p.response for p in load_paired(args.references)]
    responses = _read_lines(args.responses)
    if len(responses) != len(refs):
        raise UsageError(f"misaligned files: {len(responses)} responses vs {len(refs)} references")
    clf = style_classifier(cfg) if cfg.pairs and cfg.unpaired else None
    name = f"s{args.style}"
    report = EvalReport(args.label or Path(args.responses).stem, config_hash=config_hash(to_mapping(cfg)))
    report.styles[name] = score_style(responses, refs, clf, args.style)
    if args.compare:
        other = _read_lines(args.compare)
        if len(other) != len(refs):
            raise UsageError(f"misaligned files: {len(other)} compare responses vs {len(refs)} references")
        a = per_item_scores(responses, refs, clf, args.style)
        b = per_item_scores(other, refs, clf, args.style)
        for metric in a:
            p = bootstrap_test(a[metric], b[metric], args.resamples, cfg.seed)
            report.extra[f"{name}.{metric}.p_value"] = f"{p:.6f}"
    return report


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if args.responses:
        report = _eval_files(args, cfg)
    else:
        _need(args, "checkpoint")
        stylized, _, vocab, ckpt = load_stylized(args.checkpoint)
        if not (cfg.test_s0 or cfg.test_s1):
            raise UsageError("eval: give --test-s0 and/or --test-s1")
        if not (cfg.pairs and cfg.unpaired):
            raise UsageError("eval: the style classifier needs --pairs and --unpaired")
        ablation = ckpt.meta.get("ablation", "")
        label = args.label or ABLATION_LABELS.get(ablation, Path(args.checkpoint).stem)
        report, _ = evaluate(stylized, vocab, cfg, label, out_dir=None)
    if args.out:
        Path(args.out).write_text(report.to_text(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate, "pseudo": cmd_pseudo, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CorpusError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
