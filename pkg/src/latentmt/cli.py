"""Command-line entry point for reproducible runs.

Configuration is flat key=value text ('#' comments); command-line flags
override file values. Every run that writes files also writes an exact
copy of its resolved configuration beside its outputs. On failure, partial
outputs are removed and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import evaluation, exploration, generation
from .data import (
    Vocabulary,
    build_vocab,
    encode_pairs,
    read_parallel_tokens,
    synth_corpus,
    write_corpus,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    metrics_row,
    METRICS_HEADER,
    new_trainer,
    parse_kv_file,
    save_checkpoint,
)


class CliError(Exception):
    """User-facing failure with an actionable message."""


class OutputTracker:
    """Remembers files a command created so failures can clean them up."""

    def __init__(self):
        self.paths: list[str] = []

    def register(self, path) -> str:
        self.paths.append(str(path))
        return str(path)

    def cleanup(self) -> None:
        for path in self.paths:
            if os.path.isfile(path):
                os.remove(path)


def _write_text(tracker: OutputTracker, path, text: str) -> None:
    tracker.register(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _write_resolved_config(tracker: OutputTracker, out_dir, cfg: TrainConfig, extra: dict | None = None) -> None:
    lines = cfg.to_kv_lines()
    if extra:
        lines += [f"{k}={v}" for k, v in sorted(extra.items())]
    _write_text(tracker, os.path.join(out_dir, "config.resolved.txt"), "\n".join(lines) + "\n")


def _require_file(path, what: str) -> str:
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _config_from_args(args) -> TrainConfig:
    mapping: dict[str, str] = {}
    if getattr(args, "config", None):
        mapping.update(parse_kv_file(_require_file(args.config, "config file")))
    cfg_fields = {f.name for f in fields(TrainConfig)}
    for name in cfg_fields:
        value = getattr(args, name, None)
        if value is not None:
            mapping[name] = str(value)
    try:
        return TrainConfig.from_kv(mapping)
    except ValueError as e:
        raise CliError(f"bad configuration: {e}") from e


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--mode", choices=("seq2seq", "cvae", "cvae_meanpool_posterior"))
    p.add_argument("--mitigation", choices=("warmup", "kl_min", "kl_coeff", "none"))
    p.add_argument("--kl-min", dest="kl_min", type=float)
    p.add_argument("--kl-coeff", dest="kl_coeff", type=float)
    p.add_argument("--word-dropout-rate", dest="word_dropout_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d-emb", dest="d_emb", type=int)
    p.add_argument("--d-hid", dest="d_hid", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d-z", dest="d_z", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--min-freq", dest="min_freq", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--patience", type=int)


def _load_corpus(src_path, tgt_path, cfg: TrainConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    raw, _, _ = read_parallel_tokens(src_path, tgt_path, cfg.max_len)
    return encode_pairs(raw, src_vocab, tgt_vocab)


def _read_source_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, tracker: OutputTracker) -> int:
    cfg = _config_from_args(args)
    _require_file(args.train_src, "training source corpus")
    _require_file(args.train_tgt, "training target corpus")
    _require_file(args.val_src, "validation source corpus")
    _require_file(args.val_tgt, "validation target corpus")
    os.makedirs(args.out_dir, exist_ok=True)

    train_raw, _, _ = read_parallel_tokens(args.train_src, args.train_tgt, cfg.max_len)
    src_vocab = build_vocab((s for s, _ in train_raw), cfg.min_freq)
    tgt_vocab = build_vocab((t for _, t in train_raw), cfg.min_freq)
    train_pairs = encode_pairs(train_raw, src_vocab, tgt_vocab)
    val_pairs = _load_corpus(args.val_src, args.val_tgt, cfg, src_vocab, tgt_vocab)

    _write_resolved_config(tracker, args.out_dir, cfg)
    src_vocab_path = tracker.register(os.path.join(args.out_dir, "vocab.src.tsv"))
    tgt_vocab_path = tracker.register(os.path.join(args.out_dir, "vocab.tgt.tsv"))
    src_vocab.save(src_vocab_path)
    tgt_vocab.save(tgt_vocab_path)

    if args.resume:
        trainer = load_checkpoint(_require_file(args.resume, "checkpoint"), train_pairs, val_pairs)
        if trainer.model.cfg != cfg:
            raise CliError("checkpoint configuration does not match the requested configuration")
    else:
        trainer = new_trainer(cfg, src_vocab, tgt_vocab, train_pairs, val_pairs)

    metrics_path = tracker.register(os.path.join(args.out_dir, "metrics.csv"))
    ckpt_last = tracker.register(os.path.join(args.out_dir, "checkpoint_last.ckpt"))
    ckpt_best = os.path.join(args.out_dir, "checkpoint_best.ckpt")
    best_val = None
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write(METRICS_HEADER + "\n")
        for row in (metrics_row(m) for m in trainer.metrics):
            f.write(row + "\n")
        while trainer.epoch < cfg.epochs:
            start_index = len(trainer.metrics)
            trainer.train_epoch()
            for m in trainer.metrics[start_index:]:
                f.write(metrics_row(m) + "\n")
            f.flush()
            save_checkpoint(ckpt_last, trainer)
            val_rows = [m for m in trainer.metrics if m.split == "val"]
            if val_rows and (best_val is None or val_rows[-1].nelbo_per_word < best_val):
                best_val = val_rows[-1].nelbo_per_word
                tracker.register(ckpt_best)
                save_checkpoint(ckpt_best, trainer)
    return 0


def cmd_translate(args, tracker: OutputTracker) -> int:
    trainer = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    model = trainer.model
    z_mode = "prior_mean"
    rng = None
    if args.zero_latent:
        z_mode = "zero"
    elif args.sample_z:
        z_mode = "sample"
        rng = np.random.default_rng(args.seed)
    lines = _read_source_lines(_require_file(args.input, "input file"))
    out_lines = []
    for tokens in lines:
        if not tokens:
            out_lines.append("")
            continue
        out_lines.append(" ".join(generation.translate_tokens(model, tokens, z_mode, args.beam, rng)))
    text = "\n".join(out_lines) + "\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_resolved_config(tracker, args.out_dir, model.cfg, {"command": "translate", "beam": args.beam})
        _write_text(tracker, os.path.join(args.out_dir, "translations.txt"), text)
    sys.stdout.write(text)
    return 0


def cmd_eval(args, tracker: OutputTracker) -> int:
    trainer = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    model = trainer.model
    pairs = _load_corpus(
        _require_file(args.src, "source file"), _require_file(args.ref, "reference file"),
        model.cfg, model.src_vocab, model.tgt_vocab,
    )
    if not pairs:
        raise CliError("evaluation corpus is empty after filtering")
    report = evaluation.evaluate_model(model, pairs, beam=args.beam)
    kl = "NA" if report.kl_per_word is None else f"{report.kl_per_word:.4f}"
    table = evaluation.ExperimentTable(
        columns=["ppl", "nelbo_or_nll", "re_per_word", "kl_per_word",
                 "bleu_greedy", "bleu_zero_latent", "bleu_beam"],
        rows=[[
            f"{report.ppl:.4f}", f"{report.nelbo_per_word:.4f}", f"{report.re_per_word:.4f}", kl,
            f"{report.bleu_greedy:.4f}", f"{report.bleu_zero_latent:.4f}", f"{report.bleu_beam:.4f}",
        ]],
    )
    sys.stdout.write(table.to_text())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_resolved_config(tracker, args.out_dir, model.cfg, {"command": "eval", "beam": args.beam})
        _write_text(tracker, os.path.join(args.out_dir, "eval.csv"), table.to_csv())
        _write_text(tracker, os.path.join(args.out_dir, "eval.txt"), table.to_text())
    return 0


def cmd_sample(args, tracker: OutputTracker) -> int:
    trainer = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    model = trainer.model
    if not model.cfg.uses_latent:
        raise CliError("checkpoint was trained without a latent variable; nothing to sample")
    lines = _read_source_lines(_require_file(args.input, "input file"))
    blocks = []
    for tokens in lines:
        if not tokens:
            continue
        src_ids = model.src_vocab.encode(tokens)
        samples = exploration.sample_ranked(
            model, src_ids, n=args.n, seed=args.seed,
            keep_duplicates=args.keep_duplicates, per_word=not args.total_score,
        )
        blocks.append(f"# {' '.join(tokens)}")
        blocks.extend(exploration.format_lines(model, samples))
    text = "\n".join(blocks) + "\n"
    sys.stdout.write(text)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_resolved_config(tracker, args.out_dir, model.cfg,
                               {"command": "sample", "n": args.n, "seed": args.seed})
        _write_text(tracker, os.path.join(args.out_dir, "samples.txt"), text)
    return 0


def cmd_interpolate(args, tracker: OutputTracker) -> int:
    trainer = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    model = trainer.model
    if not model.cfg.uses_latent:
        raise CliError("checkpoint was trained without a latent variable; nothing to interpolate")
    rng = np.random.default_rng(args.seed)
    lines = _read_source_lines(_require_file(args.input, "input file"))
    blocks = []
    for tokens in lines:
        if not tokens:
            continue
        src_ids = model.src_vocab.encode(tokens)
        prepared = generation.prepare_source(model, src_ids)
        z_start = generation.latent_for(model, prepared, "sample", rng).data
        z_end = generation.latent_for(model, prepared, "sample", rng).data
        steps = exploration.interpolate(model, src_ids, z_start, z_end, args.steps)
        blocks.append(f"# {' '.join(tokens)}")
        blocks.extend(exploration.format_lines(model, steps))
    text = "\n".join(blocks) + "\n"
    sys.stdout.write(text)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_resolved_config(tracker, args.out_dir, model.cfg,
                               {"command": "interpolate", "steps": args.steps, "seed": args.seed})
        _write_text(tracker, os.path.join(args.out_dir, "interpolations.txt"), text)
    return 0


def cmd_synth_data(args, tracker: OutputTracker) -> int:
    src_lines, tgt_lines = synth_corpus(args.kind, args.size, args.vocab, args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out_prefix))
    os.makedirs(out_dir, exist_ok=True)
    src_path = tracker.register(f"{args.out_prefix}.src")
    tgt_path = tracker.register(f"{args.out_prefix}.tgt")
    write_corpus(src_lines, src_path)
    write_corpus(tgt_lines, tgt_path)
    extra = {"command": "synth-data", "kind": args.kind, "size": args.size,
             "vocab": args.vocab, "seed": args.seed}
    _write_text(tracker, f"{args.out_prefix}.config.txt",
                "\n".join(f"{k}={v}" for k, v in sorted(extra.items())) + "\n")
    return 0


def _experiment_data(cfg: TrainConfig, size: int, vocab_size: int, seed: int):
    train_src, train_tgt = synth_corpus("multimodal", size, vocab_size, seed)
    val_src, val_tgt = synth_corpus("multimodal", max(size // 4, 8), vocab_size, seed + 1)
    src_vocab = build_vocab(train_src, 1)
    tgt_vocab = build_vocab(train_tgt, 1)
    train_pairs = encode_pairs(list(zip(train_src, train_tgt)), src_vocab, tgt_vocab)
    val_pairs = encode_pairs(list(zip(val_src, val_tgt)), src_vocab, tgt_vocab)
    return src_vocab, tgt_vocab, train_pairs, val_pairs


def _experiment_config(args) -> TrainConfig:
    cfg = _config_from_args(args)
    overrides = {}
    if args.epochs is None:
        overrides["epochs"] = 40
    if args.d_emb is None:
        overrides["d_emb"] = 32
    if args.d_hid is None:
        overrides["d_hid"] = 32
    if args.d_z is None:
        overrides["d_z"] = 8
    if args.batch_size is None:
        overrides["batch_size"] = 32
    if args.min_freq is None:
        overrides["min_freq"] = 1
    return replace(cfg, **overrides)


def cmd_experiment1(args, tracker: OutputTracker) -> int:
    cfg = _experiment_config(args)
    src_vocab, tgt_vocab, train_pairs, val_pairs = _experiment_data(cfg, args.size, args.vocab, cfg.seed)
    cfg_a = replace(cfg, mode="cvae")
    cfg_b = replace(cfg, mode="cvae_meanpool_posterior")
    table = evaluation.experiment1_zeroed_kl(cfg_a, cfg_b, src_vocab, tgt_vocab, train_pairs, val_pairs)
    sys.stdout.write(table.to_text())
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved_config(tracker, args.out_dir, cfg,
                           {"command": "experiment1", "size": args.size, "vocab": args.vocab})
    _write_text(tracker, os.path.join(args.out_dir, "experiment1.csv"), table.to_csv())
    _write_text(tracker, os.path.join(args.out_dir, "experiment1.txt"), table.to_text())
    return 0


def cmd_experiment2(args, tracker: OutputTracker) -> int:
    cfg = _experiment_config(args)
    if cfg.mode == "seq2seq":
        raise CliError("experiment2 sweeps latent-variable mitigations; use a cvae mode")
    src_vocab, tgt_vocab, train_pairs, val_pairs = _experiment_data(cfg, args.size, args.vocab, cfg.seed)
    entries = [e for e in args.mitigations.split(",") if e.strip()]
    if not entries:
        raise CliError("no mitigation entries given")
    table = evaluation.experiment2_sweep(entries, cfg, src_vocab, tgt_vocab, train_pairs, val_pairs)
    sys.stdout.write(table.to_text())
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved_config(tracker, args.out_dir, cfg,
                           {"command": "experiment2", "mitigations": args.mitigations,
                            "size": args.size, "vocab": args.vocab})
    _write_text(tracker, os.path.join(args.out_dir, "experiment2.csv"), table.to_csv())
    _write_text(tracker, os.path.join(args.out_dir, "experiment2.txt"), table.to_text())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, writing checkpoints and metrics per epoch")
    _add_config_flags(p)
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--val-src", required=True)
    p.add_argument("--val-tgt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a file, one sentence per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--zero-latent", action="store_true")
    group.add_argument("--sample-z", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="metrics row: PPL, NELBO/NLL, RE, KL and three BLEU conditions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="ranked prior samples per input sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-duplicates", action="store_true")
    p.add_argument("--total-score", action="store_true",
                   help="rank by total instead of per-word log-probability")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", help="decode along a segment between two prior samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("synth-data", help="generate a synthetic parallel corpus")
    p.add_argument("--kind", choices=("copy", "multimodal"), required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("experiment1", help="zeroed-KL posterior expressiveness comparison")
    _add_config_flags(p)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment1)

    p = sub.add_parser("experiment2", help="collapse-mitigation sweep on the multimodal corpus")
    _add_config_flags(p)
    p.add_argument("--mitigations", default="none,warmup,kl_min=0.1,kl_coeff=0.25")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment2)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tracker = OutputTracker()
    try:
        return args.func(args, tracker)
    except (CliError, FileNotFoundError, ValueError, FloatingPointError) as e:
        tracker.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
