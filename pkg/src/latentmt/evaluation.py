"""BLEU scoring, metric aggregation, and the experiment harnesses.

BLEU is corpus-level 4-gram with brevity penalty, computed on token
sequences with unknown tokens retained. Smoothing is add-one on the n-gram
precision, applied for n >= 2 only when that order has zero matches.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace

from .data import SentencePair, Vocabulary
from .training import (
    Model,
    TrainConfig,
    Trainer,
    new_trainer,
    validate,
)
from . import generation

BLEU_MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]   # p1..p4
    brevity_penalty: float
    hyp_length: int
    ref_length: int


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references) -> BleuReport:
    """Corpus-level BLEU over token sequences (one reference per hypothesis)."""
    if len(hypotheses) != len(references):
        raise ValueError(f"count mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise ValueError("empty reference set")
    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = _ngram_counts(hyp, n)
            ref_counts = _ngram_counts(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = []
    for n in range(1, BLEU_MAX_ORDER + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n >= 2 and m == 0:
            precisions.append((m + 1.0) / (t + 1.0))
        elif t == 0:
            precisions.append(0.0)
        else:
            precisions.append(m / t)

    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / BLEU_MAX_ORDER)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def ppl_from_nelbo(nelbo_per_word: float) -> float:
    """Per-word perplexity (upper bound for variational models)."""
    if not math.isfinite(nelbo_per_word):
        raise ValueError(f"nelbo must be finite, got {nelbo_per_word}")
    return math.exp(nelbo_per_word)


# ---------------------------------------------------------------------------
# model evaluation (Table-1-style row)
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ppl: float
    nelbo_per_word: float
    re_per_word: float
    kl_per_word: float | None
    bleu_greedy: float
    bleu_zero_latent: float
    bleu_beam: float


def evaluate_model(model: Model, pairs: list[SentencePair], beam: int | None = None) -> EvalReport:
    """Validation metrics plus the three BLEU conditions on one corpus.

    BLEU hypotheses use the prior-mean latent for greedy and beam search,
    and the zeroed latent for the zero-latent column; references are the
    corpus targets with specials stripped.
    """
    beam = beam if beam is not None else model.cfg.beam
    metrics = validate(model, pairs)
    refs = [p.tgt[1:-1] for p in pairs]
    greedy, zeroed, beamed = [], [], []
    for p in pairs:
        prepared = generation.prepare_source(model, p.src)
        z_mean = generation.latent_for(model, prepared, "prior_mean")
        z_zero = generation.latent_for(model, prepared, "zero")
        greedy.append(generation.greedy(model, prepared, z_mean).tokens)
        zeroed.append(generation.greedy(model, prepared, z_zero).tokens)
        beamed.append(generation.beam(model, prepared, z_mean, beam)[0].tokens)
    return EvalReport(
        ppl=metrics.ppl,
        nelbo_per_word=metrics.nelbo_per_word,
        re_per_word=metrics.re_per_word,
        kl_per_word=metrics.kl_per_word,
        bleu_greedy=corpus_bleu(greedy, refs).bleu,
        bleu_zero_latent=corpus_bleu(zeroed, refs).bleu,
        bleu_beam=corpus_bleu(beamed, refs).bleu,
    )


# ---------------------------------------------------------------------------
# experiment harnesses
# ---------------------------------------------------------------------------


@dataclass
class ExperimentTable:
    columns: list[str]
    rows: list[list[str]]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        lines.extend(",".join(row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        table = [self.columns] + self.rows
        widths = [max(len(row[i]) for row in table) for i in range(len(self.columns))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
        return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return "NA" if x is None else f"{x:.4f}"


def _train_to_end(cfg: TrainConfig, src_vocab, tgt_vocab, train_pairs, val_pairs) -> Trainer:
    trainer = new_trainer(cfg, src_vocab, tgt_vocab, train_pairs, val_pairs, clock=lambda: 0.0)
    for _ in range(cfg.epochs):
        trainer.train_epoch()
    return trainer


def experiment1_zeroed_kl(
    cfg_coattention: TrainConfig,
    cfg_meanpool: TrainConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train_pairs: list[SentencePair],
    val_pairs: list[SentencePair],
) -> ExperimentTable:
    """Posterior-expressiveness comparison with the KL term zeroed out.

    Trains the two posterior variants on identical data with a zero KL
    coefficient, so all gradient flows through reconstruction (the prior
    receives none, being reachable only through the KL term), and reports
    final validation reconstruction error per word for each.
    """
    if cfg_coattention.mode != "cvae" or cfg_meanpool.mode != "cvae_meanpool_posterior":
        raise ValueError(
            "experiment1 expects a (cvae, cvae_meanpool_posterior) config pair, got "
            f"({cfg_coattention.mode}, {cfg_meanpool.mode})"
        )
    a = replace(cfg_coattention, mode="cvae")
    b = replace(cfg_meanpool, mode="cvae")
    if a != b:
        diffs = [
            f.name
            for f in a.__dataclass_fields__.values()
            if getattr(a, f.name) != getattr(b, f.name)
        ]
        raise ValueError(f"config pair differs beyond posterior type: {diffs}")

    rows = []
    for label, cfg in (("coattention", cfg_coattention), ("meanpool", cfg_meanpool)):
        run_cfg = replace(cfg, mitigation="kl_coeff", kl_coeff=0.0)
        trainer = _train_to_end(run_cfg, src_vocab, tgt_vocab, train_pairs, val_pairs)
        final = validate(trainer.model, val_pairs)
        rows.append([label, _fmt(final.re_per_word)])
    return ExperimentTable(columns=["model", "re_per_word"], rows=rows)


def parse_mitigation_entry(entry: str) -> tuple[str, dict]:
    """Sweep entry syntax: none | warmup | kl_min=V | kl_coeff=V | word_dropout=V."""
    entry = entry.strip()
    if entry in ("none", "warmup"):
        return entry, {"mitigation": entry}
    if "=" in entry:
        key, value = entry.split("=", 1)
        key = key.strip()
        if key == "kl_min":
            return entry, {"mitigation": "kl_min", "kl_min": float(value)}
        if key == "kl_coeff":
            return entry, {"mitigation": "kl_coeff", "kl_coeff": float(value)}
        if key == "word_dropout":
            # dropout is orthogonal to the objective; pair it with warm-up
            return entry, {"mitigation": "warmup", "word_dropout_rate": float(value)}
    raise ValueError(f"cannot parse mitigation entry '{entry}'")


def experiment2_sweep(
    entries: list[str],
    base_cfg: TrainConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train_pairs: list[SentencePair],
    val_pairs: list[SentencePair],
) -> ExperimentTable:
    """One training run per mitigation on shared data and seed.

    Emits per run: validation PPL, NELBO, RE, KL per word and greedy BLEU.
    """
    rows = []
    for entry in entries:
        label, overrides = parse_mitigation_entry(entry)
        cfg = replace(base_cfg, **overrides)
        trainer = _train_to_end(cfg, src_vocab, tgt_vocab, train_pairs, val_pairs)
        report = evaluate_model(trainer.model, val_pairs, beam=1)
        rows.append(
            [
                label,
                _fmt(report.ppl),
                _fmt(report.nelbo_per_word),
                _fmt(report.re_per_word),
                _fmt(report.kl_per_word),
                _fmt(report.bleu_greedy),
            ]
        )
    return ExperimentTable(
        columns=["mitigation", "ppl", "nelbo_per_word", "re_per_word", "kl_per_word", "bleu_greedy"],
        rows=rows,
    )
