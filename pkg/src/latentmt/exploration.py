"""Latent-space exploration: ranked prior samples and linear interpolation.

Output lines are "score<TAB>translation" with the score at 6 decimal
places; scores are per-word log-probabilities by default, totals on
request. Duplicate translations collapse to their best-scoring instance
unless asked to keep them all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import generation
from .numerics import Tensor
from .training import Model


@dataclass
class RankedSample:
    tokens: list[int]
    score: float           # reported score (per-word or total per `per_word`)
    total_logp: float
    per_word_logp: float


def sample_ranked(
    model: Model,
    src_ids: list[int],
    n: int,
    seed: int,
    keep_duplicates: bool = False,
    per_word: bool = True,
    max_len: int | None = None,
) -> list[RankedSample]:
    """Draw n latents from the prior, greedy-decode, rescore and rank.

    Each output is scored by teacher-forcing its own tokens; the list is
    sorted by the reported score, descending, with the best instance kept
    when duplicates collapse.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    prepared = generation.prepare_source(model, src_ids)
    samples: list[RankedSample] = []
    for _ in range(n):
        z = generation.latent_for(model, prepared, "sample", rng)
        result = generation.greedy(model, prepared, z, max_len)
        total = generation.rescore(model, prepared, z, result)
        pw = total / max(result.scored_steps, 1)
        samples.append(
            RankedSample(
                tokens=result.tokens,
                score=pw if per_word else total,
                total_logp=total,
                per_word_logp=pw,
            )
        )
    if not keep_duplicates:
        best: dict[tuple, RankedSample] = {}
        for s in samples:
            key = tuple(s.tokens)
            if key not in best or s.score > best[key].score:
                best[key] = s
        samples = list(best.values())
    samples.sort(key=lambda s: (-s.score, s.tokens))
    return samples


def interpolate(
    model: Model,
    src_ids: list[int],
    z_start: np.ndarray,
    z_end: np.ndarray,
    steps: int,
    max_len: int | None = None,
) -> list[RankedSample]:
    """Greedy decodes along the segment between two latent vectors.

    Step t uses z = (1 - t) * z_start + t * z_end for t evenly spaced on
    [0, 1]; the endpoints decode with exactly z_start and z_end.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    z_start = np.asarray(z_start, dtype=np.float64)
    z_end = np.asarray(z_end, dtype=np.float64)
    if z_start.shape != z_end.shape or z_start.reshape(-1).shape[0] != model.cfg.d_z:
        raise ValueError(
            f"latent dimension mismatch: {z_start.shape} and {z_end.shape}, expected d_z={model.cfg.d_z}"
        )
    prepared = generation.prepare_source(model, src_ids)
    out: list[RankedSample] = []
    dtype = model.dtype
    for i in range(steps):
        t = i / (steps - 1)
        z_arr = ((1.0 - t) * z_start + t * z_end).astype(dtype).reshape(1, -1)
        z = Tensor(z_arr)
        result = generation.greedy(model, prepared, z, max_len)
        total = generation.rescore(model, prepared, z, result)
        pw = total / max(result.scored_steps, 1)
        out.append(RankedSample(tokens=result.tokens, score=pw, total_logp=total, per_word_logp=pw))
    return out


def format_lines(model: Model, samples: list[RankedSample]) -> list[str]:
    return [
        f"{s.score:.6f}\t{' '.join(model.tgt_vocab.decode(s.tokens))}"
        for s in samples
    ]
