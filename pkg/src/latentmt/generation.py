"""Per-sentence generation glue shared by evaluation, exploration and CLI.

Wraps encoding, latent selection and decoding for a single source
sentence. The default decode length bound is 2 * source length + 10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from .encoder import AnnotationMatrix, encode
from .latent import prior_params, reparam_sample
from .numerics import Tensor
from .training import Model


@dataclass
class PreparedSource:
    src_ann: AnnotationMatrix
    ctx: dec.DecodeContext
    length: int

    @property
    def default_max_len(self) -> int:
        return 2 * self.length + 10


def prepare_source(model: Model, src_ids: list[int]) -> PreparedSource:
    ids = np.asarray([src_ids], dtype=np.int64)
    mask = np.ones_like(ids, dtype=bool)
    src_ann = encode(model.encoder, ids, mask, "source")
    ctx = dec.prepare_decode_context(model.decoder, src_ann)
    return PreparedSource(src_ann=src_ann, ctx=ctx, length=len(src_ids))


def latent_for(
    model: Model,
    prepared: PreparedSource,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pick the latent for generation: "zero", "prior_mean" or "sample".

    Seq2seq models always decode with the zero latent regardless of mode.
    """
    if not model.cfg.uses_latent or mode == "zero":
        return model.zero_latent(1)
    prior = prior_params(model.prior, prepared.src_ann)
    if mode == "prior_mean":
        return prior.mean
    if mode == "sample":
        if rng is None:
            raise ValueError("latent mode 'sample' needs a random generator")
        eps = rng.standard_normal((1, model.cfg.d_z))
        return reparam_sample(prior, eps)
    raise ValueError(f"unknown latent mode '{mode}'")


def greedy(model: Model, prepared: PreparedSource, z: Tensor, max_len: int | None = None) -> dec.DecodeResult:
    max_len = max_len or prepared.default_max_len
    return dec.greedy_decode(model.decoder, model.encoder.embed_tgt, prepared.ctx, z, max_len)


def beam(
    model: Model, prepared: PreparedSource, z: Tensor, width: int, max_len: int | None = None
) -> list[dec.DecodeResult]:
    max_len = max_len or prepared.default_max_len
    return dec.beam_decode(model.decoder, model.encoder.embed_tgt, prepared.ctx, z, width, max_len)


def rescore(model: Model, prepared: PreparedSource, z: Tensor, result: dec.DecodeResult) -> float:
    """Teacher-forced log-probability of a generated sequence's own tokens."""
    return dec.score_sequence(
        model.decoder, model.encoder.embed_tgt, prepared.ctx, z, result.tokens, result.ended_with_eos
    )


def translate_tokens(model: Model, src_tokens: list[str], z_mode: str, width: int = 1,
                     rng: np.random.Generator | None = None) -> list[str]:
    """Tokens in, tokens out: encode, decode, strip specials, detokenize ids."""
    src_ids = model.src_vocab.encode(src_tokens)
    prepared = prepare_source(model, src_ids)
    z = latent_for(model, prepared, z_mode, rng)
    if width <= 1:
        result = greedy(model, prepared, z)
    else:
        result = beam(model, prepared, z, width)[0]
    return model.tgt_vocab.decode(result.tokens)
