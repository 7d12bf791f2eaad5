"""Latent-conditioned attention decoder.

A two-layer LSTM whose bottom layer reads [target embedding; z] at every
step (the latent enters as a per-step skip connection). The top-layer
output attends over source annotations with dot-product scores computed
against a learned projection of the annotations; the readout concatenates
the LSTM output, the attention context, and z again before the vocabulary
projection. Setting z to zeros degrades gracefully to a plain attention
decoder, which is how the zero-latent generation mode and the seq2seq
baseline run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import BOS_ID, EOS_ID, Batch
from .encoder import AnnotationMatrix, LstmCellParams, init_lstm_cell, lstm_step, masked_mean_pool
from .latent import NEG_INF_SCORE
from .numerics import Tensor


@dataclass
class DecoderParams:
    """Decoder LSTM stack plus attention, init-state and output projections."""

    cells: list[LstmCellParams]   # layer 0 input: d_emb + d_z; layer k>0 input: d_hid
    attn_w: Tensor                # (2*d_hid, d_hid) annotation projection for scoring
    init_w: Tensor                # (2*d_hid, d_hid)
    init_b: Tensor                # (d_hid,)
    out_w: Tensor                 # (d_hid + 2*d_hid + d_z, |V_tgt|)
    out_b: Tensor                 # (|V_tgt|,)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, cell in enumerate(self.cells):
            out[f"decoder.l{i}.w"] = cell.w
            out[f"decoder.l{i}.b"] = cell.b
        out["decoder.attn_w"] = self.attn_w
        out["decoder.init_w"] = self.init_w
        out["decoder.init_b"] = self.init_b
        out["decoder.out_w"] = self.out_w
        out["decoder.out_b"] = self.out_b
        return out


def init_decoder_params(
    tgt_vocab_size: int,
    d_emb: int,
    d_hid: int,
    d_z: int,
    n_layers: int,
    rng: np.random.Generator,
    scale: float = 0.08,
) -> DecoderParams:
    cells = []
    for layer in range(n_layers):
        in_dim = d_emb + d_z if layer == 0 else d_hid
        cells.append(init_lstm_cell(in_dim, d_hid, rng, scale))
    u = rng.uniform
    return DecoderParams(
        cells=cells,
        attn_w=Tensor(u(-scale, scale, size=(2 * d_hid, d_hid)), requires_grad=True),
        init_w=Tensor(u(-scale, scale, size=(2 * d_hid, d_hid)), requires_grad=True),
        init_b=Tensor(u(-scale, scale, size=(d_hid,)), requires_grad=True),
        out_w=Tensor(u(-scale, scale, size=(3 * d_hid + d_z, tgt_vocab_size)), requires_grad=True),
        out_b=Tensor(u(-scale, scale, size=(tgt_vocab_size,)), requires_grad=True),
    )


@dataclass
class DecodeContext:
    """Source-side quantities prepared once per batch of sentences."""

    src_ann: AnnotationMatrix
    proj_ann: Tensor      # (B, Tx, d_hid) annotations projected for scoring
    score_bias: Tensor    # (B, 1, Tx) additive mask, -inf-ish at PAD
    init_state: Tensor    # (B, d_hid) shared initial h and c for every layer


def prepare_decode_context(params: DecoderParams, src_ann: AnnotationMatrix) -> DecodeContext:
    dtype = src_ann.ann.dtype
    proj_ann = nm.matmul(src_ann.ann, params.attn_w)
    bias = np.where(src_ann.mask, 0.0, NEG_INF_SCORE).astype(dtype)
    init_state = nm.tanh(nm.matmul(masked_mean_pool(src_ann), params.init_w) + params.init_b)
    return DecodeContext(
        src_ann=src_ann,
        proj_ann=proj_ann,
        score_bias=Tensor(bias[:, None, :]),
        init_state=init_state,
    )


def initial_state(params: DecoderParams, ctx: DecodeContext) -> list[tuple[Tensor, Tensor]]:
    return [(ctx.init_state, ctx.init_state) for _ in params.cells]


def decode_step(
    params: DecoderParams,
    embed_tgt: Tensor,
    prev_ids: np.ndarray,
    state: list[tuple[Tensor, Tensor]],
    ctx: DecodeContext,
    z: Tensor,
):
    """One decoding step for a batch.

    Returns (vocab log-probabilities (B, V), new state, attention weights
    (B, Tx)). The attention weights sum to 1 and put no mass on PAD.
    """
    x = nm.concat([nm.embedding(embed_tgt, prev_ids), z], axis=1)
    new_state: list[tuple[Tensor, Tensor]] = []
    for cell, (h, c) in zip(params.cells, state):
        h, c = lstm_step(cell, x, h, c)
        new_state.append((h, c))
        x = h
    top = x  # (B, d_hid)

    batch, d_hid = top.shape
    scores = nm.matmul(ctx.proj_ann, nm.reshape(top, (batch, d_hid, 1)))  # (B, Tx, 1)
    scores = nm.transpose(scores) + ctx.score_bias                        # (B, 1, Tx)
    attn = nm.softmax(scores)
    context = nm.matmul(attn, ctx.src_ann.ann)                            # (B, 1, 2h)
    context = nm.reshape(context, (batch, ctx.src_ann.width))
    attn = nm.reshape(attn, (batch, ctx.src_ann.ann.shape[1]))

    readout = nm.tanh(nm.concat([top, context, z], axis=1))
    logits = nm.matmul(readout, params.out_w) + params.out_b
    return nm.log_softmax(logits), new_state, attn


def teacher_forced_nll(
    params: DecoderParams,
    embed_tgt: Tensor,
    batch: Batch,
    ctx: DecodeContext,
    z: Tensor,
) -> tuple[Tensor, np.ndarray]:
    """Negative log-likelihood of the reference targets, per sentence.

    Feeds the gold prefix at every step and sums -log p at real (non-PAD)
    predicted positions: content tokens and EOS count, BOS does not.
    Returns (per-sentence NLL (B,), per-sentence predicted-token counts).
    """
    dtype = embed_tgt.dtype
    state = initial_state(params, ctx)
    steps = batch.tgt.shape[1] - 1
    per_step: list[Tensor] = []
    for j in range(steps):
        log_probs, state, _ = decode_step(params, embed_tgt, batch.tgt[:, j], state, ctx, z)
        picked = nm.gather_last(log_probs, batch.tgt[:, j + 1])  # (B,)
        step_mask = Tensor(batch.tgt_mask[:, j + 1].astype(dtype))
        per_step.append(picked * step_mask)
    token_logp = nm.stack(per_step, axis=1)  # (B, steps)
    nll = -nm.tensor_sum(token_logp, axis=1)
    counts = batch.tgt_mask[:, 1:].sum(axis=1)
    return nll, counts


@dataclass
class DecodeResult:
    """A generated sequence with its accumulated log-probability."""

    tokens: list[int]      # content tokens, BOS/EOS stripped
    score: float           # sum of chosen log-probs, EOS step included when emitted
    ended_with_eos: bool

    @property
    def scored_steps(self) -> int:
        return len(self.tokens) + (1 if self.ended_with_eos else 0)

    @property
    def score_per_word(self) -> float:
        return self.score / max(self.scored_steps, 1)


def greedy_decode(
    params: DecoderParams,
    embed_tgt: Tensor,
    ctx: DecodeContext,
    z: Tensor,
    max_len: int,
) -> DecodeResult:
    """Argmax decoding for a single sentence, stopping at EOS or max_len."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    state = initial_state(params, ctx)
    prev = np.array([BOS_ID], dtype=np.int64)
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        log_probs, state, _ = decode_step(params, embed_tgt, prev, state, ctx, z)
        row = log_probs.data[0]
        token = int(np.argmax(row))
        score += float(row[token])
        if token == EOS_ID:
            return DecodeResult(tokens=tokens, score=score, ended_with_eos=True)
        tokens.append(token)
        prev = np.array([token], dtype=np.int64)
    return DecodeResult(tokens=tokens, score=score, ended_with_eos=False)


def score_sequence(
    params: DecoderParams,
    embed_tgt: Tensor,
    ctx: DecodeContext,
    z: Tensor,
    tokens: list[int],
    ended_with_eos: bool = True,
) -> float:
    """Teacher-force a token sequence and return its total log-probability.

    Scores exactly the steps generation would have scored: every content
    token plus the EOS step when `ended_with_eos`.
    """
    state = initial_state(params, ctx)
    prev = np.array([BOS_ID], dtype=np.int64)
    targets = list(tokens) + ([EOS_ID] if ended_with_eos else [])
    score = 0.0
    for target in targets:
        log_probs, state, _ = decode_step(params, embed_tgt, prev, state, ctx, z)
        score += float(log_probs.data[0, target])
        prev = np.array([target], dtype=np.int64)
    return score


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float
    state: list[tuple[Tensor, Tensor]]
    prev: int
    ended_with_eos: bool = False


def beam_decode(
    params: DecoderParams,
    embed_tgt: Tensor,
    ctx: DecodeContext,
    z: Tensor,
    width: int,
    max_len: int,
) -> list[DecodeResult]:
    """Length-unnormalized beam search for a single sentence.

    Hypotheses reaching EOS retire; at most `width` results come back,
    sorted by total log-probability (non-increasing). Hypotheses still
    alive at max_len are returned as unfinished. Width 1 reproduces greedy
    decoding exactly.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    active = [BeamHypothesis(tokens=[], score=0.0, state=initial_state(params, ctx), prev=BOS_ID)]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        if not active:
            break
        stepped_states = []
        candidates: list[tuple[float, int, int]] = []  # (total score, hyp index, token)
        for hyp_idx, hyp in enumerate(active):
            prev = np.array([hyp.prev], dtype=np.int64)
            log_probs, new_state, _ = decode_step(params, embed_tgt, prev, hyp.state, ctx, z)
            stepped_states.append(new_state)
            row = log_probs.data[0]
            for token in np.argsort(-row, kind="stable")[:width]:
                candidates.append((hyp.score + float(row[token]), hyp_idx, int(token)))
        candidates.sort(key=lambda cand: (-cand[0], cand[1], cand[2]))
        next_active: list[BeamHypothesis] = []
        for score, hyp_idx, token in candidates[:width]:
            src_hyp = active[hyp_idx]
            if token == EOS_ID:
                finished.append(
                    BeamHypothesis(list(src_hyp.tokens), score, stepped_states[hyp_idx], token, True)
                )
            else:
                next_active.append(
                    BeamHypothesis(src_hyp.tokens + [token], score, stepped_states[hyp_idx], token)
                )
        active = next_active
        if len(finished) >= width and active:
            # scores only decrease with length, so once the best live
            # hypothesis cannot beat the width-th finished one, stop
            kept = sorted((h.score for h in finished), reverse=True)[:width]
            if max(h.score for h in active) <= kept[-1]:
                break
    results = finished + active
    results.sort(key=lambda h: (-h.score, h.tokens))
    return [
        DecodeResult(tokens=h.tokens, score=h.score, ended_with_eos=h.ended_with_eos)
        for h in results[:width]
    ]
