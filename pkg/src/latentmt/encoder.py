"""Shared bidirectional LSTM encoder.

One stack of LSTM weights serves both languages; only the embedding tables
differ per side. Per-token annotation vectors are the concatenation of the
top layer's forward and backward outputs, so their width is twice the
hidden size. At padded positions both directions carry their state through
unchanged, which makes every output invariant to appended padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass
class LstmCellParams:
    """Fused gate weights: input [x; h] -> 4*hidden (order i, f, g, o)."""

    w: Tensor  # (in_dim + hidden, 4*hidden)
    b: Tensor  # (4*hidden,)

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4


def init_lstm_cell(in_dim: int, hidden: int, rng: np.random.Generator, scale: float = 0.08) -> LstmCellParams:
    w = Tensor(rng.uniform(-scale, scale, size=(in_dim + hidden, 4 * hidden)), requires_grad=True)
    b_arr = rng.uniform(-scale, scale, size=(4 * hidden,))
    b_arr[hidden : 2 * hidden] = 1.0  # forget gate open at init
    b = Tensor(b_arr, requires_grad=True)
    return LstmCellParams(w=w, b=b)


def lstm_step(cell: LstmCellParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step over a batch: x (B, in), h/c (B, hidden)."""
    hidden = cell.hidden
    z = nm.matmul(nm.concat([x, h], axis=1), cell.w) + cell.b
    i_gate, f_gate, g_gate, o_gate = nm.split(z, [hidden] * 4, axis=1)
    c_new = nm.sigmoid(f_gate) * c + nm.sigmoid(i_gate) * nm.tanh(g_gate)
    h_new = nm.sigmoid(o_gate) * nm.tanh(c_new)
    return h_new, c_new


def masked_lstm_step(
    cell: LstmCellParams, x: Tensor, h: Tensor, c: Tensor, step_mask: Tensor
) -> tuple[Tensor, Tensor]:
    """LSTM step that freezes state where step_mask is 0 (PAD positions)."""
    h_new, c_new = lstm_step(cell, x, h, c)
    keep = 1.0 - step_mask
    return h_new * step_mask + h * keep, c_new * step_mask + c * keep


@dataclass
class EncoderParams:
    """Embeddings per language plus the shared bidirectional LSTM stack."""

    embed_src: Tensor  # (|V_src|, d_emb)
    embed_tgt: Tensor  # (|V_tgt|, d_emb)
    layers: list[tuple[LstmCellParams, LstmCellParams]]  # (forward, backward) per layer

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"encoder.embed_src": self.embed_src, "encoder.embed_tgt": self.embed_tgt}
        for i, (fwd, bwd) in enumerate(self.layers):
            out[f"encoder.l{i}.fwd.w"] = fwd.w
            out[f"encoder.l{i}.fwd.b"] = fwd.b
            out[f"encoder.l{i}.bwd.w"] = bwd.w
            out[f"encoder.l{i}.bwd.b"] = bwd.b
        return out


def init_encoder_params(
    src_vocab_size: int,
    tgt_vocab_size: int,
    d_emb: int,
    d_hid: int,
    n_layers: int,
    rng: np.random.Generator,
    scale: float = 0.08,
) -> EncoderParams:
    embed_src = Tensor(rng.uniform(-scale, scale, size=(src_vocab_size, d_emb)), requires_grad=True)
    embed_tgt = Tensor(rng.uniform(-scale, scale, size=(tgt_vocab_size, d_emb)), requires_grad=True)
    layers = []
    for layer in range(n_layers):
        in_dim = d_emb if layer == 0 else 2 * d_hid
        fwd = init_lstm_cell(in_dim, d_hid, rng, scale)
        bwd = init_lstm_cell(in_dim, d_hid, rng, scale)
        layers.append((fwd, bwd))
    return EncoderParams(embed_src=embed_src, embed_tgt=embed_tgt, layers=layers)


@dataclass
class AnnotationMatrix:
    """Per-token contextual vectors (B, T, 2*d_hid) with their pad mask."""

    ann: Tensor
    mask: np.ndarray  # (B, T) bool, true at real tokens

    @property
    def width(self) -> int:
        return self.ann.shape[-1]


def encode(params: EncoderParams, ids: np.ndarray, mask: np.ndarray, side: str) -> AnnotationMatrix:
    """Run the stacked bidirectional LSTM over a padded id matrix.

    `side` selects the embedding table ("source" or "target"); the LSTM
    weights are the same physical tensors either way.
    """
    if side == "source":
        table = params.embed_src
    elif side == "target":
        table = params.embed_tgt
    else:
        raise ValueError(f"side must be 'source' or 'target', got '{side}'")
    batch, steps = ids.shape
    dtype = table.dtype
    d_hid = params.layers[0][0].hidden
    step_masks = [Tensor(mask[:, t : t + 1].astype(dtype)) for t in range(steps)]

    # per-step inputs for layer 0 come straight from the embedding table
    inputs: list[Tensor] = [nm.embedding(table, ids[:, t]) for t in range(steps)]
    for fwd_cell, bwd_cell in params.layers:
        h = Tensor(np.zeros((batch, d_hid), dtype=dtype))
        c = Tensor(np.zeros((batch, d_hid), dtype=dtype))
        fwd_out: list[Tensor] = []
        for t in range(steps):
            h, c = masked_lstm_step(fwd_cell, inputs[t], h, c, step_masks[t])
            fwd_out.append(h)
        h = Tensor(np.zeros((batch, d_hid), dtype=dtype))
        c = Tensor(np.zeros((batch, d_hid), dtype=dtype))
        bwd_out: list[Tensor] = [None] * steps
        for t in reversed(range(steps)):
            h, c = masked_lstm_step(bwd_cell, inputs[t], h, c, step_masks[t])
            bwd_out[t] = h
        inputs = [nm.concat([fwd_out[t], bwd_out[t]], axis=1) for t in range(steps)]

    ann = nm.stack(inputs, axis=1)  # (B, T, 2*d_hid)
    return AnnotationMatrix(ann=ann, mask=mask)


def masked_mean_pool(ann: AnnotationMatrix) -> Tensor:
    """Mean of annotation rows over real (non-PAD) positions only."""
    counts = ann.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("masked_mean_pool: a sentence has no unmasked positions")
    dtype = ann.ann.dtype
    weights = Tensor(ann.mask.astype(dtype)[:, :, None])
    summed = nm.tensor_sum(ann.ann * weights, axis=1)  # (B, 2*d_hid)
    inv = Tensor((1.0 / counts).astype(dtype)[:, None])
    return summed * inv
