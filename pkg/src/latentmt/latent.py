"""Gaussian inference networks, co-attention, closed-form KL, sampling.

The prior network sees only the source annotations (mean-pooled); the
posterior sees source and target. Two posterior variants exist: the
co-attention one, which pools pairwise-attention context vectors alongside
the plain mean-pools, and a mean-pool-only baseline. Both distributions are
diagonal Gaussians parametrized as mean and log-variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoder import AnnotationMatrix, masked_mean_pool
from .numerics import Tensor

LOG_VAR_CLAMP = 8.0
NEG_INF_SCORE = -1e9


@dataclass
class GaussianParams:
    """Mean and diagonal log-variance of a latent Gaussian, (..., d_z)."""

    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class GaussianNetParams:
    """Pooled-vector -> tanh projection -> (mean, log-variance) heads.

    Serves both the prior (source pool input) and the posteriors (wider
    concatenated inputs); only the input width differs.
    """

    proj_w: Tensor
    proj_b: Tensor
    mean_w: Tensor
    mean_b: Tensor
    logvar_w: Tensor
    logvar_b: Tensor

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.proj_w": self.proj_w,
            f"{prefix}.proj_b": self.proj_b,
            f"{prefix}.mean_w": self.mean_w,
            f"{prefix}.mean_b": self.mean_b,
            f"{prefix}.logvar_w": self.logvar_w,
            f"{prefix}.logvar_b": self.logvar_b,
        }


def init_gaussian_net(
    in_dim: int, d_pre: int, d_z: int, rng: np.random.Generator, scale: float = 0.08
) -> GaussianNetParams:
    u = rng.uniform
    return GaussianNetParams(
        proj_w=Tensor(u(-scale, scale, size=(in_dim, d_pre)), requires_grad=True),
        proj_b=Tensor(u(-scale, scale, size=(d_pre,)), requires_grad=True),
        mean_w=Tensor(u(-scale, scale, size=(d_pre, d_z)), requires_grad=True),
        mean_b=Tensor(u(-scale, scale, size=(d_z,)), requires_grad=True),
        logvar_w=Tensor(u(-scale, scale, size=(d_pre, d_z)), requires_grad=True),
        logvar_b=Tensor(u(-scale, scale, size=(d_z,)), requires_grad=True),
    )


def apply_gaussian_net(net: GaussianNetParams, pooled: Tensor) -> GaussianParams:
    hidden = nm.tanh(nm.matmul(pooled, net.proj_w) + net.proj_b)
    mean = nm.matmul(hidden, net.mean_w) + net.mean_b
    log_var = nm.clamp(nm.matmul(hidden, net.logvar_w) + net.logvar_b, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    return GaussianParams(mean=mean, log_var=log_var)


def prior_params(net: GaussianNetParams, src_ann: AnnotationMatrix) -> GaussianParams:
    """Latent prior from the mean-pooled source annotations."""
    return apply_gaussian_net(net, masked_mean_pool(src_ann))


@dataclass
class CoattentionResult:
    """Cross-direction contexts plus the attention weights behind them."""

    ctx_src: Tensor        # (B, Ty, 2h) source context per target position
    ctx_tgt: Tensor        # (B, Tx, 2h) target context per source position
    weights_src: Tensor    # (B, Ty, Tx) rows sum to 1 over real source positions
    weights_tgt: Tensor    # (B, Tx, Ty)


def _additive_pad_mask(mask: np.ndarray, dtype) -> Tensor:
    # (B, 1, T): 0 at real tokens, a large negative number at PAD
    bias = np.where(mask, 0.0, NEG_INF_SCORE).astype(dtype)
    return Tensor(bias[:, None, :])


def coattention(src_ann: AnnotationMatrix, tgt_ann: AnnotationMatrix) -> CoattentionResult:
    """Pairwise dot attention between source and target annotations.

    Scores are raw dot products of annotation rows; each direction's
    weights are a softmax over the other sentence's real positions, and
    contexts are the corresponding convex combinations of annotations.
    """
    if src_ann.width != tgt_ann.width:
        raise nm.ShapeError(
            f"coattention: annotation widths differ, {src_ann.width} vs {tgt_ann.width}"
        )
    dtype = src_ann.ann.dtype
    scores_src = nm.matmul(tgt_ann.ann, nm.transpose(src_ann.ann))  # (B, Ty, Tx)
    weights_src = nm.softmax(scores_src + _additive_pad_mask(src_ann.mask, dtype))
    ctx_src = nm.matmul(weights_src, src_ann.ann)  # (B, Ty, 2h)

    scores_tgt = nm.matmul(src_ann.ann, nm.transpose(tgt_ann.ann))  # (B, Tx, Ty)
    weights_tgt = nm.softmax(scores_tgt + _additive_pad_mask(tgt_ann.mask, dtype))
    ctx_tgt = nm.matmul(weights_tgt, tgt_ann.ann)  # (B, Tx, 2h)
    return CoattentionResult(ctx_src, ctx_tgt, weights_src, weights_tgt)


def _masked_mean_rows(rows: Tensor, mask: np.ndarray) -> Tensor:
    pooled = AnnotationMatrix(ann=rows, mask=mask)
    return masked_mean_pool(pooled)


def posterior_params(
    net: GaussianNetParams, src_ann: AnnotationMatrix, tgt_ann: AnnotationMatrix
) -> GaussianParams:
    """Co-attention posterior: pooled contexts and pooled annotations, concatenated.

    Each pooled quantity is averaged over its own sequence's real length:
    the source context rows live on target positions and vice versa.
    """
    co = coattention(src_ann, tgt_ann)
    ctx_src_pool = _masked_mean_rows(co.ctx_src, tgt_ann.mask)
    ctx_tgt_pool = _masked_mean_rows(co.ctx_tgt, src_ann.mask)
    src_pool = masked_mean_pool(src_ann)
    tgt_pool = masked_mean_pool(tgt_ann)
    pooled = nm.concat([ctx_src_pool, src_pool, ctx_tgt_pool, tgt_pool], axis=1)
    return apply_gaussian_net(net, pooled)


def posterior_params_meanpool(
    net: GaussianNetParams, src_ann: AnnotationMatrix, tgt_ann: AnnotationMatrix
) -> GaussianParams:
    """Baseline posterior from the two mean-pooled annotation vectors only."""
    pooled = nm.concat([masked_mean_pool(src_ann), masked_mean_pool(tgt_ann)], axis=1)
    return apply_gaussian_net(net, pooled)


def kl_diag_gauss(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the latent dimension.

    Returns one value per leading position (a scalar for single vectors,
    a length-B tensor for batches). Always >= 0 up to rounding.
    """
    if q.mean.shape != p.mean.shape or q.log_var.shape != p.log_var.shape:
        raise nm.ShapeError(
            f"kl_diag_gauss: dimension mismatch, q {q.mean.shape} vs p {p.mean.shape}"
        )
    # variance ratio via exp(lq - lp) so KL(p, p) is exactly zero
    log_ratio = q.log_var - p.log_var
    diff = q.mean - p.mean
    terms = nm.exp(log_ratio) - log_ratio + diff * diff * nm.exp(-p.log_var) - 1.0
    return 0.5 * nm.tensor_sum(terms, axis=-1)


def reparam_sample(g: GaussianParams, eps: np.ndarray) -> Tensor:
    """z = mean + exp(log_var / 2) * eps, differentiable w.r.t. g."""
    eps = np.asarray(eps, dtype=g.mean.dtype)
    if eps.shape != g.mean.shape:
        raise nm.ShapeError(f"reparam_sample: eps {eps.shape} vs mean {g.mean.shape}")
    std = nm.exp(g.log_var * 0.5)
    return g.mean + std * Tensor(eps)
