"""The five training objectives and their weighted total.

Reconstruction terms are mean squared error over masked token rows only,
with the source mask governing cross-modal terms. The contrastive term is
a temperature-scaled cross-entropy over cosine similarities whose
denominator excludes the positive pair (an opt-in flag restores the more
common variant that includes it). The two routing regularizers are a slot
repulsion term over normalized slot embeddings and an entropy term over
dispatch weights, both implemented exactly as stated, with signed weights
left to configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NormalizationError, ParameterError
from .model import MODALITIES, CsmoeModel, ForwardArtifacts
from .numerics import (
    Tensor,
    concat_rows,
    l2_normalize_rows,
    matmul,
    mul,
    take_rows,
    texp,
    tlog,
    tmean,
    transpose,
    tsum,
    xlog_shifted,
)

DEFAULT_LAMBDA_REP = 0.01
DEFAULT_GAMMA_ENT = 0.01
DEFAULT_TAU_MI = 0.5
DEFAULT_EPS_ENT = 1e-8


@dataclass
class LossBreakdown:
    umr: float
    cmr: float
    mi: float
    rep: float
    ent: float
    total: float
    lambda_rep: float
    gamma_ent: float
    tau_mi: float
    eps_ent: float
    total_tensor: Tensor = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "umr": self.umr, "cmr": self.cmr, "mi": self.mi,
            "rep": self.rep, "ent": self.ent, "total": self.total,
        }


def rec_loss(pred: Tensor, target, mask_indices) -> Tensor:
    """MSE over masked rows only: mean over |mask| * row_width elements."""
    idx = np.asarray(mask_indices, dtype=np.int64)
    if idx.size == 0:
        raise ParameterError("reconstruction loss is undefined for an empty mask")
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    diff = take_rows(pred, idx) - Tensor(target_arr[idx])
    return tmean(mul(diff, diff))


def normalize_pixel_targets(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Optional per-token target normalization (zero mean, unit variance)."""
    mu = tokens.mean(axis=1, keepdims=True)
    var = tokens.var(axis=1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)


def _targets(art: ForwardArtifacts, modality: str, norm_pix: bool) -> np.ndarray:
    t = art.target_tokens[modality]
    return normalize_pixel_targets(t) if norm_pix else t


def loss_umr(art: ForwardArtifacts, norm_pix: bool = False) -> Tensor:
    """Same-modality reconstruction, each under its own mask."""
    return (
        rec_loss(art.recon[("x", "x")], _targets(art, "x", norm_pix), art.masks["x"].masked)
        + rec_loss(art.recon[("y", "y")], _targets(art, "y", norm_pix), art.masks["y"].masked)
    )


def loss_cmr(art: ForwardArtifacts, norm_pix: bool = False) -> Tensor:
    """Cross-modal reconstruction, each under the source modality's mask."""
    return (
        rec_loss(art.recon[("y", "x")], _targets(art, "y", norm_pix), art.masks["x"].masked)
        + rec_loss(art.recon[("x", "y")], _targets(art, "x", norm_pix), art.masks["y"].masked)
    )


def loss_mi(proj_x: Tensor, proj_y: Tensor, temperature: float,
            include_positive: bool = False) -> Tensor:
    """Symmetric temperature-scaled cross-entropy over cosine similarities.

    The denominator sums exp(sim/t) over the batch excluding the positive
    pair itself; ``include_positive`` switches to the variant that keeps it.
    """
    if temperature <= 0:
        raise ParameterError(f"contrastive temperature must be > 0, got {temperature}")
    if proj_x.shape != proj_y.shape or proj_x.ndim != 2:
        raise ParameterError(
            f"projection batches must share a [B, d] shape, got {proj_x.shape} and {proj_y.shape}"
        )
    batch = proj_x.shape[0]
    if batch < 2:
        raise ParameterError(f"contrastive loss needs a batch of >= 2 pairs, got {batch}")
    xn = l2_normalize_rows(proj_x)
    yn = l2_normalize_rows(proj_y)
    sims = matmul(xn, transpose(yn))  # [B, B]; (i, q) = sim(x_i, y_q)
    e = texp(sims / temperature)
    eye = Tensor(np.eye(batch))
    denom_mask = Tensor(np.ones((batch, batch))) if include_positive else Tensor(1.0 - np.eye(batch))
    pos = tsum(mul(e, eye), axis=1)  # exp(sim(x_i, y_i)/t)
    xy = tlog(tsum(mul(e, denom_mask), axis=1)) - tlog(pos)  # -log(pos/denominator)
    yx = tlog(tsum(mul(e, denom_mask), axis=0)) - tlog(pos)
    return (tsum(xy) + tsum(yx)) / (2.0 * batch)


def loss_rep(slot_embeddings: Tensor) -> Tensor:
    """-(1/S^2) sum of squared inner products of the unit-normalized slots."""
    norms = np.linalg.norm(slot_embeddings.data, axis=1)
    if (norms == 0.0).any():
        raise NormalizationError("slot embedding row with zero norm")
    num_slots = slot_embeddings.shape[0]
    sn = l2_normalize_rows(slot_embeddings)
    gram = matmul(sn, transpose(sn))
    return tsum(mul(gram, gram)) * (-1.0 / (num_slots * num_slots))


def loss_ent(dispatch: Tensor, eps: float = DEFAULT_EPS_ENT) -> Tensor:
    """-(1/(S*P)) sum over dispatch entries of a * log(a + eps)."""
    if eps < 0:
        raise ParameterError(f"entropy stabilizer must be >= 0, got {eps}")
    if (dispatch.data < 0).any():
        raise ParameterError("dispatch weights must be nonnegative")
    num_slots, num_tokens = dispatch.shape
    return tsum(xlog_shifted(dispatch, eps)) * (-1.0 / (num_slots * num_tokens))


def _batch_mean(terms) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def loss_total(
    model: CsmoeModel,
    artifacts,
    lambda_rep: float = DEFAULT_LAMBDA_REP,
    gamma_ent: float = DEFAULT_GAMMA_ENT,
    tau_mi: float = DEFAULT_TAU_MI,
    eps_ent: float = DEFAULT_EPS_ENT,
    mi_include_positive: bool = False,
    norm_pix: bool = False,
) -> LossBreakdown:
    """Combine all five terms over a batch of forward artifacts.

    Reconstruction terms average over the batch; the contrastive term uses
    the whole batch at once; slot repulsion averages over every MoE layer
    of the model; the entropy term averages over every dispatch table of
    every artifact.
    """
    arts = list(artifacts)
    if not arts:
        raise ParameterError("loss_total needs at least one forward artifact")
    umr = _batch_mean([loss_umr(a, norm_pix) for a in arts])
    cmr = _batch_mean([loss_cmr(a, norm_pix) for a in arts])
    proj_x = concat_rows([a.proj_cls["x"] for a in arts])
    proj_y = concat_rows([a.proj_cls["y"] for a in arts])
    mi = loss_mi(proj_x, proj_y, tau_mi, mi_include_positive)
    rep = _batch_mean([loss_rep(layer.slot_embeddings) for layer in model.moe_layers()])
    ent = _batch_mean([
        loss_ent(r.dispatch, eps_ent)
        for a in arts for m in MODALITIES for r in a.routing[m]
    ])
    total = umr + cmr + mi + lambda_rep * rep + gamma_ent * ent
    return LossBreakdown(
        umr=umr.item(), cmr=cmr.item(), mi=mi.item(), rep=rep.item(), ent=ent.item(),
        total=total.item(),
        lambda_rep=lambda_rep, gamma_ent=gamma_ent, tau_mi=tau_mi, eps_ent=eps_ent,
        total_tensor=total,
    )
