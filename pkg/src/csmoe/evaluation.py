"""Retrieval scoring, probe metrics, and parameter/FLOP/capacity accounting.

FLOP convention (documented in every profile): 2 ops per multiply-accumulate
with bias adds counted once per output element, 5 ops per softmax or
layer-norm element, 10 per GELU element, data movement free. Counts cover
one paired two-modality forward at the configured mask ratio. The analytic
walk below enumerates exactly the ops the real forward executes, so it can
be cross-checked against an instrumented run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .model import MODALITIES, CsmoeConfig, parameter_manifest
from .numerics import (
    elementwise_flops,
    gelu_flops,
    layer_norm_flops,
    matmul_flops,
    softmax_flops,
)

FLOP_CONVENTION = (
    "2 ops per multiply-accumulate (bias adds 1/element), softmax and "
    "layer-norm 5/element, GELU 10/element, data movement free; one paired "
    "two-modality forward at the configured mask ratio"
)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def retrieve(query_emb: np.ndarray, gallery_emb: np.ndarray, k: int,
             query_ids=None, gallery_ids=None):
    """Cosine-ranked gallery indices per query, best first.

    Ties break toward the lower gallery index; a gallery item sharing a
    query's id is never returned for that query.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"embedding widths differ: {q.shape} vs {g.shape}")
    if g.shape[0] == 0:
        raise DimensionError("gallery is empty")
    if k < 1:
        raise ParameterError(f"retrieval depth must be >= 1, got {k}")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-300)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    sims = qn @ gn.T
    results = []
    for i in range(q.shape[0]):
        order = np.argsort(-sims[i], kind="stable")
        if query_ids is not None and gallery_ids is not None:
            order = np.array([j for j in order if gallery_ids[j] != query_ids[i]], dtype=np.int64)
        results.append(order[:k].tolist())
    return results


def pairwise_label_f1(a, b) -> float:
    """2|A n B| / (|A| + |B|) over two label sets."""
    a, b = set(a), set(b)
    if not a or not b:
        raise ParameterError("label sets must be non-empty")
    return 2.0 * len(a & b) / (len(a) + len(b))


def retrieval_f1(query_labels, retrieved_labels, k: int) -> float:
    """Mean pairwise label F1 over the top-k retrieved items, in [0, 1]."""
    if k > len(retrieved_labels):
        raise ParameterError(f"k={k} exceeds {len(retrieved_labels)} retrieved items")
    scores = [pairwise_label_f1(query_labels, r) for r in retrieved_labels[:k]]
    return float(np.mean(scores))


def dataset_retrieval_f1(query_label_list, retrieved_label_lists, k: int) -> float:
    """Mean of per-query scores, reported in percent."""
    scores = [
        retrieval_f1(ql, rl, k) for ql, rl in zip(query_label_list, retrieved_label_lists)
    ]
    return 100.0 * float(np.mean(scores))


# ---------------------------------------------------------------------------
# Probe metrics
# ---------------------------------------------------------------------------


def train_linear_probe(embeddings: np.ndarray, truths, task: str, num_classes: int,
                       epochs: int = 50, lr: float = 1e-3, seed: int = 0) -> np.ndarray:
    """Fit one linear layer on frozen embeddings and return its scores.

    Full-batch AdamW with a logistic loss per class (multilabel) or a
    softmax cross-entropy (multiclass); the backbone never moves.
    """
    from .numerics import Tensor, backward, matmul, mul, parameter, softmax, texp, tlog, tmean, tsum
    from .trainer import AdamW

    emb = np.asarray(embeddings, dtype=np.float64)
    n, d = emb.shape
    if task == "multilabel":
        target = np.zeros((n, num_classes))
        for i, labels in enumerate(truths):
            for lab in labels:
                target[i, lab] = 1.0
    elif task == "multiclass":
        target = np.eye(num_classes)[np.asarray(truths, dtype=np.int64)]
    else:
        raise ParameterError(f"task must be 'multilabel' or 'multiclass', got {task!r}")
    rng = np.random.default_rng(seed)
    weight = parameter(rng.normal(0.0, 0.01, (d, num_classes)))
    bias = parameter(np.zeros(num_classes))
    x = Tensor(emb)
    t = Tensor(target)
    opt = AdamW({"w": weight, "b": bias}, lr=lr, weight_decay=0.0)
    for _ in range(epochs):
        logits = matmul(x, weight) + bias
        if task == "multilabel":
            # per-class binary cross-entropy, probabilities clamped away from 0/1
            probs = Tensor(1.0) / (Tensor(1.0) + texp(-logits))
            eps = 1e-12
            loss = -tmean(mul(t, tlog(probs + eps)) + mul(Tensor(1.0) - t, tlog(Tensor(1.0) - probs + eps)))
        else:
            loss = -tmean(tsum(mul(tlog(softmax(logits, axis=1)), t), axis=1))
        opt.zero_grad()
        backward(loss)
        opt.step()
    return emb @ weight.data + bias.data


def _average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.cumsum(hits)[ranks - 1] / ranks
    return float(precisions.mean())


def probe_metrics(scores: np.ndarray, truths, task: str) -> float:
    """Macro metrics in percent: mean average precision for multilabel
    probing, average per-class accuracy (macro recall) for multiclass.

    Classes with no positives are excluded from the macro mean with a
    warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise DimensionError(f"expected [N, C>=2] scores, got shape {scores.shape}")
    n, c = scores.shape
    if task == "multilabel":
        mask = np.zeros((n, c), dtype=bool)
        for i, labels in enumerate(truths):
            for lab in labels:
                mask[i, lab] = True
        values = []
        for j in range(c):
            if not mask[:, j].any():
                warnings.warn(f"class {j} has no positives; excluded from mAP")
                continue
            values.append(_average_precision(scores[:, j], mask[:, j]))
        return 100.0 * float(np.mean(values))
    if task == "multiclass":
        truth = np.asarray(truths, dtype=np.int64)
        pred = np.argmax(scores, axis=1)
        values = []
        for j in range(c):
            members = truth == j
            if not members.any():
                warnings.warn(f"class {j} has no members; excluded from AA")
                continue
            values.append(float((pred[members] == j).mean()))
        return 100.0 * float(np.mean(values))
    raise ParameterError(f"task must be 'multilabel' or 'multiclass', got {task!r}")


# ---------------------------------------------------------------------------
# Compute profile
# ---------------------------------------------------------------------------


@dataclass
class ComputeProfile:
    params: int
    flops: int
    c2c: float
    convention: str = FLOP_CONVENTION
    breakdown: list = field(default_factory=list)  # {"component", "params", "flops"}

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "c2c": self.c2c,
            "convention": self.convention,
            "breakdown": self.breakdown,
        }


def c2c_ratio(params: int, flops: int) -> float:
    """Capacity-to-compute: parameters in millions per forward gigaflop."""
    return (params / 1e6) / (flops / 1e9)


def _attention_flops(t: int, d: int, heads: int) -> int:
    f = 3 * matmul_flops(t, d, d) + 2 * elementwise_flops(t * d)  # k has no bias
    hd = d // heads
    f += heads * (
        matmul_flops(t, hd, t)
        + elementwise_flops(t * t)  # scale
        + softmax_flops(t * t)
        + matmul_flops(t, t, hd)
    )
    f += matmul_flops(t, d, d) + elementwise_flops(t * d)
    return f


def _moe_layer_flops(t: int, d: int, num_slots: int, hidden: int) -> int:
    f = matmul_flops(num_slots, d, t)  # slot/token logits
    f += 2 * softmax_flops(num_slots * t)  # dispatch + combine
    f += matmul_flops(num_slots, t, d)  # slots
    f += num_slots * (
        matmul_flops(1, d, hidden) + elementwise_flops(hidden)
        + gelu_flops(hidden)
        + matmul_flops(1, hidden, d) + elementwise_flops(d)
    )
    f += matmul_flops(t, num_slots, d)  # combine mix
    return f


def _moe_block_flops(t: int, cfg: CsmoeConfig) -> int:
    d = cfg.enc_dim
    return (
        layer_norm_flops(t * d)
        + _attention_flops(t, d, cfg.heads)
        + elementwise_flops(t * d)  # residual
        + layer_norm_flops(t * d)
        + _moe_layer_flops(t, d, cfg.num_slots, cfg.expert_hidden)
        + elementwise_flops(t * d)  # residual
    )


def _plain_block_flops(t: int, cfg: CsmoeConfig) -> int:
    d, h = cfg.dec_dim, cfg.dec_hidden
    return (
        layer_norm_flops(t * d)
        + _attention_flops(t, d, cfg.dec_heads)
        + elementwise_flops(t * d)
        + layer_norm_flops(t * d)
        + matmul_flops(t, d, h) + elementwise_flops(t * h)
        + gelu_flops(t * h)
        + matmul_flops(t, h, d) + elementwise_flops(t * d)
        + elementwise_flops(t * d)
    )


def forward_flops(cfg: CsmoeConfig):
    """Analytic op count of one paired forward; returns (total, per-component)."""
    p = cfg.num_patches
    masked = int(math.floor(cfg.mask_ratio * p + 0.5))
    t = (p - masked) + 1  # unmasked tokens + CLS
    comp = {}
    for m in MODALITIES:
        comp[f"embed_{m}"] = matmul_flops(p, cfg.token_dim(m), cfg.enc_dim) + elementwise_flops(p * cfg.enc_dim)
        comp[f"enc_{m}"] = cfg.enc_layers_modality * _moe_block_flops(t, cfg)
    comp["enc_shared"] = 2 * cfg.enc_layers_shared * _moe_block_flops(t, cfg)  # both paths
    comp["proj"] = 2 * (matmul_flops(1, cfg.enc_dim, cfg.proj_dim) + elementwise_flops(cfg.proj_dim))
    for target in MODALITIES:
        dec = 0
        for _source in MODALITIES:
            dec += matmul_flops(t, cfg.enc_dim, cfg.dec_dim) + elementwise_flops(t * cfg.dec_dim)
            dec += elementwise_flops(p * cfg.dec_dim)  # decoder positions
            dec += cfg.dec_layers * _plain_block_flops(p, cfg)
            dec += matmul_flops(p, cfg.dec_dim, cfg.token_dim(target)) + elementwise_flops(p * cfg.token_dim(target))
        comp[f"dec_{target}"] = dec
    return sum(comp.values()), comp


def profile(cfg: CsmoeConfig) -> ComputeProfile:
    """Exact parameter enumeration plus the analytic forward op count."""
    param_groups = {}
    for name, shape, _ in parameter_manifest(cfg):
        group = name.split(".")[0]
        param_groups[group] = param_groups.get(group, 0) + int(np.prod(shape))
    total_params = sum(param_groups.values())
    total_flops, flop_groups = forward_flops(cfg)
    components = sorted(set(param_groups) | set(flop_groups))
    breakdown = [
        {
            "component": name,
            "params": param_groups.get(name, 0),
            "flops": flop_groups.get(name, 0),
        }
        for name in components
    ]
    return ComputeProfile(
        params=total_params,
        flops=total_flops,
        c2c=c2c_ratio(total_params, total_flops),
        breakdown=breakdown,
    )
