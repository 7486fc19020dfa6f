"""Soft mixture-of-experts routing and the transformer blocks built on it.

The routing stage turns slot/token similarities into two softmax weight
tables: dispatch weights (a distribution over tokens per slot, temperature
scaled) that form each slot as a weighted token average, and combine
weights (a distribution over slots per token, temperature 1) that mix the
expert outputs back into token space. Each slot is processed by exactly
one expert, so a layer performs ``num_slots`` expert calls no matter how
many tokens arrive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import (
    Tensor,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    parameter,
    slice_cols,
    softmax,
    take_rows,
    transpose,
    truncated_normal,
)

LN_EPS = 1e-6


@dataclass
class ExpertParams:
    """One two-layer feed-forward expert."""

    w1: Tensor  # [dim, hidden]
    b1: Tensor  # [hidden]
    w2: Tensor  # [hidden, dim]
    b2: Tensor  # [dim]


@dataclass
class SoftMoELayerParams:
    slot_embeddings: Tensor  # [num_slots, dim]
    experts: list  # of ExpertParams
    temperature: float = 1.0
    slot_to_expert: list = None  # slot index -> expert index
    activation: str = "gelu"  # "linear" is a test mode
    expert_calls: int = 0  # instrumentation, not a parameter

    def __post_init__(self):
        num_slots = self.slot_embeddings.shape[0]
        if self.slot_to_expert is None:
            if num_slots != len(self.experts):
                raise DimensionError(
                    f"{num_slots} slots need an explicit map onto {len(self.experts)} experts"
                )
            self.slot_to_expert = list(range(num_slots))
        if len(self.slot_to_expert) != num_slots:
            raise DimensionError("slot_to_expert must assign every slot")
        if any(not 0 <= e < len(self.experts) for e in self.slot_to_expert):
            raise DimensionError("slot_to_expert references a missing expert")

    @property
    def num_slots(self) -> int:
        return self.slot_embeddings.shape[0]


@dataclass
class RoutingTensors:
    """Dispatch/combine weight tables and the slots they produce."""

    dispatch: Tensor  # [num_slots, num_tokens], rows sum to 1
    combine: Tensor  # [num_slots, num_tokens], columns sum to 1
    slots: Tensor  # [num_slots, dim]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    # no key bias: softmax over keys is invariant to per-query constant
    # shifts, so a key bias cannot affect the output
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int


@dataclass
class MoeBlockParams:
    """Pre-norm residual block: self-attention then Soft MoE."""

    attention: AttentionParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    moe: SoftMoELayerParams


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class PlainBlockParams:
    """Pre-norm residual block: self-attention then a dense feed-forward."""

    attention: AttentionParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    ffn: FeedForwardParams


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def route(z: Tensor, params: SoftMoELayerParams) -> RoutingTensors:
    """Slot/token similarity logits -> dispatch and combine weights, then the
    slots as dispatch-weighted token averages."""
    if z.shape[1] != params.slot_embeddings.shape[1]:
        raise DimensionError(
            f"token width {z.shape[1]} does not match slot width "
            f"{params.slot_embeddings.shape[1]}"
        )
    logits = matmul(params.slot_embeddings, transpose(z))  # [S, P]
    dispatch = softmax(logits, axis=1, temperature=params.temperature)
    combine = softmax(logits, axis=0)
    slots = matmul(dispatch, z)
    return RoutingTensors(dispatch=dispatch, combine=combine, slots=slots)


def _apply_expert(slot_row: Tensor, expert: ExpertParams, activation: str) -> Tensor:
    h = matmul(slot_row, expert.w1) + expert.b1
    if activation == "gelu":
        h = gelu(h)
    return matmul(h, expert.w2) + expert.b2


def moe_forward(z: Tensor, params: SoftMoELayerParams, routing_sink: list = None) -> Tensor:
    """One Soft MoE layer: route, run each slot through its expert, combine.

    Exactly ``num_slots`` expert invocations happen regardless of the token
    count; ``params.expert_calls`` counts them.
    """
    routing = route(z, params)
    if routing_sink is not None:
        routing_sink.append(routing)
    outs = []
    for slot_idx in range(params.num_slots):
        expert = params.experts[params.slot_to_expert[slot_idx]]
        slot_row = take_rows(routing.slots, [slot_idx])
        outs.append(_apply_expert(slot_row, expert, params.activation))
        params.expert_calls += 1
    expert_out = concat_rows(outs)  # [S, dim]
    return matmul(transpose(routing.combine), expert_out)  # [P, dim]


def attention_forward(z: Tensor, params: AttentionParams) -> Tensor:
    """Standard multi-head scaled dot-product self-attention over all tokens."""
    dim = z.shape[1]
    if dim % params.heads:
        raise DimensionError(f"width {dim} not divisible by {params.heads} heads")
    head_dim = dim // params.heads
    q = matmul(z, params.wq) + params.bq
    k = matmul(z, params.wk)
    v = matmul(z, params.wv) + params.bv
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for h in range(params.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        scores = mul(matmul(qh, transpose(kh)), scale)
        weights = softmax(scores, axis=1)
        heads.append(matmul(weights, vh))
    merged = concat_cols(heads)
    return matmul(merged, params.wo) + params.bo


def block_forward(z: Tensor, params: MoeBlockParams, routing_sink: list = None) -> Tensor:
    """z + Attn(LN(z)), then + MoE(LN(.))."""
    attn = attention_forward(layer_norm(z, params.norm1.gain, params.norm1.bias, LN_EPS), params.attention)
    z = z + attn
    moe = moe_forward(layer_norm(z, params.norm2.gain, params.norm2.bias, LN_EPS), params.moe, routing_sink)
    return z + moe


def plain_block_forward(z: Tensor, params: PlainBlockParams) -> Tensor:
    """z + Attn(LN(z)), then + FFN(LN(.)); no expert machinery."""
    attn = attention_forward(layer_norm(z, params.norm1.gain, params.norm1.bias, LN_EPS), params.attention)
    z = z + attn
    h = layer_norm(z, params.norm2.gain, params.norm2.bias, LN_EPS)
    h = gelu(matmul(h, params.ffn.w1) + params.ffn.b1)
    h = matmul(h, params.ffn.w2) + params.ffn.b2
    return z + h


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

INIT_STD = 0.02


def init_attention(rng, dim: int, heads: int) -> AttentionParams:
    def w():
        return parameter(truncated_normal(rng, (dim, dim), INIT_STD))

    def b():
        return parameter(np.zeros(dim))

    return AttentionParams(wq=w(), bq=b(), wk=w(), wv=w(), bv=b(), wo=w(), bo=b(), heads=heads)


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(gain=parameter(np.ones(dim)), bias=parameter(np.zeros(dim)))


def init_expert(rng, dim: int, hidden: int) -> ExpertParams:
    return ExpertParams(
        w1=parameter(truncated_normal(rng, (dim, hidden), INIT_STD)),
        b1=parameter(np.zeros(hidden)),
        w2=parameter(truncated_normal(rng, (hidden, dim), INIT_STD)),
        b2=parameter(np.zeros(dim)),
    )


def init_soft_moe_layer(
    rng,
    dim: int,
    hidden: int,
    num_slots: int,
    num_experts: int = None,
    temperature: float = 1.0,
) -> SoftMoELayerParams:
    if num_experts is None:
        num_experts = num_slots
    slot_map = None if num_slots == num_experts else [s % num_experts for s in range(num_slots)]
    return SoftMoELayerParams(
        slot_embeddings=parameter(truncated_normal(rng, (num_slots, dim), INIT_STD)),
        experts=[init_expert(rng, dim, hidden) for _ in range(num_experts)],
        temperature=temperature,
        slot_to_expert=slot_map,
    )


def init_moe_block(rng, dim, heads, hidden, num_slots, num_experts=None, temperature=1.0) -> MoeBlockParams:
    return MoeBlockParams(
        attention=init_attention(rng, dim, heads),
        norm1=init_layer_norm(dim),
        norm2=init_layer_norm(dim),
        moe=init_soft_moe_layer(rng, dim, hidden, num_slots, num_experts, temperature),
    )


def init_plain_block(rng, dim, heads, hidden) -> PlainBlockParams:
    return PlainBlockParams(
        attention=init_attention(rng, dim, heads),
        norm1=init_layer_norm(dim),
        norm2=init_layer_norm(dim),
        ffn=FeedForwardParams(
            w1=parameter(truncated_normal(rng, (dim, hidden), INIT_STD)),
            b1=parameter(np.zeros(hidden)),
            w2=parameter(truncated_normal(rng, (hidden, dim), INIT_STD)),
            b2=parameter(np.zeros(dim)),
        ),
    )
