"""The full two-modality masked-autoencoder stack with Soft MoE encoders.

Wiring per forward pass: each modality's image is patchified, patch-embedded
and masked with its own random mask, encoded by its modality-specific MoE
blocks and then by the cross-sensor MoE blocks (one shared parameter set
used by both paths). Plain transformer decoders rebuild all four
directions: each target modality is reconstructed both from its own
features and from the other modality's features, always under the source
features' mask. The encoded CLS rows are projected for the contrastive
objective.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, ParameterError
from .numerics import (
    Tensor,
    concat_rows,
    matmul,
    parameter,
    read_tnsr,
    scatter_rows,
    take_rows,
    truncated_normal,
    write_tnsr,
)
from .softmoe import (
    INIT_STD,
    AttentionParams,
    ExpertParams,
    FeedForwardParams,
    LayerNormParams,
    MoeBlockParams,
    PlainBlockParams,
    SoftMoELayerParams,
    block_forward,
    plain_block_forward,
)
from .tokenizer import MaskPair, patchify, positional_embedding, sample_masks

MODALITIES = ("x", "y")

# stream-splitting constant for the second modality's mask seed
MASK_STREAM_SPLIT = 0x9E3779B9

CHECKPOINT_FORMAT = "CSMOE-CKPT"
CHECKPOINT_VERSION = 1

EMBEDDING_STRATEGIES = ("avg_wo_cls", "avg_all", "only_cls", "norm_cls", "norm_proj_cls")


@dataclass
class CsmoeConfig:
    patch_size: int = 32
    image_side: int = 224
    channels_x: int = 2
    channels_y: int = 10
    enc_dim: int = 768
    dec_dim: int = 256
    enc_layers_modality: int = 4
    enc_layers_shared: int = 2
    dec_layers: int = 4
    num_slots: int = 8
    num_experts: int = 0  # 0 resolves to num_slots
    heads: int = 12
    dec_heads: int = 8
    expert_hidden: int = 0  # 0 resolves to enc_dim
    dec_hidden: int = 0  # 0 resolves to dec_dim
    route_temperature: float = 1.0
    mask_ratio: float = 0.5
    proj_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.num_experts == 0:
            self.num_experts = self.num_slots
        if self.expert_hidden == 0:
            self.expert_hidden = self.enc_dim
        if self.dec_hidden == 0:
            self.dec_hidden = self.dec_dim
        self.validate()

    def validate(self):
        checks = [
            (self.image_side % self.patch_size == 0,
             f"image side {self.image_side} not divisible by patch size {self.patch_size}"),
            (self.enc_dim % self.heads == 0,
             f"encoder dim {self.enc_dim} not divisible by {self.heads} heads"),
            (self.dec_dim % self.dec_heads == 0,
             f"decoder dim {self.dec_dim} not divisible by {self.dec_heads} heads"),
            (self.enc_dim % 4 == 0, "encoder dim must be divisible by 4"),
            (self.dec_dim % 4 == 0, "decoder dim must be divisible by 4"),
            (self.enc_layers_modality >= 1, "need at least one modality-specific encoder layer"),
            (self.enc_layers_shared >= 1, "need at least one cross-sensor encoder layer"),
            (self.dec_layers >= 1, "need at least one decoder layer"),
            (self.num_slots >= 1, "need at least one slot"),
            (self.num_experts >= 1, "need at least one expert"),
            (self.channels_x >= 1 and self.channels_y >= 1, "channel counts must be >= 1"),
            (0.0 < self.mask_ratio < 1.0, f"mask ratio {self.mask_ratio} outside (0, 1)"),
            (self.route_temperature > 0, "routing temperature must be > 0"),
            (self.proj_dim >= 1, "projection dim must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def grid(self):
        side = self.image_side // self.patch_size
        return (side, side)

    @property
    def num_patches(self) -> int:
        side = self.image_side // self.patch_size
        return side * side

    def channels(self, modality: str) -> int:
        return self.channels_x if modality == "x" else self.channels_y

    def token_dim(self, modality: str) -> int:
        return self.patch_size * self.patch_size * self.channels(modality)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CsmoeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class CsmoeModel:
    cfg: CsmoeConfig
    params: dict  # name -> Tensor, in manifest order
    embed: dict  # modality -> Tensor [token_dim, enc_dim]
    cls_token: dict  # modality -> Tensor [1, enc_dim]
    enc_modality: dict  # modality -> list of MoeBlockParams
    enc_shared: list  # shared cross-sensor MoeBlockParams
    dec_embed: dict  # modality -> (weight, bias) projecting enc_dim -> dec_dim
    mask_token: dict  # modality -> Tensor [1, dec_dim]
    decoder: dict  # modality -> list of PlainBlockParams
    heads: dict  # (target, source) -> (weight, bias)
    proj: tuple  # (weight, bias) for the contrastive projection
    enc_pos: np.ndarray = field(repr=False, default=None)
    dec_pos: np.ndarray = field(repr=False, default=None)

    def named_parameters(self) -> dict:
        return self.params

    def moe_layers(self):
        """Every Soft MoE layer in the model; the shared stack appears once."""
        for modality in MODALITIES:
            for blk in self.enc_modality[modality]:
                yield blk.moe
        for blk in self.enc_shared:
            yield blk.moe


@dataclass
class ForwardArtifacts:
    """Everything one paired forward pass produces that the losses consume."""

    encoded: dict  # modality -> Tensor [(U+1), enc_dim], CLS first
    recon: dict  # (target, source) -> Tensor [P, token_dim(target)]
    routing: dict  # modality -> list of RoutingTensors along that path
    proj_cls: dict  # modality -> Tensor [1, proj_dim]
    masks: dict  # modality -> MaskPair
    target_tokens: dict  # modality -> ndarray [P, token_dim], ground truth


# ---------------------------------------------------------------------------
# Parameter manifest and construction
# ---------------------------------------------------------------------------


def _attention_entries(prefix: str, dim: int):
    for nm in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{nm}", (dim, dim), "weight"
        if nm != "wk":  # key bias is a softmax-invariant no-op
            yield f"{prefix}.b{nm[1]}", (dim,), "zero"


def _norm_entries(prefix: str, dim: int):
    yield f"{prefix}.gain", (dim,), "one"
    yield f"{prefix}.bias", (dim,), "zero"


def _moe_block_entries(prefix: str, cfg: CsmoeConfig):
    yield from _attention_entries(f"{prefix}.attn", cfg.enc_dim)
    yield from _norm_entries(f"{prefix}.norm1", cfg.enc_dim)
    yield from _norm_entries(f"{prefix}.norm2", cfg.enc_dim)
    yield f"{prefix}.moe.slots", (cfg.num_slots, cfg.enc_dim), "weight"
    for e in range(cfg.num_experts):
        yield f"{prefix}.moe.expert{e}.w1", (cfg.enc_dim, cfg.expert_hidden), "weight"
        yield f"{prefix}.moe.expert{e}.b1", (cfg.expert_hidden,), "zero"
        yield f"{prefix}.moe.expert{e}.w2", (cfg.expert_hidden, cfg.enc_dim), "weight"
        yield f"{prefix}.moe.expert{e}.b2", (cfg.enc_dim,), "zero"


def _plain_block_entries(prefix: str, cfg: CsmoeConfig):
    yield from _attention_entries(f"{prefix}.attn", cfg.dec_dim)
    yield from _norm_entries(f"{prefix}.norm1", cfg.dec_dim)
    yield from _norm_entries(f"{prefix}.norm2", cfg.dec_dim)
    yield f"{prefix}.ffn.w1", (cfg.dec_dim, cfg.dec_hidden), "weight"
    yield f"{prefix}.ffn.b1", (cfg.dec_hidden,), "zero"
    yield f"{prefix}.ffn.w2", (cfg.dec_hidden, cfg.dec_dim), "weight"
    yield f"{prefix}.ffn.b2", (cfg.dec_dim,), "zero"


def parameter_manifest(cfg: CsmoeConfig):
    """Ordered (name, shape, init kind) for every trainable tensor.

    The order fixes both the RNG draw sequence at init time and the block
    layout of checkpoints.
    """
    entries = []
    for m in MODALITIES:
        entries.append((f"embed_{m}.weight", (cfg.token_dim(m), cfg.enc_dim), "weight"))
        entries.append((f"cls_{m}", (1, cfg.enc_dim), "zero"))
    for m in MODALITIES:
        for i in range(cfg.enc_layers_modality):
            entries.extend(_moe_block_entries(f"enc_{m}.{i}", cfg))
    for i in range(cfg.enc_layers_shared):
        entries.extend(_moe_block_entries(f"enc_shared.{i}", cfg))
    for m in MODALITIES:
        entries.append((f"dec_embed_{m}.weight", (cfg.enc_dim, cfg.dec_dim), "weight"))
        entries.append((f"dec_embed_{m}.bias", (cfg.dec_dim,), "zero"))
        entries.append((f"mask_token_{m}", (1, cfg.dec_dim), "zero"))
        for i in range(cfg.dec_layers):
            entries.extend(_plain_block_entries(f"dec_{m}.{i}", cfg))
    for target in MODALITIES:
        for source in MODALITIES:
            entries.append((f"head_{target}_from_{source}.weight",
                            (cfg.dec_dim, cfg.token_dim(target)), "weight"))
            entries.append((f"head_{target}_from_{source}.bias",
                            (cfg.token_dim(target),), "zero"))
    entries.append(("proj.weight", (cfg.enc_dim, cfg.proj_dim), "weight"))
    entries.append(("proj.bias", (cfg.proj_dim,), "zero"))
    return entries


def parameter_count(cfg: CsmoeConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_manifest(cfg))


def _build_attention(t, prefix: str, heads: int) -> AttentionParams:
    return AttentionParams(
        wq=t[f"{prefix}.wq"], bq=t[f"{prefix}.bq"],
        wk=t[f"{prefix}.wk"],
        wv=t[f"{prefix}.wv"], bv=t[f"{prefix}.bv"],
        wo=t[f"{prefix}.wo"], bo=t[f"{prefix}.bo"],
        heads=heads,
    )


def _build_norm(t, prefix: str) -> LayerNormParams:
    return LayerNormParams(gain=t[f"{prefix}.gain"], bias=t[f"{prefix}.bias"])


def _build_moe_block(t, prefix: str, cfg: CsmoeConfig) -> MoeBlockParams:
    experts = [
        ExpertParams(
            w1=t[f"{prefix}.moe.expert{e}.w1"], b1=t[f"{prefix}.moe.expert{e}.b1"],
            w2=t[f"{prefix}.moe.expert{e}.w2"], b2=t[f"{prefix}.moe.expert{e}.b2"],
        )
        for e in range(cfg.num_experts)
    ]
    slot_map = None
    if cfg.num_slots != cfg.num_experts:
        slot_map = [s % cfg.num_experts for s in range(cfg.num_slots)]
    return MoeBlockParams(
        attention=_build_attention(t, f"{prefix}.attn", cfg.heads),
        norm1=_build_norm(t, f"{prefix}.norm1"),
        norm2=_build_norm(t, f"{prefix}.norm2"),
        moe=SoftMoELayerParams(
            slot_embeddings=t[f"{prefix}.moe.slots"],
            experts=experts,
            temperature=cfg.route_temperature,
            slot_to_expert=slot_map,
        ),
    )


def _build_plain_block(t, prefix: str, cfg: CsmoeConfig) -> PlainBlockParams:
    return PlainBlockParams(
        attention=_build_attention(t, f"{prefix}.attn", cfg.dec_heads),
        norm1=_build_norm(t, f"{prefix}.norm1"),
        norm2=_build_norm(t, f"{prefix}.norm2"),
        ffn=FeedForwardParams(
            w1=t[f"{prefix}.ffn.w1"], b1=t[f"{prefix}.ffn.b1"],
            w2=t[f"{prefix}.ffn.w2"], b2=t[f"{prefix}.ffn.b2"],
        ),
    )


def _assemble(cfg: CsmoeConfig, tensors: dict) -> CsmoeModel:
    return CsmoeModel(
        cfg=cfg,
        params=tensors,
        embed={m: tensors[f"embed_{m}.weight"] for m in MODALITIES},
        cls_token={m: tensors[f"cls_{m}"] for m in MODALITIES},
        enc_modality={
            m: [_build_moe_block(tensors, f"enc_{m}.{i}", cfg) for i in range(cfg.enc_layers_modality)]
            for m in MODALITIES
        },
        enc_shared=[_build_moe_block(tensors, f"enc_shared.{i}", cfg) for i in range(cfg.enc_layers_shared)],
        dec_embed={
            m: (tensors[f"dec_embed_{m}.weight"], tensors[f"dec_embed_{m}.bias"]) for m in MODALITIES
        },
        mask_token={m: tensors[f"mask_token_{m}"] for m in MODALITIES},
        decoder={
            m: [_build_plain_block(tensors, f"dec_{m}.{i}", cfg) for i in range(cfg.dec_layers)]
            for m in MODALITIES
        },
        heads={
            (tgt, src): (tensors[f"head_{tgt}_from_{src}.weight"], tensors[f"head_{tgt}_from_{src}.bias"])
            for tgt in MODALITIES for src in MODALITIES
        },
        proj=(tensors["proj.weight"], tensors["proj.bias"]),
        enc_pos=positional_embedding(cfg.grid, cfg.enc_dim),
        dec_pos=positional_embedding(cfg.grid, cfg.dec_dim),
    )


def init_model(cfg: CsmoeConfig) -> CsmoeModel:
    """Deterministic init from cfg.seed: truncated-normal(0, 0.02) weights,
    zero biases/CLS/mask tokens, unit norm gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape, kind in parameter_manifest(cfg):
        if kind == "weight":
            arr = truncated_normal(rng, shape, INIT_STD)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = parameter(arr)
    return _assemble(cfg, tensors)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _check_modality(modality: str):
    if modality not in MODALITIES:
        raise ParameterError(f"modality must be one of {MODALITIES}, got {modality!r}")


def encode(model: CsmoeModel, image, mask: MaskPair, modality: str, routing_sink: list = None) -> Tensor:
    """Patch-embed, add positions, drop masked rows, prepend CLS, run the
    modality-specific MoE blocks then the shared cross-sensor blocks."""
    _check_modality(modality)
    cfg = model.cfg
    ps = patchify(image, cfg.patch_size)
    if ps.num_patches != cfg.num_patches or ps.tokens.shape[1] != cfg.token_dim(modality):
        raise DimensionError(
            f"image tokens {ps.tokens.shape} do not match modality {modality!r} "
            f"expecting [{cfg.num_patches}, {cfg.token_dim(modality)}]"
        )
    z = matmul(ps.tokens, model.embed[modality]) + Tensor(model.enc_pos)
    z = take_rows(z, mask.unmasked)
    z = concat_rows([model.cls_token[modality], z])
    for blk in model.enc_modality[modality]:
        z = block_forward(z, blk, routing_sink)
    for blk in model.enc_shared:
        z = block_forward(z, blk, routing_sink)
    return z


def decode(model: CsmoeModel, encoded_source: Tensor, source_mask: MaskPair,
           target: str, source: str) -> Tensor:
    """Reconstruct all P patches of ``target`` from the source features.

    The encoded sequence is projected to decoder width, its CLS row is
    dropped, unmasked rows are scattered back to their grid positions with
    the target's learned mask token filling the holes, and the target's
    plain-transformer decoder plus the direction-specific head emit pixels.
    """
    _check_modality(target)
    _check_modality(source)
    cfg = model.cfg
    expected = len(source_mask.unmasked) + 1
    if encoded_source.shape[0] != expected:
        raise DimensionError(
            f"encoded sequence has {encoded_source.shape[0]} rows, mask implies {expected}"
        )
    w, b = model.dec_embed[target]
    z = matmul(encoded_source, w) + b
    z = take_rows(z, np.arange(1, z.shape[0]))  # CLS is not decoded
    z = scatter_rows(z, source_mask.unmasked, model.mask_token[target], cfg.num_patches)
    z = z + Tensor(model.dec_pos)
    for blk in model.decoder[target]:
        z = plain_block_forward(z, blk)
    hw, hb = model.heads[(target, source)]
    return matmul(z, hw) + hb


def mask_seeds(seed: int, mask_seed_x: int = None, mask_seed_y: int = None):
    """Two independent mask streams from one seed (second stream XOR-split)."""
    sx = seed if mask_seed_x is None else mask_seed_x
    sy = (seed ^ MASK_STREAM_SPLIT) if mask_seed_y is None else mask_seed_y
    return sx, sy


def forward(model: CsmoeModel, image_x, image_y, seed: int,
            mask_seed_x: int = None, mask_seed_y: int = None) -> ForwardArtifacts:
    """Both encodes, all four reconstruction directions, projected CLS pair."""
    cfg = model.cfg
    sx, sy = mask_seeds(seed, mask_seed_x, mask_seed_y)
    masks = {
        "x": sample_masks(cfg.num_patches, cfg.mask_ratio, sx),
        "y": sample_masks(cfg.num_patches, cfg.mask_ratio, sy),
    }
    images = {"x": image_x, "y": image_y}
    routing = {m: [] for m in MODALITIES}
    encoded = {
        m: encode(model, images[m], masks[m], m, routing[m]) for m in MODALITIES
    }
    recon = {}
    for target in MODALITIES:
        for source in MODALITIES:
            recon[(target, source)] = decode(model, encoded[source], masks[source], target, source)
    pw, pb = model.proj
    proj_cls = {m: matmul(take_rows(encoded[m], [0]), pw) + pb for m in MODALITIES}
    targets = {m: patchify(images[m], cfg.patch_size).tokens.data for m in MODALITIES}
    return ForwardArtifacts(
        encoded=encoded,
        recon=recon,
        routing=routing,
        proj_cls=proj_cls,
        masks=masks,
        target_tokens=targets,
    )


# ---------------------------------------------------------------------------
# Image-level embeddings
# ---------------------------------------------------------------------------


def build_embedding(tokens, strategy: str, projection=None) -> np.ndarray:
    """Collapse an encoded [(T), d] sequence (CLS first) into one vector.

    Strategies: avg_wo_cls, avg_all, only_cls, norm_cls, norm_proj_cls.
    """
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DimensionError(f"expected a non-empty [T, d] sequence, got shape {arr.shape}")
    if strategy not in EMBEDDING_STRATEGIES:
        raise ParameterError(f"unknown embedding strategy {strategy!r}")
    if strategy == "avg_wo_cls":
        if arr.shape[0] < 2:
            raise DimensionError("avg_wo_cls needs at least one non-CLS row")
        return arr[1:].mean(axis=0)
    if strategy == "avg_all":
        return arr.mean(axis=0)
    cls = arr[0]
    if strategy == "only_cls":
        return cls.copy()
    norm = np.linalg.norm(cls)
    if norm == 0.0:
        raise DimensionError("CLS row has zero norm, cannot normalize")
    normed = cls / norm
    if strategy == "norm_cls":
        return normed
    if projection is None:
        raise ParameterError("norm_proj_cls needs the projection head")
    w, b = projection
    out = normed @ w.data + b.data
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then TNSR1 blocks in manifest order
# ---------------------------------------------------------------------------


def save_checkpoint(model: CsmoeModel, path):
    manifest = parameter_manifest(model.cfg)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": [[name, list(shape)] for name, shape, _ in manifest],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, _, _ in manifest:
            write_tnsr(fh, model.params[name].data)


def load_checkpoint(path) -> CsmoeModel:
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing checkpoint header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: not a model checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = CsmoeConfig.from_dict(header["config"])
        manifest = parameter_manifest(cfg)
        stored = [(name, tuple(shape)) for name, shape in header["params"]]
        if stored != [(name, shape) for name, shape, _ in manifest]:
            raise FormatError(f"{path}: header manifest does not match its config")
        tensors = {}
        for name, shape, _ in manifest:
            arr = read_tnsr(fh)
            if arr.shape != shape:
                raise FormatError(f"{path}: block {name} has shape {arr.shape}, expected {shape}")
            tensors[name] = parameter(arr)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last parameter block")
    return _assemble(cfg, tensors)
