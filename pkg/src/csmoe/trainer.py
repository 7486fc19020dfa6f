"""Toy pretraining loop: AdamW, cosine schedule with linear warmup, paired
TNSR1 image data, JSON-line loss logging, and bit-exact resume.

Every random stream (masks, shuffling, validation split, synthetic data)
derives from the run seed plus a fixed purpose key, so a resumed run
replays exactly the steps a longer run would have taken.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .losses import loss_total
from .model import CsmoeModel, forward, parameter_manifest, save_checkpoint
from .numerics import backward, read_tnsr, save_tnsr, write_tnsr, zero_grads

OPT_FORMAT = "CSMOE-OPT"
OPT_VERSION = 1

# spawn keys for the independent derived streams
_KEY_VAL_SPLIT = 2
_KEY_MASKS = 3
_KEY_VAL_MASKS = 4
_KEY_SHUFFLE = 5
_KEY_SYNTH = 6


@dataclass
class TrainerConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    val_fraction: float = 0.05
    schedule_epochs: int = 0  # cosine horizon; 0 means same as epochs


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero; step is 0-based."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a named parameter map."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float = None):
        if lr is None:
            lr = self.lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# Optimizer sidecar (next to the model checkpoint, enables exact resume)
# ---------------------------------------------------------------------------


def save_optimizer_state(path, optimizer: AdamW, epoch: int, model: CsmoeModel):
    names = [name for name, _, _ in parameter_manifest(model.cfg)]
    header = {
        "format": OPT_FORMAT,
        "version": OPT_VERSION,
        "step": optimizer.step_count,
        "epoch": epoch,
        "names": names,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            write_tnsr(fh, optimizer.m[name])
            write_tnsr(fh, optimizer.v[name])


def load_optimizer_state(path, optimizer: AdamW, model: CsmoeModel) -> int:
    """Restore moments and step count; returns the epoch to resume from."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable optimizer header: {exc}") from exc
        if header.get("format") != OPT_FORMAT or header.get("version") != OPT_VERSION:
            raise FormatError(f"{path}: not an optimizer state file")
        expected = [name for name, _, _ in parameter_manifest(model.cfg)]
        if header["names"] != expected:
            raise FormatError(f"{path}: optimizer state does not match the model config")
        for name in expected:
            optimizer.m[name] = read_tnsr(fh)
            optimizer.v[name] = read_tnsr(fh)
    optimizer.step_count = int(header["step"])
    return int(header["epoch"])


# ---------------------------------------------------------------------------
# Paired data
# ---------------------------------------------------------------------------


def load_pairs(data_dir):
    """All <id>_x.tnsr / <id>_y.tnsr pairs under data_dir, sorted by id."""
    root = Path(data_dir)
    xs = {p.name[:-7]: p for p in root.glob("*_x.tnsr")}
    ys = {p.name[:-7]: p for p in root.glob("*_y.tnsr")}
    unpaired = sorted(set(xs) ^ set(ys))
    if unpaired:
        raise DataError(f"{data_dir}: unpaired ids: {', '.join(unpaired)}")
    if not xs:
        raise DataError(f"{data_dir}: no *_x.tnsr/*_y.tnsr pairs found")
    from .numerics import load_tnsr

    return [(pid, load_tnsr(xs[pid]), load_tnsr(ys[pid])) for pid in sorted(xs)]


def synthesize_pairs(data_dir, count: int, cfg, seed: int):
    """Write paired synthetic images sharing a coarse structure per pair."""
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    side = cfg.image_side
    coarse = max(side // 4, 1)
    reps = side // coarse
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_KEY_SYNTH, i)))
        base = rng.standard_normal((coarse, coarse)).repeat(reps, axis=0).repeat(reps, axis=1)
        base = base[:side, :side]

        def bands(channels):
            gains = rng.uniform(0.5, 1.5, size=channels)
            noise = 0.3 * rng.standard_normal((channels, side, side))
            return gains[:, None, None] * base[None] + noise

        pid = f"synt{i:04d}"
        save_tnsr(root / f"{pid}_x.tnsr", bands(cfg.channels_x))
        save_tnsr(root / f"{pid}_y.tnsr", bands(cfg.channels_y))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _derived_seed(seed: int, *key) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return int(ss.generate_state(1)[0])


def split_validation(pair_ids, fraction: float, seed: int):
    """Hold out floor(fraction * N) ids; empty holdout when that rounds to 0."""
    n_val = int(math.floor(fraction * len(pair_ids)))
    if n_val == 0:
        return list(pair_ids), []
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_KEY_VAL_SPLIT,)))
    picked = set(rng.choice(len(pair_ids), size=n_val, replace=False).tolist())
    train = [pid for i, pid in enumerate(pair_ids) if i not in picked]
    val = [pid for i, pid in enumerate(pair_ids) if i in picked]
    return train, val


def train(model: CsmoeModel, pairs, tcfg: TrainerConfig, seed: int,
          loss_kwargs: dict = None, log_fh=None, start_epoch: int = 0,
          optimizer: AdamW = None):
    """Run epochs [start_epoch, tcfg.epochs) of mini-batch AdamW training.

    Returns (optimizer, steps["train"/"val"] log records). Batches with
    fewer than 2 pairs are dropped (the contrastive term needs pairs).
    """
    loss_kwargs = loss_kwargs or {}
    by_id = {pid: (x, y) for pid, x, y in pairs}
    train_ids, val_ids = split_validation([p[0] for p in pairs], tcfg.val_fraction, seed)
    if len(train_ids) < 2:
        raise DataError(f"need at least 2 training pairs after the validation split, got {len(train_ids)}")
    if tcfg.batch_size < 2:
        raise ParameterError(f"batch size must be >= 2, got {tcfg.batch_size}")
    full, rem = divmod(len(train_ids), tcfg.batch_size)
    steps_per_epoch = full + (1 if rem >= 2 else 0)  # size-1 tail batches are dropped
    horizon_epochs = tcfg.schedule_epochs or tcfg.epochs
    total_steps = horizon_epochs * steps_per_epoch
    warmup = max(1, round(tcfg.warmup_frac * total_steps))
    if optimizer is None:
        optimizer = AdamW(model.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    step = optimizer.step_count
    records = []

    def emit(record):
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")

    for epoch in range(start_epoch, tcfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_KEY_SHUFFLE, epoch)))
        order = rng.permutation(len(train_ids))
        for lo in range(0, len(order), tcfg.batch_size):
            chunk = order[lo:lo + tcfg.batch_size]
            if chunk.size < 2:
                continue
            arts = []
            for j, idx in enumerate(chunk):
                x, y = by_id[train_ids[idx]]
                arts.append(forward(model, x, y, seed=_derived_seed(seed, _KEY_MASKS, step, j)))
            breakdown = loss_total(model, arts, **loss_kwargs)
            optimizer.zero_grad()
            backward(breakdown.total_tensor)
            lr = cosine_lr(step, total_steps, tcfg.lr, warmup)
            optimizer.step(lr=lr)
            step = optimizer.step_count
            emit({"step": step, **breakdown.to_dict()})
        if len(val_ids) >= 2:
            arts = []
            for j, pid in enumerate(val_ids):
                x, y = by_id[pid]
                arts.append(forward(model, x, y, seed=_derived_seed(seed, _KEY_VAL_MASKS, epoch, j)))
            val = loss_total(model, arts, **loss_kwargs)
            emit({"epoch": epoch + 1, "val_total": val.total})
    return optimizer, records


def run_pretraining(model: CsmoeModel, pairs, tcfg: TrainerConfig, seed: int,
                    checkpoint_path, log_path, loss_kwargs: dict = None,
                    resume_from=None):
    """Train, then write the checkpoint and its optimizer sidecar."""
    optimizer = AdamW(model.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_optimizer_state(str(resume_from) + ".opt", optimizer, model)
    with open(log_path, "a" if resume_from else "w") as log_fh:
        _, records = train(model, pairs, tcfg, seed, loss_kwargs=loss_kwargs,
                           log_fh=log_fh, start_epoch=start_epoch, optimizer=optimizer)
    save_checkpoint(model, checkpoint_path)
    save_optimizer_state(str(checkpoint_path) + ".opt", optimizer, tcfg.epochs, model)
    return records
