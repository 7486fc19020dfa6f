"""Command-line entry point.

Subcommands: sample, split-tiles, pretrain-toy, grad-check, eval-retrieval,
flops. Exit codes: 0 success, 1 usage error, 2 data/format error. A single
--seed funnels every random stream; CSMOE_THREADS (or --threads) governs
inner parallelism and defaults to 1 for reproducibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CsmoeError, DataError
from .evaluation import dataset_retrieval_f1, profile, retrieve
from .losses import (
    DEFAULT_EPS_ENT,
    DEFAULT_GAMMA_ENT,
    DEFAULT_LAMBDA_REP,
    DEFAULT_TAU_MI,
    loss_total,
)
from .model import (
    CsmoeConfig,
    build_embedding,
    encode,
    forward,
    init_model,
    load_checkpoint,
)
from .numerics import check_gradients, load_tnsr, save_tnsr, truncated_normal
from .sampler import GaConfig, load_archive, load_grid, sample_archive, write_selection
from .tokenizer import MaskPair, split_tile
from .trainer import TrainerConfig, load_pairs, run_pretraining, synthesize_pairs


@dataclass
class LossSettings:
    lambda_rep: float = DEFAULT_LAMBDA_REP
    gamma_ent: float = DEFAULT_GAMMA_ENT
    tau_mi: float = DEFAULT_TAU_MI
    eps_ent: float = DEFAULT_EPS_ENT
    mi_include_positive: bool = False
    norm_pix: bool = False

    def to_kwargs(self) -> dict:
        return asdict(self)


@dataclass
class PathSettings:
    data_dir: str = ""
    checkpoint: str = ""
    log: str = ""


@dataclass
class RunConfig:
    model: CsmoeConfig = field(default_factory=CsmoeConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    paths: PathSettings = field(default_factory=PathSettings)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "loss": asdict(self.loss),
            "trainer": asdict(self.trainer),
            "ga": asdict(self.ga),
            "paths": asdict(self.paths),
        }


def _section(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section '{where}': {sorted(unknown)}")
    return cls(**data)


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    sections = {"model": CsmoeConfig, "loss": LossSettings, "trainer": TrainerConfig,
                "ga": GaConfig, "paths": PathSettings}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in sections.items():
        if name in data:
            if name == "model":
                kwargs[name] = CsmoeConfig.from_dict(data[name])
            else:
                kwargs[name] = _section(cls, data[name], name)
    return RunConfig(**kwargs)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="csmoe", description=__doc__)
    parser.add_argument("--dump-config", action="store_true",
                        help="print the fully resolved run configuration and exit")
    parser.add_argument("--config", help="JSON run configuration file")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("sample", help="descriptor-driven archive sampling")
    p.add_argument("--archive", required=True, help="CSV id,lon_min,lat_min,lon_max,lat_max")
    p.add_argument("--climate", required=True, help="GRID1 climate raster")
    p.add_argument("--thematic", required=True, help="GRID1 thematic raster")
    p.add_argument("--out", required=True, help="selection CSV to write")
    p.add_argument("--report", help="sampling report JSON to write")
    p.add_argument("--target", type=int, help="samples to keep per stratum")
    p.add_argument("--iters", type=int, help="GA generations")
    p.add_argument("--pop", type=int, help="GA population size")
    p.add_argument("--rc", type=float, help="per-gene crossover swap probability")
    p.add_argument("--baseline", action="store_true",
                   help="also report an equal-size random selection per stratum")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--config", help="JSON run configuration file")

    p = sub.add_parser("split-tiles", help="cut TNSR1 tiles into training patches")
    p.add_argument("--input", required=True, help="directory of *.tnsr tiles")
    p.add_argument("--output", required=True, help="directory for kept patches and reports")
    p.add_argument("--patch", type=int, default=120)
    p.add_argument("--sentinel", default="nan", help="invalid-pixel value (default NaN)")

    p = sub.add_parser("pretrain-toy", help="mini-batch pretraining on paired TNSR1 images")
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--data-dir", help="directory of <id>_x.tnsr/<id>_y.tnsr pairs")
    p.add_argument("--checkpoint", help="checkpoint path to write")
    p.add_argument("--log", help="JSON-lines loss log to write")
    p.add_argument("--synthesize", type=int, metavar="N",
                   help="generate N synthetic pairs into --data-dir first")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--norm-pix", action="store_true",
                   help="normalize reconstruction targets per token")
    p.add_argument("--mi-include-positive", action="store_true",
                   help="include the positive pair in the contrastive denominator")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("grad-check", help="finite-difference check of the total loss")
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--max-checked", type=int, default=1024)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval-retrieval", help="uni/cross-modal retrieval F1")
    p.add_argument("--checkpoint", help="model checkpoint (needed for image inputs)")
    p.add_argument("--queries", required=True, help="directory of <id>.tnsr embeddings or images")
    p.add_argument("--gallery", required=True, help="directory of <id>.tnsr embeddings or images")
    p.add_argument("--labels", required=True, help="CSV id,labels with ;-joined class codes")
    p.add_argument("--task", required=True, choices=["S1>S1", "S1>S2", "S2>S1", "S2>S2"])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--strategy", default="only_cls",
                   help="embedding strategy for image inputs (default only_cls)")
    p.add_argument("--out", help="JSON result path")

    p = sub.add_parser("flops", help="parameter/FLOP/C2C profile of a configuration")
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--out", help="JSON profile path")

    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("CSMOE_THREADS", "1"))


def _cmd_sample(args) -> int:
    run = load_run_config(args.config)
    ga = run.ga
    overrides = {
        "target_size": args.target, "generations": args.iters,
        "population_size": args.pop, "crossover_rate": args.rc, "seed": args.seed,
    }
    values = {f.name: getattr(ga, f.name) for f in fields(GaConfig)}
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    ga = GaConfig(**values)
    archive = load_archive(args.archive)
    climate = load_grid(args.climate)
    thematic = load_grid(args.thematic)
    selection, report = sample_archive(
        archive, climate, thematic, ga, baseline=args.baseline, threads=_threads(args)
    )
    write_selection(args.out, selection)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"selected {report.total_selected} of {report.total_described} described entries "
          f"across {len(report.strata)} strata -> {args.out}")
    return 0


def _cmd_split_tiles(args) -> int:
    sentinel = float(args.sentinel)
    in_dir, out_dir = Path(args.input), Path(args.output)
    if not in_dir.is_dir():
        raise DataError(f"--input {in_dir} is not a directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    tiles = sorted(in_dir.glob("*.tnsr"))
    if not tiles:
        raise DataError(f"no *.tnsr tiles under {in_dir}")
    total = 0
    for tile_path in tiles:
        tile = load_tnsr(tile_path)
        patches, report = split_tile(tile, args.patch, sentinel)
        for i, patch in enumerate(patches):
            save_tnsr(out_dir / f"{tile_path.stem}_p{i:04d}.tnsr", patch)
        with open(out_dir / f"{tile_path.stem}_report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        total += report.kept
    print(f"kept {total} patches from {len(tiles)} tiles -> {out_dir}")
    return 0


def _resolve_seed(run: RunConfig, arg_seed):
    if arg_seed is not None:
        run.model.seed = arg_seed
        run.ga.seed = arg_seed
        return arg_seed
    return run.model.seed


def _cmd_pretrain(args) -> int:
    run = load_run_config(args.config)
    seed = _resolve_seed(run, args.seed)
    if args.epochs is not None:
        run.trainer.epochs = args.epochs
    if args.norm_pix:
        run.loss.norm_pix = True
    if args.mi_include_positive:
        run.loss.mi_include_positive = True
    data_dir = args.data_dir or run.paths.data_dir
    ckpt = args.checkpoint or run.paths.checkpoint
    log = args.log or run.paths.log
    for name, value in (("--data-dir", data_dir), ("--checkpoint", ckpt), ("--log", log)):
        if not value:
            raise DataError(f"{name} is required (flag or paths section of the config)")
    if args.synthesize:
        synthesize_pairs(data_dir, args.synthesize, run.model, seed)
    pairs = load_pairs(data_dir)
    if args.resume:
        model = load_checkpoint(args.resume)
    else:
        model = init_model(run.model)
    records = run_pretraining(
        model, pairs, run.trainer, seed,
        checkpoint_path=ckpt, log_path=log,
        loss_kwargs=run.loss.to_kwargs(),
        resume_from=args.resume,
    )
    train_records = [r for r in records if "step" in r]
    if train_records:
        print(f"trained {len(train_records)} steps: total {train_records[0]['total']:.6f} "
              f"-> {train_records[-1]['total']:.6f}; checkpoint {ckpt}")
    else:
        print(f"no training steps run; checkpoint {ckpt}")
    return 0


# grad-check re-randomizes parameters at this scale: at the 0.02 init scale
# some gradient elements sit below the f64 central-difference noise floor
GRAD_CHECK_STD = 0.3


def _cmd_grad_check(args) -> int:
    run = load_run_config(args.config)
    seed = _resolve_seed(run, args.seed)
    cfg = run.model
    model = init_model(cfg)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data = truncated_normal(rng, p.shape, GRAD_CHECK_STD)
    data_rng = np.random.default_rng(seed + 2)
    batch = [
        (data_rng.standard_normal((cfg.channels_x, cfg.image_side, cfg.image_side)),
         data_rng.standard_normal((cfg.channels_y, cfg.image_side, cfg.image_side)))
        for _ in range(2)
    ]

    def loss_fn(params):
        arts = [forward(model, x, y, seed=seed + 10 + i) for i, (x, y) in enumerate(batch)]
        return loss_total(model, arts, **run.loss.to_kwargs()).total_tensor

    report = check_gradients(loss_fn, model.params, step=args.step,
                             max_checked=args.max_checked, sample_seed=seed)
    payload = {
        "max_relative_error": report.max_relative_error,
        "step_size": report.step_size,
        "checked_elements": report.checked_elements,
        "tolerance": args.tolerance,
        "passed": report.passed(args.tolerance),
        "per_parameter_errors": dict(sorted(report.per_parameter_errors.items())),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if report.passed(args.tolerance) else 2


_TASK_MODALITY = {"S1": "x", "S2": "y"}


def _load_labels(path) -> dict:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "labels"]:
            raise DataError(f"{path}: expected header id,labels")
        for row in reader:
            parts = [s for s in row["labels"].split(";") if s]
            if not parts:
                raise DataError(f"{path}: empty label set for id {row['id']}")
            labels[row["id"]] = set(parts)
    return labels


def _load_embeddings(directory, modality: str, model, strategy: str):
    root = Path(directory)
    files = sorted(root.glob("*.tnsr"))
    if not files:
        raise DataError(f"no *.tnsr files under {root}")
    ids, rows = [], []
    for path in files:
        arr = load_tnsr(path)
        if arr.ndim == 1:
            vec = arr
        elif arr.ndim == 3:
            if model is None:
                raise DataError(f"{path} holds an image; pass --checkpoint to embed it")
            cfg = model.cfg
            full = MaskPair(masked=np.array([], dtype=np.int64),
                            unmasked=np.arange(cfg.num_patches), ratio=cfg.mask_ratio, seed=0)
            seq = encode(model, arr, full, modality)
            vec = build_embedding(seq, strategy, projection=model.proj)
        else:
            raise DataError(f"{path}: expected rank-1 embedding or rank-3 image, got rank {arr.ndim}")
        ids.append(path.stem)
        rows.append(np.asarray(vec, dtype=np.float64))
    width = {r.shape[0] for r in rows}
    if len(width) != 1:
        raise DataError(f"{root}: embeddings have mixed widths {sorted(width)}")
    return ids, np.stack(rows)


def _cmd_eval_retrieval(args) -> int:
    q_name, g_name = args.task.split(">")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    labels = _load_labels(args.labels)
    q_ids, q_emb = _load_embeddings(args.queries, _TASK_MODALITY[q_name], model, args.strategy)
    g_ids, g_emb = _load_embeddings(args.gallery, _TASK_MODALITY[g_name], model, args.strategy)
    missing = [i for i in q_ids + g_ids if i not in labels]
    if missing:
        raise DataError(f"{args.labels}: no labels for ids: {', '.join(sorted(set(missing))[:5])}")
    ranked = retrieve(q_emb, g_emb, args.k, query_ids=q_ids, gallery_ids=g_ids)
    query_labels = [labels[i] for i in q_ids]
    retrieved_labels = [[labels[g_ids[j]] for j in row] for row in ranked]
    f1 = dataset_retrieval_f1(query_labels, retrieved_labels, min(args.k, min(len(r) for r in ranked)))
    payload = {
        "task": f"{q_name}→{g_name}",
        "f1_percent": f1,
        "n_queries": len(q_ids),
        "k": args.k,
    }
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_flops(args) -> int:
    run = load_run_config(args.config)
    prof = profile(run.model)
    text = json.dumps(prof.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    print()
    print(f"{'component':<16}{'params':>14}{'flops':>16}")
    for row in prof.breakdown:
        print(f"{row['component']:<16}{row['params']:>14}{row['flops']:>16}")
    print(f"{'total':<16}{prof.params:>14}{prof.flops:>16}")
    return 0


_COMMANDS = {
    "sample": _cmd_sample,
    "split-tiles": _cmd_split_tiles,
    "pretrain-toy": _cmd_pretrain,
    "grad-check": _cmd_grad_check,
    "eval-retrieval": _cmd_eval_retrieval,
    "flops": _cmd_flops,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.dump_config:
            run = load_run_config(args.config)
            print(json.dumps(run.to_dict(), indent=2, sort_keys=True))
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except CsmoeError as exc:
        print(f"csmoe: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"csmoe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
