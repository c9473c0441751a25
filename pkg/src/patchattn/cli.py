"""Command-line experiment driver: ``patchattn {train,eval,sweep,gradcheck,gen-synth}``."""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from patchattn import metrics as mt
from patchattn.checkpoint import CheckpointError, load_model, save_checkpoint
from patchattn.config import ExperimentConfig, load_config, parse_overrides
from patchattn.cropping import SUPPORTED_N_CROPS
from patchattn.data import (
    DataError,
    Dataset,
    SyntheticSpec,
    gen_synthetic,
    read_split,
    stratified_split,
    write_split,
    write_synthetic,
)
from patchattn.gradcheck import COMPONENTS, components_for, run_gradcheck
from patchattn.model import ConfigError
from patchattn.training import evaluate, fit

log = logging.getLogger("patchattn")

SWEEP_AXES = ("k", "p_d", "n_crops", "balancing", "aggregator")
TRAIN_EXTRA = ["train_loss", "train_mc_sensitivity", "train_mc_specificity", "train_macro_f1"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def prepare_output(path: str | Path, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    return SyntheticSpec(
        n_per_class=tuple(cfg.synth_n_per_class),
        image_size=cfg.synth_image_size,
        crop_size=cfg.patch_size,
        n_crops=cfg.n_crops if cfg.n_crops in SUPPORTED_N_CROPS else 9,
        signal_patch_policy=cfg.synth_policy,
        seed=cfg.synth_seed,
    )


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, list[str]]:
    """The full dataset plus the part (fold0..2 / test) of every record."""
    if cfg.synthetic:
        records, images, _ = gen_synthetic(synthetic_spec(cfg))
        ds = Dataset(records, images, tuple(cfg.class_names))
        return ds, stratified_split(ds.labels, cfg.synth_seed).parts
    ds = Dataset.from_manifest(cfg.manifest, cfg.class_names)
    if cfg.split:
        return ds, read_split(cfg.split, ds.records).parts
    return ds, stratified_split(ds.labels, cfg.seed).parts


def split_sets(ds: Dataset, parts: list[str], val_fold: int) -> tuple[Dataset, Dataset, Dataset]:
    val = f"fold{val_fold}"
    train_idx = [i for i, p in enumerate(parts) if p.startswith("fold") and p != val]
    val_idx = [i for i, p in enumerate(parts) if p == val]
    test_idx = [i for i, p in enumerate(parts) if p == "test"]
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


def history_rows(run_id: str, history: list[dict]) -> list[list]:
    rows = []
    for h in history:
        train = mt.summarize(h["train_confusion"])
        extra = [f"{h['train_loss']:.6f}", *(f"{train[k]:.6f}" for k in ("mc_sensitivity", "mc_specificity", "macro_f1"))]
        if "val_confusion" in h:
            row = mt.metrics_row(run_id, "val", h["val_confusion"], extra=[h["epoch"]])
        else:
            row = mt.metrics_row(run_id, "train", h["train_confusion"], extra=[h["epoch"]])
        rows.append(row + extra)
    return rows


def train_run(cfg: ExperimentConfig, out: Path) -> tuple:
    ds, parts = load_data(cfg)
    train_ds, val_ds, test_ds = split_sets(ds, parts, cfg.val_fold)
    if not len(train_ds):
        raise DataError("training split is empty")
    (out / "config.toml").write_text(cfg.to_toml())
    result = fit(cfg, train_ds, val_ds if len(val_ds) else None)
    run_id = out.name
    header = mt.metrics_header(cfg.class_names, extra=["epoch"]) + TRAIN_EXTRA
    mt.write_rows(out / "metrics.csv", header, history_rows(run_id, result.history))
    model = result.load_best()
    save_checkpoint(out / "checkpoint.bin", model, extra={"best_epoch": result.best_epoch, "seed": cfg.seed})
    return model, test_ds


def write_attention_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "patch_index", "x", "y", "weight"])
        for sid, p, x, y, wt in rows:
            w.writerow([sid, p, x, y, f"{wt:.6f}"])


def eval_run(model, ds: Dataset, cfg: ExperimentConfig, out: Path, run_id: str, split: str) -> dict:
    res = evaluate(model, ds, cfg)
    mt.write_rows(out / "metrics.csv", mt.metrics_header(cfg.class_names), [mt.metrics_row(run_id, split, res.confusion)])
    if model.config.attention_placement and res.grid is not None:
        place = model.config.attention_placement[-1]
        coeff = res.attention[place]
        rows = [
            (Path(r.image_ref).stem, p, x, y, float(coeff[b, p]))
            for b, r in enumerate(ds.records)
            for p, (x, y) in enumerate(res.grid.offsets)
        ]
        write_attention_csv(out / "attention.csv", rows)
    return res.summary()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = prepare_output(cfg.output_dir, args.overwrite)
    train_run(cfg, out)
    print(f"trained {out.name}: checkpoint {out / 'checkpoint.bin'}, metrics {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or ckpt.parent / "config.toml"
    cfg = load_config(cfg_path, parse_overrides(args.set))
    cfg.validate()
    model, header = load_model(ckpt, expected=cfg.model_config())
    out = prepare_output(args.out or ckpt.parent / f"eval_{args.part}", args.overwrite)
    ds, parts = load_data(cfg)
    part = args.part
    if part == "all":
        subset = ds
    else:
        subset = ds.subset([i for i, p in enumerate(parts) if p == part])
    if not len(subset):
        raise DataError(f"split part {part!r} is empty")
    summary = eval_run(model, subset, cfg, out, ckpt.parent.name, part)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return 0


def _axis_value(axis: str, raw: str):
    if axis in ("k", "p_d"):
        return float(raw)
    if axis == "n_crops":
        return int(raw)
    return raw


def _sort_key(v):
    return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {SWEEP_AXES}")
    if not args.values:
        raise UsageError("sweep needs at least one value")
    base = resolve_config(args)
    values = sorted((_axis_value(args.axis, v) for v in args.values), key=_sort_key)
    seeds = args.seeds or [base.seed]
    configs = [(v, s, base.replace(**{args.axis: v, "seed": s})) for v in values for s in seeds]
    for _, _, cfg in configs:
        cfg.validate()
    out = prepare_output(base.output_dir, args.overwrite)
    results = []
    for v, s, cfg in configs:
        run_dir = out / "runs" / f"{args.axis}={v}_seed{s}"
        run_dir.mkdir(parents=True)
        cfg = cfg.replace(output_dir=str(run_dir))
        model, test_ds = train_run(cfg, run_dir)
        (run_dir / "test").mkdir()
        summary = eval_run(model, test_ds, cfg, run_dir / "test", run_dir.name, "test")
        results.append((v, s, summary))
        print(f"{args.axis}={v} seed={s} " + " ".join(f"{k}={x:.4f}" for k, x in summary.items()))
    names = ["mc_sensitivity", "mc_specificity", "macro_f1"]
    header = ["axis", "value", "seed", *names, *(f"{n}_{stat}" for n in names for stat in ("mean", "spread"))]
    rows = []
    for v in values:
        group = [r for r in results if r[0] == v]
        stats = []
        for n in names:
            xs = np.array([g[2][n] for g in group])
            stats += [xs.mean(), xs.std()]
        for _, s, summary in group:
            rows.append([args.axis, v, s, *(f"{summary[n]:.6f}" for n in names), *(f"{x:.6f}" for x in stats)])
    mt.write_rows(out / "sweep.csv", header, rows)
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.components:
        comps = args.components
    elif args.config:
        cfg = resolve_config(args)
        comps = components_for(cfg.aggregator, cfg.attention_placement)
    else:
        comps = list(COMPONENTS)
    unknown = [c for c in comps if c not in COMPONENTS]
    if unknown:
        raise UsageError(f"unknown components {unknown}; choose from {COMPONENTS}")
    reports = run_gradcheck(comps, n_probe=args.n_probe, seed=args.seed)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


def cmd_gen_synth(args) -> int:
    out = prepare_output(args.out, args.overwrite)
    spec = SyntheticSpec(
        n_per_class=tuple(args.n_per_class),
        image_size=args.image_size,
        crop_size=args.crop_size,
        n_crops=args.n_crops,
        signal_patch_policy=args.policy,
        seed=args.seed,
    )
    names = list(args.class_names)[: spec.n_classes]
    if len(names) < spec.n_classes:
        raise UsageError(f"{spec.n_classes} classes requested but only {len(names)} class names given")
    records, images, infos = gen_synthetic(spec)
    on_disk = write_synthetic(out, records, images, infos, names, fmt=args.format)
    write_split(out / "split.csv", on_disk, stratified_split([r.label for r in on_disk], args.seed))
    hist = Counter(r.label for r in on_disk)
    for c, name in enumerate(names):
        print(f"{name:<8} {hist.get(c, 0)}")
    print(f"total    {len(on_disk)} images in {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchattn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="key-value (TOML) experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if out:
            p.add_argument("--out", help="output directory (overrides output_dir)")
            p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible execution")

    p = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split part")
    p.add_argument("checkpoint")
    p.add_argument("--part", default="test", choices=["fold0", "fold1", "fold2", "test", "all"])
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and test one run per axis value and seed")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", nargs="*", default=[])
    p.add_argument("--seeds", nargs="*", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable component")
    common(p, out=False)
    p.add_argument("--components", nargs="*")
    p.add_argument("--n-probe", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synth", help="write a synthetic signal-in-one-patch dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--n-per-class", type=int, nargs="+", default=[10] * 7)
    p.add_argument("--image-size", type=int, default=192)
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--n-crops", type=int, default=9, choices=SUPPORTED_N_CROPS)
    p.add_argument("--policy", default="random", choices=["random", "center"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="png", choices=["png", "ppm"])
    p.add_argument("--class-names", nargs="+", default=["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"])
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
