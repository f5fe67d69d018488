"""Command-line entry point: ``stencil-lab generate|train|evaluate|classify``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation, labeling
from .linalg import ConditioningError
from .model import (CheckpointError, ModelConfig, TrainConfig, dataset_fingerprint,
                    history_csv, load_checkpoint, predict,
                    predict_proba, save_checkpoint, stratified_split, train)
from .nodes import (GenConfig, InsufficientCandidatesError, InvalidDomainError,
                    StencilSample, ZeroRadiusError, has_duplicates, normalize)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stencil-lab",
        description="Generate labelled RBF-FD stencil datasets and train a stencil quality classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a labelled stencil dataset")
    g.add_argument("--sizes", type=_int_list, default=[6, 7, 9, 12, 15])
    g.add_argument("--count", type=int, required=True, help="stencils per size")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spacing", type=float, default=0.02, help="candidate node spacing h")
    g.add_argument("--beta", type=float, default=1.0, help="radial sampling decay exponent")
    g.add_argument("--pool", type=_positive_int, default=None,
                   help="nearest-neighbour candidate pool size (default 3s)")
    g.add_argument("--workers", type=_positive_int, default=None,
                   help="worker processes (default $STENCIL_LAB_WORKERS or CPU count)")
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train the classifier on a dataset file")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--checkpoint", type=Path, required=True)
    t.add_argument("--history", type=Path, default=None,
                   help="per-epoch CSV (default: checkpoint path with .history.csv)")
    t.add_argument("--epochs", type=_positive_int, default=TrainConfig.epochs)
    t.add_argument("--batch-size", type=_positive_int, default=TrainConfig.batch_size)
    t.add_argument("--test-fraction", type=float, default=TrainConfig.test_fraction)
    t.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--dropout", type=float, default=ModelConfig.dropout_rate)
    t.add_argument("--point-widths", type=_int_list, default=list(ModelConfig.point_widths))
    t.add_argument("--dense-widths", type=_int_list, default=list(ModelConfig.dense_widths))
    t.add_argument("--dtype", choices=["float32", "float64"], default=TrainConfig.dtype)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-recalibrate", action="store_true",
                   help="keep the moving-average normalization statistics instead of "
                        "re-estimating them on the training split after each epoch")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint and write a report")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--roc-csv", type=Path, default=None)
    e.add_argument("--split", choices=["test", "train", "all"], default=None,
                   help="records of the training dataset to use (default test)")
    e.add_argument("--allow-train-eval", action="store_true",
                   help="permit evaluating on records the model was trained on")
    e.add_argument("--sizes", type=_int_list, default=None, help="only these stencil sizes")

    c = sub.add_parser("classify", help="classify one stencil")
    c.add_argument("--checkpoint", type=Path, required=True)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--stencil", help="points 'x,y;x,y;...', central node first")
    src.add_argument("--file", type=Path, help="one 'x y' or 'x,y' point per line, central node first")
    return parser


def _summary_line(s: int, eps: np.ndarray, borders) -> str:
    b1, b2, b3 = borders
    return (f"s={s:<3d} n={len(eps):<7d} min={eps.min():.4g} median={np.median(eps):.4g} "
            f"max={eps.max():.4g} borders=({b1:.4g}, {b2:.4g}, {b3:.4g})")


def cmd_generate(args) -> int:
    workers = args.workers or labeling.default_workers()
    gen = GenConfig(seed=args.seed, spacing_h=args.spacing, decay_beta=args.beta,
                    candidate_pool_m=args.pool, stencil_size_s=max(args.sizes))
    dataset = labeling.build_dataset(gen, args.sizes, args.count, workers=workers)
    labeling.write_dataset(dataset, args.out)
    _, _, eps, sizes = dataset.arrays()
    for s in dataset.sizes:
        print(_summary_line(s, eps[sizes == s], dataset.borders[s]))
    print(f"wrote {len(dataset)} stencils to {args.out}")
    return EXIT_OK


def _read_dataset(path: Path) -> tuple[labeling.Dataset, str]:
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise labeling.DatasetFormatError(f"cannot read {path}: {exc}") from None
    return labeling.loads_dataset(text), text


def cmd_train(args) -> int:
    dataset, text = _read_dataset(args.dataset)
    if any(r.quartile is None for r in dataset.records):
        raise labeling.DatasetFormatError("dataset has unlabelled records")
    mc = ModelConfig(input_size=dataset.max_size, point_widths=tuple(args.point_widths),
                     dense_widths=tuple(args.dense_widths), dropout_rate=args.dropout)
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                     test_fraction=args.test_fraction, learning_rate=args.learning_rate,
                     seed=args.seed, dtype=args.dtype,
                     recalibrate_stats=not args.no_recalibrate)
    model, history, (_, test_idx) = train(dataset, mc, tc)
    last = history[-1]
    manifest = {
        "train_config": asdict(tc),
        "split_seed": tc.seed,
        "test_fraction": tc.test_fraction,
        "dataset": str(args.dataset),
        "dataset_sha256": dataset_fingerprint(text),
        "dataset_sizes": dataset.sizes,
        "epochs": len(history),
        "metrics": {"train_loss": last.train_loss, "train_acc": last.train_acc,
                    "test_loss": last.test_loss, "test_acc": last.test_acc,
                    "test_records": int(len(test_idx))},
    }
    save_checkpoint(args.checkpoint, model, manifest)
    hist_path = args.history or args.checkpoint.with_suffix(".history.csv")
    hist_path.write_text(history_csv(history))
    print(f"epoch {last.epoch}: train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f}")
    print(f"wrote {args.checkpoint} and {hist_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    dataset, text = _read_dataset(args.dataset)
    n = model.config.input_size

    own = dataset_fingerprint(text) == manifest.get("dataset_sha256")
    split = args.split or ("test" if own else "all")
    if own and split != "test" and not args.allow_train_eval:
        raise UsageError(f"split {split!r} contains training records; pass --allow-train-eval")

    keep = np.arange(len(dataset))
    if args.sizes:
        keep = np.array([i for i, r in enumerate(dataset.records) if r.size_s in args.sizes],
                        dtype=np.intp)
    labels_all = np.array([int(r.quartile) for r in dataset.records])
    sizes_all = np.array([r.size_s for r in dataset.records])
    if split != "all":
        train_idx, test_idx = stratified_split(labels_all, sizes_all,
                                               manifest["test_fraction"], manifest["split_seed"])
        keep = np.intersect1d(keep, test_idx if split == "test" else train_idx)
    if len(keep) == 0:
        raise labeling.InsufficientDataError("no records selected for evaluation")
    largest = max(dataset.records[i].size_s for i in keep)
    if largest > n:
        raise ValueError(f"stencils of {largest} nodes exceed model input size {n}")

    sub = dataset.subset(keep)
    coords, labels, eps, sizes = sub.arrays(n)
    probs = predict_proba(model, coords)
    present = sorted(set(sizes.tolist()))
    reports = [evaluation.evaluate("mix" if len(present) > 1 else str(present[0]),
                                   probs, labels, eps, sizes, dataset.borders)]
    if len(present) > 1:
        for s in present:
            m = sizes == s
            reports.append(evaluation.evaluate(str(s), probs[m], labels[m], eps[m], sizes[m],
                                               dataset.borders))
    trained_on = manifest.get("dataset_sizes", [])
    config = {
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "split": split,
        "train": "mix" if len(trained_on) > 1 else ",".join(map(str, trained_on)),
        "model_input_size": n,
        "train_config": manifest.get("train_config"),
    }
    args.out.write_text(evaluation.render_report(reports, config))
    if args.roc_csv is not None:
        args.roc_csv.write_text(evaluation.roc_csv(reports))
    for r in reports:
        print(f"{r.name}: accuracy={r.metrics.accuracy:.4f} n={r.count}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_points(text: str) -> np.ndarray:
    pts = []
    chunks = text.replace("\n", ";").split(";")
    for chunk in chunks:
        chunk = chunk.strip()
        if not chunk or chunk.startswith("#"):
            continue
        parts = chunk.replace(",", " ").split()
        if len(parts) != 2:
            raise UsageError(f"cannot read point {chunk!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise UsageError(f"cannot read point {chunk!r}") from None
    if not pts:
        raise UsageError("no stencil points given")
    arr = np.array(pts)
    if not np.all(np.isfinite(arr)):
        raise UsageError("stencil coordinates must be finite")
    return arr


def cmd_classify(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.file is not None:
        try:
            text = args.file.read_text()
        except OSError as exc:
            raise labeling.DatasetFormatError(f"cannot read {args.file}: {exc}") from None
    else:
        text = args.stencil
    pts = _parse_points(text)
    radius = np.sqrt((pts ** 2).sum(axis=1)).max()
    if has_duplicates(pts, max(radius, 1e-300)):
        raise ConditioningError("stencil contains duplicate nodes", np.inf)
    stencil = normalize(StencilSample(pts, 0))
    if not np.allclose(stencil.coords, pts, rtol=0, atol=1e-12):
        print("warning: stencil was not centred and normalized; normalizing", file=sys.stderr)
    quartile, probs = predict(model, stencil)
    print(f"{quartile.name} " + " ".join(f"{q}={p:.6f}" for q, p in
                                         zip(("Q1", "Q2", "Q3", "Q4"), probs)))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train,
            "evaluate": cmd_evaluate, "classify": cmd_classify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConditioningError, ZeroRadiusError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (labeling.DatasetFormatError, labeling.InsufficientDataError, CheckpointError,
            labeling.MissingBordersError, InvalidDomainError, InsufficientCandidatesError,
            ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
