"""Command-line interface: ``sscc synth|train|cluster|eval|ablate|augment-preview``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error. The output
directory is ``--out-dir`` if given, else ``$SSCC_OUTPUT_DIR``, else ``.``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import itertools
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import TRANSFORMS, AugmentationError, AugmentationPool, sample_plan, apply_plan, view_rng
from .data import (
    UNLABELED,
    Cube,
    PcaModel,
    extract_patches,
    load_cube,
    load_labels,
    pca_fit,
    pca_transform,
    save_cube,
    save_labels,
    synth_cube,
)
from .infer import assign_clusters
from .losses import LossConfig
from .metrics import evaluate
from .network import ConfigError, build_network, load_checkpoint, save_checkpoint
from .trainer import train

log = logging.getLogger("sscc")

OUTPUT_ENV = "SSCC_OUTPUT_DIR"
LOSS_VARIANTS = {
    "combined": {},
    "within": {"between_weight": 0.0},
    "between": {"alpha": 0.0},
}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@contextlib.contextmanager
def usage_errors():
    """Turn invalid parameter values into usage errors."""
    try:
        yield
    except (ValueError, AugmentationError) as exc:
        raise UsageError(str(exc)) from exc


def output_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get(OUTPUT_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(item) for item in text.split(",") if item.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


# --------------------------------------------------------------------------
# configuration


def run_config(args) -> cfgmod.RunConfig:
    """Defaults, then ``--config``, then ``--set`` pairs, then dedicated flags."""
    with usage_errors():
        config = cfgmod.RunConfig()
        if args.config:
            config = cfgmod.load_config(args.config, config)
        pairs = {}
        for item in args.set or []:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value
        flag_keys = {"seed": "seed", "epochs": "train.epochs", "batch_size": "train.batch_size",
                     "lr": "train.base_lr", "classes": "net.cluster_count", "patch_side": "data.patch_side",
                     "pca": "data.pca_components"}
        for attr, key in flag_keys.items():
            value = getattr(args, attr, None)
            if value is not None:
                pairs[key] = str(value)
        return cfgmod.apply_pairs(config, pairs)


def add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--classes", type=int, help="number of clusters C")
    p.add_argument("--patch-side", type=int)
    p.add_argument("--pca", type=int, help="PCA components (0 keeps all bands)")


def prepare_cube(cube: Cube, components: int) -> tuple[Cube, PcaModel | None]:
    if components == 0:
        return cube, None
    if components > cube.bands:
        raise ValueError(f"cannot keep {components} PCA components of a {cube.bands}-band cube")
    model = pca_fit(cube, components)
    return pca_transform(model, cube), model


def network_for(config: cfgmod.RunConfig, channels: int):
    net = dataclasses.replace(config.net, input_channels=channels, input_side=config.data.patch_side)
    with usage_errors():
        net.validate()
    return net


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    h, w = args.size
    with usage_errors():
        if args.classes < 2:
            raise ValueError(f"--classes must be at least 2, got {args.classes}")
        if args.classes > h * w or args.bands < 1 or args.noise < 0:
            raise ValueError("need classes <= pixels, bands >= 1 and noise >= 0")
    cube, labels = synth_cube(args.classes, h, w, args.bands, args.noise, args.seed)
    out = output_dir(args)
    save_cube(cube, out / f"{args.name}.cube")
    save_labels(labels, out / f"{args.name}.labels")
    log.info("wrote %s.cube and %s.labels to %s", args.name, args.name, out)


def _ground_truth(args, cube):
    if not args.labels:
        return None
    labels = load_labels(args.labels)
    if labels.labels.shape != (cube.height, cube.width):
        raise ValueError(f"label map {labels.labels.shape} does not match cube {cube.height}x{cube.width}")
    return labels


def cmd_train(args):
    config = run_config(args)
    cube = load_cube(args.cube)
    reduced, pca = prepare_cube(cube, config.data.pca_components)
    net_config = network_for(config, reduced.bands)
    labels = _ground_truth(args, cube)
    patches, truth = extract_patches(reduced, labels, config.data.patch_side)
    if truth is not None:
        truth = np.where(truth == UNLABELED, -1, truth)
    net, history = train(patches, config.pool, net_config, config.train, ground_truth=truth)
    out = output_dir(args)
    extra = {
        "config": cfgmod.to_flat(config),
        "patch_side": config.data.patch_side,
        "bands": cube.bands,
        "pca_mean": None if pca is None else pca.mean.tolist(),
        "pca_components": None if pca is None else pca.components.tolist(),
        "pca_variance": None if pca is None else pca.explained_variance.tolist(),
    }
    save_checkpoint(net, out / args.checkpoint, extra)
    (out / args.history).write_text(history.to_csv())
    (out / "config.txt").write_text(cfgmod.dump_config(config))
    log.info("trained %d epochs; wrote %s and %s", len(history), args.checkpoint, args.history)


def _apply_stored_pca(cube: Cube, extra: dict) -> Cube:
    if cube.bands != extra["bands"]:
        raise ValueError(f"cube has {cube.bands} bands, model was trained on {extra['bands']}")
    if extra.get("pca_mean") is None:
        return cube
    model = PcaModel(np.asarray(extra["pca_mean"]), np.asarray(extra["pca_components"]),
                     np.asarray(extra["pca_variance"]))
    return pca_transform(model, cube)


def _fmt(value) -> str:
    return f"{float(value):.9g}"


def cmd_cluster(args):
    net, extra = load_checkpoint(args.checkpoint)
    cube = load_cube(args.cube)
    reduced = _apply_stored_pca(cube, extra)
    patches, _ = extract_patches(reduced, None, int(extra["patch_side"]))
    result = assign_clusters(net, patches, args.batch_size, keep_representations=args.dump_reps)
    out = output_dir(args)
    with open(out / args.output, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "label", "confidence"])
        for p, label, conf in zip(patches, result.labels, result.confidences):
            writer.writerow([p.center_row, p.center_col, int(label), _fmt(conf)])
    if args.dump_reps:
        c = result.representations.shape[1]
        with open(out / args.reps_output, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row", "col"] + [f"y_{k}" for k in range(c)])
            for p, row in zip(patches, result.representations):
                writer.writerow([p.center_row, p.center_col] + [_fmt(v) for v in row])
    log.info("clustered %d pixels into %s", len(patches), args.output)


def _read_pixel_csv(path, value_columns):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["row", "col"]:
            raise ValueError(f"{path}: expected a header starting with row,col")
        if value_columns is None:
            value_columns = header[2:]
        index = [header.index(name) for name in value_columns]
        rows, cols, values = [], [], []
        for number, record in enumerate(reader, 2):
            if len(record) != len(header):
                raise ValueError(f"{path}:{number}: expected {len(header)} fields")
            rows.append(int(record[0]))
            cols.append(int(record[1]))
            values.append([float(record[i]) for i in index])
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(values).reshape(len(rows), -1)


def _align(path, rows, cols, labels):
    h, w = labels.shape
    if rows.size != h * w:
        raise ValueError(f"{path} has {rows.size} rows but the label map has {h * w} pixels")
    if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
        raise ValueError(f"{path}: pixel coordinates outside the {h}x{w} label map")
    flat = rows * w + cols
    if np.unique(flat).size != flat.size:
        raise ValueError(f"{path}: duplicate pixel coordinates")
    return flat


def cmd_eval(args):
    label_map = load_labels(args.labels)
    rows, cols, values = _read_pixel_csv(args.assignments, ["label"])
    flat = _align(args.assignments, rows, cols, label_map.labels)
    pred = np.empty(flat.size, dtype=np.int64)
    pred[flat] = values[:, 0].astype(np.int64)
    truth = label_map.labels.ravel().astype(np.int64)
    keep = label_map.labels.ravel() != UNLABELED
    y = None
    if args.reps:
        r_rows, r_cols, reps = _read_pixel_csv(args.reps, None)
        r_flat = _align(args.reps, r_rows, r_cols, label_map.labels)
        y = np.empty_like(reps)
        y[r_flat] = reps
        y = y[keep]
    pred, truth = pred[keep], truth[keep]
    if pred.min() < 0:
        raise ValueError("negative cluster label in assignments")
    c = max(label_map.num_classes, int(pred.max()) + 1, int(truth.max()) + 1)
    report = evaluate(pred, truth, c, y)
    out = output_dir(args)
    (out / "report.txt").write_text(report.text())
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(report.FIELDS)
        writer.writerow(["" if v is None else _fmt(v) for v in report.row().values()])
    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true"] + [f"pred_{k}" for k in range(c)])
        for t, row in enumerate(report.confusion):
            writer.writerow([t] + [int(v) for v in row])
    print(report.text(), end="")


def aug_pairs(transforms):
    """Diagonal singles followed by unordered pairs, in the order given."""
    return [(t, t) for t in transforms] + list(itertools.combinations(transforms, 2))


ABLATION_COLUMNS = ("variant", "tau", "lam", "batch_size", "patch_side", "aug_a", "aug_b", "seed",
                    "final_loss", "acc", "kappa", "nmi", "ari", "purity", "divergence")


def cmd_ablate(args):
    config = run_config(args)
    with usage_errors():
        for v in args.variants:
            if v not in LOSS_VARIANTS:
                raise ValueError(f"unknown loss variant {v!r}; choose from {', '.join(LOSS_VARIANTS)}")
        for t in args.aug_pairs or []:
            if t not in TRANSFORMS:
                raise ValueError(f"unknown transform {t!r}; choose from {', '.join(TRANSFORMS)}")
        grid = list(itertools.product(
            args.variants,
            args.tau or [config.loss.tau],
            args.lam or [config.loss.lam],
            args.batch_sizes or [config.train.batch_size],
            args.patch_sides or [config.data.patch_side],
            aug_pairs(args.aug_pairs) if args.aug_pairs else [(None, None)],
            args.seeds or [config.seed],
        ))
        if not grid:
            raise ValueError("empty ablation grid")
        for variant, tau, lam, batch_size, side, _, seed in grid:
            loss = dataclasses.replace(config.loss, tau=tau, lam=lam, **LOSS_VARIANTS[variant])
            dataclasses.replace(config.train, batch_size=batch_size, loss=loss, seed=seed)
            cfgmod.DataConfig(config.data.pca_components, side)
    cube = load_cube(args.cube)
    label_map = _ground_truth(args, cube)
    reduced, _ = prepare_cube(cube, config.data.pca_components)
    out = output_dir(args)
    patch_cache = {}
    with open(out / args.output, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for variant, tau, lam, batch_size, side, (aug_a, aug_b), seed in grid:
            if side not in patch_cache:
                patches, truth = extract_patches(reduced, label_map, side)
                truth = np.where(truth == UNLABELED, -1, truth)
                patch_cache[side] = (patches, truth)
            patches, truth = patch_cache[side]
            loss = LossConfig(**{**dataclasses.asdict(config.loss), "tau": tau, "lam": lam,
                                 **LOSS_VARIANTS[variant]})
            train_config = dataclasses.replace(config.train, batch_size=batch_size, loss=loss, seed=seed)
            pool = config.pool if aug_a is None else AugmentationPool.only(aug_a, aug_b)
            net_config = network_for(dataclasses.replace(config, data=cfgmod.DataConfig(
                config.data.pca_components, side)), reduced.bands)
            net, history = train(patches, pool, net_config, train_config)
            result = assign_clusters(net, patches, config.train.eval_batch_size, keep_representations=True)
            keep = truth >= 0
            report = evaluate(result.labels[keep], truth[keep], max(net_config.cluster_count,
                              label_map.num_classes), result.representations[keep])
            final_loss = history.records[-1].loss if len(history) else float("nan")
            writer.writerow([variant, _fmt(tau), _fmt(lam), batch_size, side, aug_a or "", aug_b or "", seed,
                             _fmt(final_loss)] + [_fmt(getattr(report, k)) for k in ABLATION_COLUMNS[-6:]])
            fh.flush()
            log.info("%s tau=%g lam=%g M=%d side=%d aug=%s/%s seed=%d acc=%.4f", variant, tau, lam,
                     batch_size, side, aug_a, aug_b, seed, report.acc)


def cmd_augment_preview(args):
    config = run_config(args)
    cube = load_cube(args.cube)
    reduced, _ = prepare_cube(cube, config.data.pca_components)
    side = config.data.patch_side
    patches, _ = extract_patches(reduced, None, side)
    with usage_errors():
        if args.count < 1:
            raise ValueError("--count must be positive")
    picks = np.random.default_rng([config.seed, 2]).choice(len(patches), min(args.count, len(patches)),
                                                            replace=False)
    tiles = np.zeros((3 * side, len(picks) * side, reduced.bands), dtype=np.float32)
    lines = []
    for k, idx in enumerate(picks):
        patch = patches[idx]
        tiles[:side, k * side:(k + 1) * side] = patch.values
        for view in (0, 1):
            plan = sample_plan(config.pool, view_rng(config.seed, int(idx), view))
            tiles[(view + 1) * side:(view + 2) * side, k * side:(k + 1) * side] = apply_plan(plan, patch).values
            lines.append(f"{patch.center_row},{patch.center_col},{view},{'+'.join(plan.names) or 'identity'}")
    out = output_dir(args)
    save_cube(Cube(tiles), out / args.output)
    (out / (Path(args.output).stem + "_plans.csv")).write_text("row,col,view,transforms\n" + "\n".join(lines) + "\n")
    log.info("wrote %d previews (original, view a, view b stacked vertically) to %s", len(picks), args.output)


# --------------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sscc", description="Spectral-spatial contrastive clustering")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
        return p

    p = command("synth", cmd_synth, "write a synthetic cube and label map")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=_size, default=(32, 32), help="HxW")
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synth", help="file stem")

    p = command("train", cmd_train, "train a network on a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", help="label map for per-epoch evaluation")
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--history", default="history.csv")
    add_config_flags(p)

    p = command("cluster", cmd_cluster, "assign every pixel of a cube to a cluster")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--output", default="assignments.csv")
    p.add_argument("--dump-reps", action="store_true", help="also write label representations")
    p.add_argument("--reps-output", default="reps.csv")
    p.add_argument("--batch-size", type=int, default=256)

    p = command("eval", cmd_eval, "score an assignment CSV against a label map")
    p.add_argument("--assignments", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--reps", help="label representation CSV for the divergence score")

    p = command("ablate", cmd_ablate, "train and score a grid of configurations")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--output", default="ablation.csv")
    p.add_argument("--variants", type=_csv_list(str), default=["combined"],
                   help="loss variants: combined, within, between")
    p.add_argument("--tau", type=_csv_list(float))
    p.add_argument("--lam", type=_csv_list(float))
    p.add_argument("--batch-sizes", type=_csv_list(int))
    p.add_argument("--patch-sides", type=_csv_list(int))
    p.add_argument("--aug-pairs", type=_csv_list(str), help="transforms to compose pairwise")
    p.add_argument("--seeds", type=_csv_list(int))
    add_config_flags(p)

    p = command("augment-preview", cmd_augment_preview, "write augmented views of sample patches")
    p.add_argument("--cube", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--output", default="preview.cube")
    add_config_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "cluster" and args.batch_size < 1:
            raise UsageError("--batch-size must be positive")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"sscc: usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ConfigError, FloatingPointError) as exc:
        print(f"sscc: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
