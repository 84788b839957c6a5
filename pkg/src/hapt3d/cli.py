"""Command-line entry point: dataset generation, training, inference,
evaluation, and the skip-connection ablation study.

Configuration is plain ``key = value`` text (one pair per line, ``#``
comments); command-line ``--set key=value`` overrides win over the file.
Unknown keys are rejected. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .cloud import (
    AugmentConfig,
    CloudValidationError,
    OrchardConfig,
    PlyFormatError,
    cloud_stats,
    generate_orchard,
    load_ply,
    save_ply,
    LabeledCloud,
)
from .cluster import InstancePrediction, predict_instances
from .metrics import EvalAccumulator
from .nn import load_checkpoint, save_checkpoint
from .train import TrainConfig, ablate, ablation_table, evaluate, history_lines, train


@dataclass
class RunConfig:
    orchard: OrchardConfig = field(default_factory=OrchardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _parse_range(text: str) -> tuple:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected 'min,max', got '{text}'")
    return tuple(parts)


def _parse_ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _orchard(name, parse=float):
    return lambda cfg, v: setattr(cfg.orchard, name, parse(v))


def _train(name, parse=float):
    return lambda cfg, v: setattr(cfg.train, name, parse(v))


def _loss(name, parse=float):
    return lambda cfg, v: setattr(cfg.train.loss, name, parse(v))


def _augment(name, parse=float):
    return lambda cfg, v: setattr(cfg.train.augment, name, parse(v))


_KEY_SETTERS = {
    # synthetic orchard
    "trees_per_tile": _orchard("trees_per_tile"),
    "fruits_per_tree": _orchard("fruits_per_tree"),
    "tile_extent": _orchard("tile_extent"),
    "ground_roughness": _orchard("ground_roughness"),
    "trunk_radius_range": _orchard("trunk_radius_range", _parse_range),
    "trunk_height_range": _orchard("trunk_height_range", _parse_range),
    "canopy_radius_xy_range": _orchard("canopy_radius_xy_range", _parse_range),
    "canopy_radius_z_range": _orchard("canopy_radius_z_range", _parse_range),
    "apple_radius_range": _orchard("apple_radius_range", _parse_range),
    "poles_per_tile": _orchard("poles_per_tile", int),
    "ground_points": _orchard("ground_points", int),
    "trunk_points": _orchard("trunk_points", int),
    "canopy_points": _orchard("canopy_points", int),
    "apple_points": _orchard("apple_points", int),
    "pole_points": _orchard("pole_points", int),
    "color_noise_sigma": _orchard("color_noise_sigma"),
    "sensor_noise_sigma": _orchard("sensor_noise_sigma"),
    # optimization
    "lr": _train("lr"),
    "weight_decay": _train("weight_decay"),
    "beta1": _train("beta1"),
    "beta2": _train("beta2"),
    "adam_eps": _train("eps"),
    "epochs": _train("epochs", int),
    "seed": _train("seed", int),
    "voxel_size": _train("voxel_size"),
    "encoder_channels": _train("encoder_channels", _parse_ints),
    "decoder_channels": _train("decoder_channels", _parse_ints),
    "skip_scheme": _train("skip_scheme", str),
    "eval_every": _train("eval_every", int),
    "grad_clip": _train("grad_clip"),
    # losses
    "w_semantic": _loss("w_semantic"),
    "w_tree": _loss("w_tree"),
    "w_instance": _loss("w_instance"),
    "eta_tree": _loss("eta_tree"),
    "eta_instance": _loss("eta_instance"),
    "centroid_mode": _loss("centroid_mode", str),
    # augmentation
    "augment_scale": _augment("scale", _parse_bool),
    "scale_range": _augment("scale_range", _parse_range),
    "augment_rotation": _augment("rotation", _parse_bool),
    "max_tilt": _augment("max_tilt"),
    "augment_shear": _augment("shear", _parse_bool),
    "shear_range": _augment("shear_range", _parse_range),
    "augment_elastic": _augment("elastic", _parse_bool),
    "elastic_spacing": _augment("elastic_spacing"),
    "elastic_sigma": _augment("elastic_sigma"),
    "augment_color": _augment("color_jitter", _parse_bool),
    "color_sigma": _augment("color_sigma"),
    # clustering
    "tree_min_cluster_size": lambda c, v: setattr(c.train.cluster_tree, "min_cluster_size", int(v)),
    "tree_min_samples": lambda c, v: setattr(c.train.cluster_tree, "min_samples", int(v)),
    "instance_min_cluster_size": lambda c, v: setattr(
        c.train.cluster_instance, "min_cluster_size", int(v)
    ),
    "instance_min_samples": lambda c, v: setattr(
        c.train.cluster_instance, "min_samples", int(v)
    ),
}


def parse_config_text(text: str) -> list:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got '{raw}'")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    return pairs


def apply_settings(config: RunConfig, pairs) -> RunConfig:
    for key, val in pairs:
        setter = _KEY_SETTERS.get(key)
        if setter is None:
            raise ValueError(f"unknown config key '{key}'")
        setter(config, val)
    return config


def load_run_config(config_path, overrides) -> RunConfig:
    config = RunConfig()
    if config_path:
        apply_settings(config, parse_config_text(Path(config_path).read_text()))
    apply_settings(config, [tuple(s.split("=", 1)) for s in overrides])
    return config


def max_workers() -> int:
    return max(1, int(os.environ.get("HAPT3D_THREADS", "1")))


def _load_tiles(directory) -> list:
    directory = Path(directory)
    files = sorted(directory.glob("*.ply"))
    if not files:
        raise ValueError(f"no .ply tiles in {directory}")
    return [(f.name, load_ply(f)) for f in files]


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    config = load_run_config(args.config, args.set)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"{out} is not empty; pass --force to write anyway")
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    total = {"points": 0, "trunks": 0, "fruits": 0}
    for i in range(args.tiles):
        tile_cfg = OrchardConfig(**{**config.orchard.__dict__, "rng_seed": args.seed * 1000 + i})
        cloud = generate_orchard(tile_cfg)
        name = f"tile_{i:04d}.ply"
        save_ply(cloud, out / name)
        stats = cloud_stats(cloud)
        lines.append(
            f"tile={name} points={stats['points']} trunks={stats['trunks']} "
            f"fruits={stats['fruits']} fruits_per_tree={stats['fruits_per_tree']:.4f}"
        )
        for key in total:
            total[key] += stats[key]
    mean_fpt = total["fruits"] / total["trunks"] if total["trunks"] else 0.0
    lines.append(
        f"tiles={args.tiles} total_points={total['points']} total_trunks={total['trunks']} "
        f"total_fruits={total['fruits']} mean_fruits_per_tree={mean_fpt:.4f}"
    )
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.tiles} tiles to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.scheme:
        config.train.skip_scheme = args.scheme
    train_clouds = [c for _, c in _load_tiles(args.data)]
    val_clouds = [c for _, c in _load_tiles(args.val)] if args.val else []
    result = train(train_clouds, val_clouds, config.train)
    best = result.best_network()
    save_checkpoint(best, args.out)
    Path(str(args.out) + ".history").write_text("\n".join(history_lines(result.history)) + "\n")
    if result.aborted:
        print("training aborted on divergence; saved the last good parameters")
        return 2
    if val_clouds:
        report = evaluate(best, val_clouds, config.train)
        print(report.as_table())
    print(f"checkpoint written to {args.out}")
    return 0


def _prediction_cloud(cloud: LabeledCloud, pred: InstancePrediction) -> LabeledCloud:
    return LabeledCloud(
        positions=cloud.positions,
        colors=cloud.colors,
        semantic=pred.semantic,
        tree_id=pred.tree_label,
        instance_id=pred.instance_label,
    )


def cmd_predict(args) -> int:
    config = load_run_config(args.config, args.set)
    net = load_checkpoint(args.ckpt).eval_mode()
    cloud = load_ply(args.input, strict=False)
    out = net.forward(cloud)
    pred = predict_instances(out, cloud, config.train.cluster_tree,
                             config.train.cluster_instance)
    save_ply(_prediction_cloud(cloud, pred), args.out, strict=False)
    print(f"prediction written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_tiles = dict(_load_tiles_relaxed(args.pred))
    gt_tiles = dict(_load_tiles(args.gt))
    names = sorted(gt_tiles)
    missing = [n for n in names if n not in pred_tiles]
    if missing:
        raise ValueError(f"missing predictions for {missing}")

    def one(name):
        pred_cloud = pred_tiles[name]
        gt = gt_tiles[name]
        acc = EvalAccumulator()
        acc.add_cloud(
            InstancePrediction(pred_cloud.semantic, pred_cloud.tree_id,
                               pred_cloud.instance_id),
            gt,
        )
        return acc

    workers = max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(one, names))
    else:
        partials = [one(n) for n in names]
    acc = EvalAccumulator()
    for part in partials:  # merge in tile-name order
        acc.merge(part)
    report = acc.report()
    print(report.as_table())
    out = Path(args.out) if args.out else Path(args.pred) / "report.kv"
    out.write_text(report.as_keyvalues())
    print(f"report written to {out}")
    return 0


def _load_tiles_relaxed(directory) -> list:
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise ValueError(f"no .ply tiles in {directory}")
    return [(f.name, load_ply(f, strict=False)) for f in files]


def cmd_ablate(args) -> int:
    config = load_run_config(args.config, args.set)
    train_clouds = [c for _, c in _load_tiles(args.data)]
    val_clouds = [c for _, c in _load_tiles(args.val)]
    rows = ablate(train_clouds, val_clouds, config.train)
    table = ablation_table(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n")
    kv = []
    for letter, row in zip("ABCD", rows):
        for key in ("miou", "pq", "pq_t", "mpq"):
            kv.append(f"{letter}.{key} = {row[key]:.6f}")
    (out / "ablation.kv").write_text("\n".join(kv) + "\n")
    print(f"ablation report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hapt3d",
        description="Hierarchical panoptic segmentation of orchard point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (last one wins)")

    p = sub.add_parser("gen", parents=[common], help="generate synthetic orchard tiles")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tiles", type=int, required=True, help="number of tiles")
    p.add_argument("--seed", type=int, default=0, help="base seed; tile i uses seed*1000+i")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train on PLY tiles")
    p.add_argument("--data", required=True, help="directory of training tiles")
    p.add_argument("--val", help="directory of validation tiles")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--scheme", choices=list("ABCD") + ["None", "Decoder", "Encoder",
                                                       "EncoderDecoder"],
                   help="skip-connection scheme")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="run inference on one PLY")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="input PLY")
    p.add_argument("--out", required=True, help="output prediction PLY")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of prediction PLYs")
    p.add_argument("--gt", required=True, help="directory of ground-truth PLYs")
    p.add_argument("--out", help="key=value report path (default: PRED/report.kv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the four-scheme ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, CloudValidationError, PlyFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
