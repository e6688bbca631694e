"""Command-line front end: synth, train, eval, infer, ablate, pr-plot.

Configuration layering: built-in defaults, then a JSON config file
(``--config``), then explicit flags; flags win. Every command validates its
full configuration before touching the filesystem. Exit codes: 0 success,
1 usage or configuration error, 2 I/O error, 3 numerical abort.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .core import (
    ChangeMask,
    ConfigError,
    DatasetError,
    ImagePair,
    ShapeError,
    dataset_digest,
    load_dataset,
    read_image_file,
    save_dataset,
    write_mask_file,
)
from .evalkit import (
    EvalConfig,
    binarize,
    evaluate,
    pr_auc,
    pr_curve,
    production_min_area,
    regions_of_mask,
)
from .net import (
    BackboneSpec,
    ChangeModel,
    CheckpointError,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .objective import LossConfig, PolySchedule
from .synthlab import SynthConfig, generate_asset_pools, synth_dataset
from .trainer import (
    ABLATION_AXES,
    TrainConfig,
    TrainingAborted,
    build_and_train,
    run_ablation,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors, not I/O
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


# --- config layering -----------------------------------------------------


def _load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise DatasetError(f"missing config file: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"unparseable config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _make(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} option(s): {', '.join(unknown)}")
    return cls(**d)


def _apply_flags(obj, **overrides):
    for key, value in overrides.items():
        if value is not None:
            setattr(obj, key, value)
    return obj


def _synth_config(doc: dict, args) -> SynthConfig:
    cfg = _make(SynthConfig, _section(doc, "synth"))
    _apply_flags(
        cfg,
        paste_rate=getattr(args, "paste_rate", None),
        shadow_probability=getattr(args, "shadow_prob", None),
        photometric_severity=getattr(args, "severity", None),
        rng_seed=args.seed,
    )
    return cfg


def _train_config(doc: dict, args) -> TrainConfig:
    d = _section(doc, "train")
    for key, sub in (("loss", LossConfig), ("synth", SynthConfig), ("schedule", PolySchedule)):
        if key in d and isinstance(d[key], dict):
            d[key] = _make(sub, d[key])
    if "image_size" in d:
        d["image_size"] = tuple(int(v) for v in d["image_size"])
    cfg = _make(TrainConfig, d)
    _apply_flags(
        cfg,
        max_iter=getattr(args, "iters", None),
        batch_size=getattr(args, "batch", None),
        trainable_tail_k=getattr(args, "tail", None),
        rng_seed=args.seed,
    )
    if getattr(args, "size", None) is not None:
        cfg.image_size = tuple(args.size)
    if getattr(args, "loss", None) is not None:
        cfg.loss.mode = args.loss
    if getattr(args, "lr", None) is not None or getattr(args, "power", None) is not None:
        sched = cfg.schedule or cfg.resolved_schedule()
        _apply_flags(sched, base_lr=getattr(args, "lr", None), power=getattr(args, "power", None))
        cfg.schedule = sched
    if getattr(args, "tied", None) is not None:
        cfg.weight_tying = "tied" if args.tied else "untied"
    if getattr(args, "no_augment", False):
        cfg.augment = False
    return cfg


def _backbone_spec(doc: dict, args) -> BackboneSpec:
    d = _section(doc, "backbone")
    for key in ("widths", "strides", "kernel_sizes"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    if getattr(args, "tap", None) is not None:
        d["tap_layer"] = args.tap
    return _make(BackboneSpec, d)


def _eval_config(doc: dict, args) -> EvalConfig:
    cfg = _make(EvalConfig, _section(doc, "eval"))
    _apply_flags(
        cfg,
        binarize_threshold=getattr(args, "threshold", None),
        iou_tau=getattr(args, "tau", None),
        min_area=getattr(args, "min_area", None),
        match_mode=getattr(args, "match_mode", None),
        connectivity=getattr(args, "connectivity", None),
    )
    return cfg.validate()


# --- synth ----------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _load_config_file(args.config)
    cfg = _synth_config(doc, args).validate()
    if args.count < 0:
        raise ConfigError(f"count must be >= 0, got {args.count}")
    size = tuple(args.size)
    scenes, cutouts, shadows = generate_asset_pools(
        cfg.rng_seed, size,
        n_scenes=args.scenes, n_cutouts=args.cutout_pool,
        n_shadows=args.shadow_pool, cutout_range=tuple(args.cutout_size),
    )
    samples = synth_dataset(scenes, cutouts, shadows, cfg, args.count)
    save_dataset(samples, args.out, split=args.split)
    digest = dataset_digest(args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    print(f"digest {digest}")
    return EXIT_OK


# --- train ----------------------------------------------------------------


def cmd_train(args) -> int:
    doc = _load_config_file(args.config)
    cfg = _train_config(doc, args).validate()
    spec = _backbone_spec(doc, args)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    model, log = build_and_train(
        dataset, cfg, spec=spec, init_seed=cfg.rng_seed, log_path=log_path
    )
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt)
    log.checkpoint_path = ckpt
    if log.records:
        log.save(log_path)
        last = log.final
        print(
            f"trained {cfg.max_iter} iters; "
            f"final loss {last['loss_total']:.6f} "
            f"(bce {last['loss_bce']:.6f}, dice {last['loss_dice']:.6f})"
        )
    else:
        print("trained 0 iters; saved initial model")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------


def _write_report(path: str, report, cfg: EvalConfig):
    lines = [
        "# object-level evaluation",
        (
            f"# binarize_threshold={cfg.binarize_threshold} iou_tau={cfg.iou_tau} "
            f"min_area={cfg.min_area} match_mode={cfg.match_mode} "
            f"connectivity={cfg.connectivity}"
        ),
        "precision\trecall\tf1\ttp\tfp\tfn",
        (
            f"{report.precision:.6f}\t{report.recall:.6f}\t{report.f1:.6f}"
            f"\t{report.tp}\t{report.fp}\t{report.fn}"
        ),
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_points(path: str, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "recall"])
        for thr, precision, recall in points:
            w.writerow([f"{thr:.6f}", f"{precision:.6f}", f"{recall:.6f}"])


def cmd_eval(args) -> int:
    doc = _load_config_file(args.config)
    cfg = _eval_config(doc, args)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_report(os.path.join(args.out, "eval_report.tsv"), report, cfg)
    print(f"P={report.precision:.3f} R={report.recall:.3f} F1={report.f1:.3f}")
    if args.thresholds:
        points, auc = pr_curve(model, dataset, args.thresholds, cfg)
        points_path = os.path.join(args.out, "pr_points.csv")
        _write_points(points_path, points)
        print(f"AUC={auc:.4f} ({len(points)} points) {points_path}")
    return EXIT_OK


# --- infer ----------------------------------------------------------------


def cmd_infer(args) -> int:
    doc = _load_config_file(args.config)
    cfg = _eval_config(doc, args)
    model = load_checkpoint(args.checkpoint)
    t0 = read_image_file(args.t0)
    t1 = read_image_file(args.t1)
    if t0.shape != t1.shape:
        raise ShapeError(f"image sizes differ: {t0.shape[:2]} vs {t1.shape[:2]}")
    pair = ImagePair(t0=t0, t1=t1, scene_id="infer")
    prob = forward(model, pair)
    # unless the caller pinned min_area, drop regions below 0.05% of the image
    explicit = args.min_area is not None or "min_area" in _section(doc, "eval")
    min_area = cfg.min_area if explicit else production_min_area(t0.shape)
    post_cfg = dataclasses.replace(cfg, min_area=min_area)
    mask = binarize(prob, post_cfg.binarize_threshold)
    regions = regions_of_mask(mask, post_cfg, apply_min_area=True)

    # rebuild the mask from surviving regions so small blobs are dropped
    out = np.zeros(mask.data.shape, dtype=np.uint8)
    for region in regions:
        out[region.pixels[:, 0], region.pixels[:, 1]] = 1

    os.makedirs(args.out, exist_ok=True)
    mask_path = args.mask_out or os.path.join(args.out, "mask.png")
    write_mask_file(mask_path, ChangeMask(out))
    regions_path = os.path.splitext(mask_path)[0] + "_regions.csv"
    with open(regions_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["region", "area", "min_row", "min_col", "max_row", "max_col"])
        for i, region in enumerate(regions):
            w.writerow([i, region.area, *region.bbox])
    print(f"{len(regions)} region(s), {int(out.sum())} changed pixel(s)")
    print(f"mask {mask_path}")
    return EXIT_OK


# --- ablate ---------------------------------------------------------------


def _parse_ablation_values(axis: str, raw: str):
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError("ablation values list is empty")
    if axis in ("tap_layer", "trainable_tail"):
        return [int(v) for v in vals]
    if axis == "loss_mode":
        return vals
    out = []
    for v in vals:
        t = v.lower()
        if t in ("on", "true", "1", "yes"):
            out.append(True)
        elif t in ("off", "false", "0", "no"):
            out.append(False)
        else:
            out.append(float(v))
    return out


def cmd_ablate(args) -> int:
    doc = _load_config_file(args.config)
    cfg = _train_config(doc, args).validate()
    spec = _backbone_spec(doc, args)
    eval_cfg = _eval_config(doc, args)
    values = _parse_ablation_values(args.axis, args.values)
    train_data = load_dataset(args.data)
    test_data = load_dataset(args.test_data)
    rows = run_ablation(
        args.axis, values, train_data, test_data, cfg,
        spec=spec, eval_config=eval_cfg, init_seed=cfg.rng_seed,
    )
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, f"ablation_{args.axis}.tsv")
    header = "value\tprecision\trecall\tf1"
    lines = [header] + [
        f"{row['value']}\t{row['precision']:.6f}\t{row['recall']:.6f}\t{row['f1']:.6f}"
        for row in rows
    ]
    with open(table_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(header)
    for line in lines[1:]:
        print(line)
    print(f"table {table_path}")
    return EXIT_OK


# --- pr-plot --------------------------------------------------------------


def _read_points(path: str):
    if not os.path.exists(path):
        raise DatasetError(f"missing points file: {path}")
    points = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"empty points file: {path}") from None
        expect = ["threshold", "precision", "recall"]
        if [h.strip().lower() for h in header] != expect:
            raise DatasetError(f"bad header in {path}: expected {','.join(expect)}")
        for row in reader:
            if not row:
                continue
            try:
                thr, precision, recall = (float(v) for v in row[:3])
            except (ValueError, IndexError) as e:
                raise DatasetError(f"bad row in {path}: {row}") from e
            points.append((thr, precision, recall))
    if not points:
        raise DatasetError(f"no data rows in points file: {path}")
    return points


def cmd_pr_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = []
    for path in args.points:
        label = os.path.splitext(os.path.basename(path))[0]
        curves.append((label, _read_points(path)))

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for label, points in curves:
        order = sorted(points, key=lambda p: (p[2], p[1]))
        ax.plot(
            [p[2] for p in order],
            [p[1] for p in order],
            marker="o",
            markersize=3,
            label=label,
        )
        print(f"AUC {label} = {pr_auc(points):.4f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.05)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    out_image = args.out_image or os.path.join(args.out, "pr_curves.png")
    os.makedirs(os.path.dirname(os.path.abspath(out_image)), exist_ok=True)
    fig.savefig(out_image, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(f"plot {out_image}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int, default=None, help="master rng seed")
    common.add_argument("--out", default="out", help="output directory")

    train_common = argparse.ArgumentParser(add_help=False)
    train_common.add_argument("--iters", type=int, default=None, help="training iterations")
    train_common.add_argument("--batch", type=int, default=None)
    train_common.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None)
    train_common.add_argument("--loss", default=None, help="bce | dice | bce+dice")
    train_common.add_argument("--tail", type=int, default=None,
                              help="trainable encoder tail depth (0 freezes the encoder)")
    train_common.add_argument("--tied", type=_parse_bool, default=None,
                              help="share encoder weights between branches")
    train_common.add_argument("--tap", type=int, default=None, help="encoder tap layer")
    train_common.add_argument("--lr", type=float, default=None)
    train_common.add_argument("--power", type=float, default=None)
    train_common.add_argument("--no-augment", action="store_true")

    eval_common = argparse.ArgumentParser(add_help=False)
    eval_common.add_argument("--threshold", type=float, default=None,
                             help="binarization threshold")
    eval_common.add_argument("--tau", type=float, default=None, help="IoU match threshold")
    eval_common.add_argument("--min-area", type=int, default=None)
    eval_common.add_argument("--match-mode", choices=("iou_threshold", "any_overlap"),
                             default=None)
    eval_common.add_argument("--connectivity", type=int, choices=(4, 8), default=None)

    parser = _Parser(prog="changedet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="synthesize a labeled dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(128, 256))
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--scenes", type=int, default=8, help="background pool size")
    p.add_argument("--cutout-pool", type=int, default=16)
    p.add_argument("--shadow-pool", type=int, default=8)
    p.add_argument("--cutout-size", type=int, nargs=2, metavar=("LO", "HI"),
                   default=(14, 40))
    p.add_argument("--paste-rate", type=float, default=None)
    p.add_argument("--shadow-prob", type=float, default=None)
    p.add_argument("--severity", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, train_common], help="train a model")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, eval_common],
                       help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=None,
                   help="also sweep these binarization thresholds into pr_points.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common, eval_common],
                       help="predict a change mask for one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t0", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--mask-out", default=None, help="output mask path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[common, train_common, eval_common],
                       help="train once per axis value and tabulate metrics")
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--test-data", required=True, help="held-out dataset")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pr-plot", parents=[common],
                       help="overlay PR curves from points files")
    p.add_argument("points", nargs="+", help="pr_points.csv files")
    p.add_argument("--out-image", default=None)
    p.set_defaults(func=cmd_pr_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
