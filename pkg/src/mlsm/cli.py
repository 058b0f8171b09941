"""``mlsm`` command-line entry point.

Pipeline: prepare -> train-localizer -> localize -> train -> eval / ablation.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import ConfigError, dump_config, load_config, train_config_values
from .data import (
    IMAGE_EXTENSIONS,
    DatasetError,
    DatasetIndex,
    build_index,
    compute_norm_stats,
    load_image,
    normalize,
)
from .engine import (
    ABLATION_ORDER,
    SHOTS,
    TrainConfig,
    ablation_grid,
    cell_dir,
    evaluate,
    load_model,
    set_deterministic,
    train,
    train_ablation_grid,
)
from .localizer import (
    BaseClassifier,
    CropCacheMismatch,
    CropStore,
    crop_path,
    gradcam,
    index_items,
    localize_images,
    overlay,
    pick_class_for_novel,
    train_base_classifier,
)

log = logging.getLogger("mlsm")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="YAML file of flat dotted config keys")
    p.add_argument("--seed", type=int, help="master seed (config key: seed)")
    p.add_argument("--workers", type=int, help="cap on data-pipeline parallelism")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="pin all work to one thread with seeded generators")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow overwriting existing outputs")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser():
    ap = Parser(prog="mlsm", description="Multi-level similarity few-shot recognition.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("prepare", help="index a dataset and split its classes")
    _common(p)
    p.add_argument("--root", type=Path, help="dataset root laid out as <class>/<image>")
    p.add_argument("--split-seed", type=int, help="seed of the class split")
    p.add_argument("--image-size", type=int, help="side of the square model input")

    p = sub.add_parser("train-localizer", help="train the base classifier used for Grad-CAM")
    _common(p)
    p.add_argument("--index", type=Path, required=True, help="index.tsv written by prepare")
    p.add_argument("--steps", type=int, help="optimizer steps")

    p = sub.add_parser("localize", help="extract Grad-CAM object crops")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="base classifier checkpoint")
    p.add_argument("--images", type=Path, required=True, help="image directory (dataset root)")
    p.add_argument("--index", type=Path,
                   help="index.tsv; base-split images then use their true class")
    p.add_argument("--threshold", type=float, help="crop threshold as a fraction of the max")
    p.add_argument("--overlay", action="store_true", help="also write heatmap composites")

    p = sub.add_parser("train", help="episodic training")
    _common(p)
    p.add_argument("--index", type=Path, required=True, help="index.tsv written by prepare")
    p.add_argument("--crops", type=Path, help="crop directory from localize")
    p.add_argument("--ablation", choices=ABLATION_ORDER, help="levels to fuse")
    p.add_argument("--way", type=int, help="classes per episode (C)")
    p.add_argument("--shot", type=int, help="support images per class (K)")
    p.add_argument("--queries", type=int, help="queries per training episode (total)")
    p.add_argument("--episodes", type=int, help="number of training episodes")
    p.add_argument("--lenient-crops", action="store_true",
                   help="fall back to the full image when a crop is missing")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")

    p = sub.add_parser("eval", help="evaluate a checkpoint over random episodes")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint from train")
    p.add_argument("--index", type=Path, required=True, help="index.tsv written by prepare")
    p.add_argument("--crops", type=Path, help="crop directory from localize")
    p.add_argument("--split", choices=["base", "val", "novel"], help="split to sample episodes from")
    p.add_argument("--way", type=int, help="classes per episode (C)")
    p.add_argument("--shot", type=int, help="support images per class (K)")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--queries", type=int, help="queries per evaluation episode (total)")
    p.add_argument("--lenient-crops", action="store_true",
                   help="fall back to the full image when a crop is missing")

    p = sub.add_parser("ablation", help="evaluate the I / I+G / I+G+O x 1/5-shot grid")
    _common(p)
    p.add_argument("--index", type=Path, required=True, help="index.tsv written by prepare")
    p.add_argument("--crops", type=Path, help="crop directory from localize")
    p.add_argument("--runs", type=Path, required=True, help="directory holding one run per cell")
    p.add_argument("--train", action="store_true", help="train missing cells first")
    p.add_argument("--train-episodes", type=int, help="training episodes per cell")
    p.add_argument("--episodes", type=int, help="evaluation episodes per cell")
    p.add_argument("--queries", type=int, help="queries per evaluation episode (total)")

    p = sub.add_parser("overlay", help="write heatmap-over-image composites")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="base classifier checkpoint")
    p.add_argument("--images", type=Path, required=True, help="directory of images")
    p.add_argument("--threshold", type=float, help="crop threshold as a fraction of the max")
    return ap


def _resolve(args, extra=None):
    overrides = {"seed": args.seed, "workers": args.workers, "deterministic": args.deterministic}
    overrides.update(extra or {})
    cfg = load_config(args.config, overrides)
    if cfg["deterministic"]:
        cfg["workers"] = 1
    return cfg


def _claim_out(out: Path, force: bool, marker: str):
    if (out / marker).exists() and not force:
        raise UsageError(f"{out / marker} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _need(path: Path, what: str, hint: str):
    if path is None or not Path(path).exists():
        raise UsageError(f"missing {what}: {path} ({hint})")


def _load_index(path):
    _need(path, "index", "run `mlsm prepare` first")
    return DatasetIndex.load(path)


def cmd_prepare(args):
    cfg = _resolve(args, {"data.root": args.root and str(args.root),
                          "data.split_seed": args.split_seed, "data.image_size": args.image_size})
    if not cfg["data.root"]:
        raise UsageError("no dataset root: pass --root or set data.root")
    index = build_index(cfg["data.root"], cfg["data.split_seed"], cfg["data.split_fractions"],
                        cfg["data.image_size"])
    index.mean, index.std = compute_norm_stats(index, cfg["workers"])
    out = args.out
    files = {"index.tsv": index.to_tsv(), "index.meta.json": index.meta_json(),
             "config.yaml": dump_config(cfg)}
    differing = [n for n in files if (out / n).exists() and (out / n).read_text() != files[n]]
    if differing and not args.force:
        raise UsageError(f"{out} holds a different index ({', '.join(differing)}); "
                         "pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        # identical files are left untouched so repeated runs are no-ops
        if not (out / name).exists() or name in differing:
            ckpt_io.atomic_write_text(out / name, text)
    print(index.summary())
    return 0


def cmd_train_localizer(args):
    cfg = _resolve(args, {"localizer.steps": args.steps})
    index = _load_index(args.index)
    _claim_out(args.out, args.force, "classifier.pt")
    set_deterministic(cfg["seed"], cfg["deterministic"])
    result = train_base_classifier(
        index, cfg["localizer.steps"], cfg["localizer.batch_size"], cfg["localizer.lr"],
        cfg["seed"], checkpoint_path=args.out / "classifier.pt", workers=cfg["workers"],
    )
    ckpt_io.atomic_write_text(args.out / "config.yaml", dump_config(cfg))
    print(f"base classifier: {result.model.num_classes} classes, "
          f"train accuracy {result.train_accuracy:.4f}, final loss {result.loss_trace[-1]:.4f}"
          if result.loss_trace else "base classifier: untrained")
    return 0


def _image_items(images_dir: Path):
    return sorted(p.relative_to(images_dir).as_posix() for p in images_dir.rglob("*")
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def cmd_localize(args):
    cfg = _resolve(args, {"localizer.threshold": args.threshold})
    _need(args.checkpoint, "classifier checkpoint", "run `mlsm train-localizer` first")
    _need(args.images, "image directory", "point --images at the dataset root")
    classifier = BaseClassifier.from_checkpoint(args.checkpoint)
    if args.index is not None:
        items = index_items(_load_index(args.index), classifier)
    else:
        items = [(rel, None) for rel in _image_items(args.images)]
    overlay_dir = args.out / "overlays" if args.overlay else None
    try:
        n = localize_images(classifier, args.images, items, args.out, cfg["localizer.threshold"],
                            overlay_dir=overlay_dir, force=args.force)
    except CropCacheMismatch as exc:
        raise UsageError(str(exc)) from exc
    ckpt_io.atomic_write_text(args.out / "config.yaml", dump_config(cfg))
    print(f"crops written: {n} (of {len(items)} images)")
    return 0


def _train_config(cfg):
    try:
        return TrainConfig.from_dict(train_config_values(cfg))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def cmd_train(args):
    cfg = _resolve(args, {
        "train.ablation": args.ablation, "train.c_way": args.way, "train.k_shot": args.shot,
        "train.n_query": args.queries, "train.max_episodes": args.episodes,
        "train.strict_crops": False if args.lenient_crops else None,
    })
    index = _load_index(args.index)
    tcfg = _train_config(cfg)
    if tcfg.ablation_mode == "I+G+O" and tcfg.strict_crops:
        _need(args.crops, "crop directory", "run `mlsm localize` or pass --lenient-crops")
    if not args.resume:
        _claim_out(args.out, args.force, "last.pt")
    ckpt_io.atomic_write_text(args.out / "config.yaml", dump_config(cfg))
    result = train(tcfg, index, args.crops, args.out, resume=args.resume)
    best = "n/a" if result.best_val_acc is None else f"{result.best_val_acc:.4f}"
    print(f"trained {result.episodes} episodes; best val acc {best}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args):
    cfg = _resolve(args, {
        "eval.split": args.split, "eval.c_way": args.way, "eval.k_shot": args.shot,
        "eval.n_episodes": args.episodes, "eval.n_query": args.queries,
        "train.strict_crops": False if args.lenient_crops else None,
    })
    _need(args.checkpoint, "checkpoint", "run `mlsm train` first")
    index = _load_index(args.index)
    _claim_out(args.out, args.force, "report.txt")
    set_deterministic(cfg["seed"], cfg["deterministic"])
    model, _ = load_model(args.checkpoint)
    crops = None
    if model.uses_crops:
        if cfg["train.strict_crops"]:
            _need(args.crops, "crop directory", "run `mlsm localize` or pass --lenient-crops")
        crops = CropStore(args.crops, index.root, cfg["train.strict_crops"])
    report = evaluate(model, index, cfg["eval.split"], cfg["eval.n_episodes"], cfg["eval.c_way"],
                      cfg["eval.k_shot"], cfg["eval.n_query"], cfg["seed"], crops)
    report.save(args.out / "report.txt")
    ckpt_io.atomic_write_text(args.out / "config.yaml", dump_config(cfg))
    print(f"{report.c_way}-way {report.k_shot}-shot over {report.n_episodes} episodes: "
          f"{100 * report.mean_acc:.2f}% ± {100 * report.ci95:.2f}")
    return 0


def cmd_ablation(args):
    cfg = _resolve(args, {"train.max_episodes": args.train_episodes,
                          "eval.n_episodes": args.episodes, "eval.n_query": args.queries})
    index = _load_index(args.index)
    _claim_out(args.out, args.force, "ablation.txt")
    if args.train:
        checkpoints = train_ablation_grid(_train_config(cfg), index, args.crops, args.runs)
    else:
        checkpoints = {}
        for mode in ABLATION_ORDER:
            for k in SHOTS:
                run = cell_dir(args.runs, mode, k)
                best = run / "best.pt"
                checkpoints[(mode, k)] = best if best.is_file() else run / "last.pt"
                _need(checkpoints[(mode, k)], f"checkpoint for cell {mode} {k}-shot",
                      "train it with `mlsm train --ablation` or pass --train")
    table = ablation_grid(checkpoints, index, args.crops, cfg["eval.split"], cfg["eval.n_episodes"],
                          cfg["eval.c_way"], cfg["eval.n_query"], cfg["seed"],
                          cfg["train.strict_crops"])
    for (mode, k), rep in table.reports.items():
        rep.save(args.out / f"report_{mode.replace('+', '_')}_{k}shot.txt")
    text = table.render()
    ckpt_io.atomic_write_text(args.out / "ablation.txt", text)
    ckpt_io.atomic_write_text(args.out / "config.yaml", dump_config(cfg))
    print(text, end="")
    return 0


def cmd_overlay(args):
    cfg = _resolve(args, {"localizer.threshold": args.threshold})
    _need(args.checkpoint, "classifier checkpoint", "run `mlsm train-localizer` first")
    _need(args.images, "image directory", "point --images at a directory of images")
    rels = _image_items(args.images)
    if any(crop_path(args.out, r).exists() for r in rels) and not args.force:
        raise UsageError(f"{args.out} already holds composites; pass --force to overwrite")
    classifier = BaseClassifier.from_checkpoint(args.checkpoint)
    for rel in rels:
        raw = load_image(args.images / rel, classifier.image_size)
        img = normalize(raw, classifier.mean, classifier.std)
        heat = gradcam(classifier, img, pick_class_for_novel(classifier, img))
        target = crop_path(args.out, rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        overlay(raw, heat, cfg["localizer.threshold"]).save(target)
    print(f"composites written: {len(rels)}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train-localizer": cmd_train_localizer,
    "localize": cmd_localize,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "overlay": cmd_overlay,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"mlsm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError, ckpt_io.CheckpointMismatch, FloatingPointError,
            ValueError, RuntimeError, OSError) as exc:
        print(f"mlsm {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
