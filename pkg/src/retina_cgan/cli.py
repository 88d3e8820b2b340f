"""Command-line entry point: preprocess, train, evaluate, infer, plot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import ExperimentConfig, dump_config, load_config
from .dataset import Sample, SplitManifest, list_idrid, load_pair, read_rgb, split_train_val
from .errors import ConfigError, DataError, NumericalError, PreprocessError
from .evaluation import MetricsReport, evaluate_model, plot_curves, predict_full_image, read_pr_csv, render_pr_plot
from .models import build_discriminator, build_from_spec, build_generator, build_unet
from .preprocess import DatasetStats, PreprocessCache, compute_dataset_stats, enhance, normalize_channels
from .training import fit, load_checkpoint

logger = logging.getLogger("retina_cgan")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def cache_root(cfg: ExperimentConfig):
    return Path(cfg.dataset.cache_dir) / cfg.lesion


def _limit(pairs, n):
    return pairs[:n] if n else pairs


def cmd_preprocess(cfg: ExperimentConfig, out_dir=None, limit_images=0):
    """Enhance every image once and cache it with its mask; returns counters.

    Also writes ``manifest.json`` (train/val/test ids) and ``stats.json``
    (brightness target from the manifest's training ids only). Entries whose
    recorded digest matches the current preprocessing config are skipped.
    """
    out = Path(out_dir) if out_dir is not None else cache_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    train_pairs = _limit(list_idrid(ds.root, cfg.lesion, "train", ds), limit_images)
    test_pairs = _limit(list_idrid(ds.root, cfg.lesion, "test", ds), limit_images)
    manifest = split_train_val([p[0] for p in train_pairs], ds.train_ratio, cfg.seed, cfg.lesion,
                               test_ids=[p[0] for p in test_pairs])
    manifest.save(out / "manifest.json")

    stats_path = out / "stats.json"
    stats = None
    if stats_path.exists():
        saved = json.loads(stats_path.read_text())
        if sorted(saved.get("train_ids", [])) == sorted(manifest.train_ids):
            stats = DatasetStats.from_dict(saved)
    if stats is None:
        by_id = {p[0]: p for p in train_pairs}
        stats = compute_dataset_stats(read_rgb(by_id[i][1]) for i in manifest.train_ids)
        stats_path.write_text(json.dumps({**stats.to_dict(), "train_ids": sorted(manifest.train_ids)}, indent=2))

    cache = PreprocessCache(out, cfg.preprocess.digest(stats))
    counts = {"computed": 0, "skipped": 0}
    for split, pairs in (("train", train_pairs), ("test", test_pairs)):
        for sid, image_path, mask_path in pairs:
            if cache.has(split, sid):
                counts["skipped"] += 1
                continue
            sample = load_pair(sid, image_path, mask_path, cfg.lesion_type)
            cache.put(split, sid, enhance(sample.image, stats, cfg.preprocess), sample.mask)
            counts["computed"] += 1
    logger.info("preprocess: %s into %s", counts, out)
    return counts


def load_prepared(cfg: ExperimentConfig, cache_dir=None):
    """Return ``(manifest, stats, cache)`` for an already preprocessed corpus."""
    root = Path(cache_dir) if cache_dir is not None else cache_root(cfg)
    if not (root / "manifest.json").exists() or not (root / "stats.json").exists():
        raise DataError(f"no preprocessed corpus at {root}; run the preprocess command first")
    manifest = SplitManifest.load(root / "manifest.json")
    stats = DatasetStats.from_dict(json.loads((root / "stats.json").read_text()))
    return manifest, stats, PreprocessCache(root, cfg.preprocess.digest(stats))


def load_samples(cache: PreprocessCache, split, ids, lesion):
    samples = []
    for sid in ids:
        if not cache.has(split, sid):
            raise DataError(f"{sid} missing or stale in cache {cache.root}; rerun preprocess")
        image, mask = cache.get(split, sid)
        samples.append(Sample(image, mask, sid, lesion))
    return samples


def build_models(cfg: ExperimentConfig):
    torch.manual_seed(cfg.seed)
    name = cfg.model.name
    if name == "unet":
        return build_unet(cfg.model.base_width), None
    gen = build_generator(cfg.model.generator_config())
    disc = build_discriminator(cfg.model.discriminator_config(cfg.lesion)) if name == "hednet_cgan" else None
    return gen, disc


def cmd_train(cfg: ExperimentConfig, resume=False, limit_images=0):
    """Train per config; ``hednet`` and ``unet`` run without discriminator (lambda_gan forced to 0)."""
    if cfg.model.name != "hednet_cgan":
        cfg.loss.lambda_gan = 0.0
        cfg.train.loss = cfg.loss
    root = cache_root(cfg)
    if not (root / "manifest.json").exists():
        cmd_preprocess(cfg, limit_images=limit_images)
    manifest, stats, cache = load_prepared(cfg)
    train_ids = _limit(manifest.train_ids, limit_images)
    val_ids = _limit(manifest.val_ids, limit_images)
    train = load_samples(cache, "train", train_ids, cfg.lesion_type)
    val = load_samples(cache, "train", val_ids, cfg.lesion_type)

    run_dir = Path(cfg.runs_dir) / cfg.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.toml")
    shutil.copyfile(root / "manifest.json", run_dir / "manifest.json")

    gen, disc = build_models(cfg)
    state = fit(
        cfg.train, train, val, generator=gen, discriminator=disc, stats=stats,
        crop_size=cfg.dataset.crop_size, max_rotation=cfg.dataset.max_rotation,
        crop_foreground_prob=cfg.dataset.crop_foreground_prob, eval_config=cfg.eval,
        run_dir=run_dir, manifest=run_dir / "manifest.json", config_hash=cfg.model_digest(), resume=resume,
    )
    for name in ("ckpt_latest", "ckpt_best"):
        p = run_dir / name
        if p.exists():
            ckpt = torch.load(p, map_location="cpu", weights_only=False)
            ckpt["model_name"] = cfg.model.name
            ckpt["lesion"] = cfg.lesion
            torch.save(ckpt, p)
    logger.info("finished at epoch %d, best validation AP %.4f", state.epoch, state.best_val_ap)
    return run_dir


def _load_generator(path, cfg: ExperimentConfig, force=False):
    ckpt = load_checkpoint(path)
    if ckpt.get("config_hash") != cfg.model_digest() and not force:
        raise ConfigError(
            f"{path}: checkpoint config hash {ckpt.get('config_hash')!r} does not match "
            f"{cfg.model_digest()!r}; pass --force to evaluate anyway"
        )
    gen, _ = build_from_spec(ckpt["model_spec"])
    gen.load_state_dict(ckpt["generator"])
    gen.eval()
    return gen, ckpt


def cmd_evaluate(cfg: ExperimentConfig, checkpoints, split="test", out_dir=None, force=False, limit_images=0):
    manifest, stats, cache = load_prepared(cfg)
    ids = {"test": manifest.test_ids, "val": manifest.val_ids, "train": manifest.train_ids}[split]
    samples = load_samples(cache, "test" if split == "test" else "train", _limit(ids, limit_images),
                           cfg.lesion_type)
    out = Path(out_dir) if out_dir is not None else Path(cfg.runs_dir) / cfg.run_name / "eval"
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.model_digest()
    reports = []
    for path in checkpoints:
        gen, ckpt = _load_generator(path, cfg, force)
        name = ckpt.get("model_name") or ckpt["model_spec"]["generator"]["name"]
        report = evaluate_model(
            gen, samples, cfg.eval.threshold, stats=stats, tile=cfg.eval.tile, stride=cfg.eval.stride,
            model_name=name, lesion=cfg.lesion, max_pr_points=cfg.eval.max_pr_points,
            config_hash=ckpt.get("config_hash", ""),
        )
        report.to_json(out / f"report_{name}_{cfg.lesion}_{split}_{digest}.json")
        reports.append(report)
        logger.info("%s %s %s: AP=%.4f F1=%.4f", name, cfg.lesion, split, report.ap, report.f1)
    render_pr_plot(reports, out, stem=f"pr_{cfg.lesion}_{split}_{digest}")
    return reports


def cmd_infer(cfg: ExperimentConfig, checkpoint, image_path, out_path, force=False, alpha=0.5):
    """Write a 16-bit probability map to ``out_path`` and a heat-map overlay next to it."""
    gen, ckpt = _load_generator(checkpoint, cfg, force)
    if ckpt.get("stats"):
        stats = DatasetStats.from_dict(ckpt["stats"])
    else:
        stats = load_prepared(cfg)[1]
    raw = read_rgb(image_path)
    pixels = normalize_channels(enhance(raw, stats, cfg.preprocess), stats)
    prob = predict_full_image(gen, pixels, cfg.eval.tile, cfg.eval.stride, stats.black())
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() not in (".png", ".tif", ".tiff"):
        out_path = out_path.with_suffix(".png")
    if not cv2.imwrite(str(out_path), np.rint(prob * 65535).astype(np.uint16)):
        raise OSError(f"cannot write {out_path}")
    heat = cv2.cvtColor(cv2.applyColorMap(np.rint(prob * 255).astype(np.uint8), cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)
    weight = (alpha * prob)[..., None]
    overlay = np.rint(raw * (1 - weight) + heat * weight).astype(np.uint8)
    overlay_path = out_path.with_name(out_path.stem + "_overlay.png")
    cv2.imwrite(str(overlay_path), cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
    return out_path, overlay_path


def cmd_plot(reports=(), csv_path=None, out_dir="plots", stem="pr"):
    if csv_path:
        return plot_curves(read_pr_csv(csv_path), out_dir, stem)
    loaded = [MetricsReport.from_json(p) for p in reports]
    if not loaded:
        raise DataError("nothing to plot: pass report JSON files or --csv")
    return render_pr_plot(loaded, out_dir, stem)[0]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file (defaults built in)")
    common.add_argument("--seed", type=int)
    common.add_argument("--run-name")
    common.add_argument("--lesion", choices=["MA", "SE", "EX", "HE"])
    common.add_argument("--limit-images", type=int, default=0, help="use only the first N images per split")
    common.add_argument("--epochs", type=int)
    common.add_argument("--threshold", type=float, help="F1 binarization threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="retina-cgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="enhance and cache the corpus")
    p.add_argument("--out-dir")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--model", choices=["hednet_cgan", "hednet", "unet"])
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="AP / F1 / PR curves for checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--split", choices=["test", "val", "train"], default="test")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="probability map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("plot", parents=[common], help="PR plots from report JSONs or a curve CSV")
    p.add_argument("reports", nargs="*")
    p.add_argument("--csv")
    p.add_argument("--out-dir", default="plots")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.run_name:
        cfg.run_name = args.run_name
    if args.lesion:
        cfg.lesion = args.lesion
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.threshold is not None:
        cfg.eval.threshold = args.threshold
    if getattr(args, "model", None):
        cfg.model.name = args.model
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            for path in cmd_plot(args.reports, args.csv, args.out_dir):
                print(path)
            return 0
        cfg = resolve_config(args)
        if args.command == "preprocess":
            print(json.dumps(cmd_preprocess(cfg, args.out_dir, args.limit_images)))
        elif args.command == "train":
            print(cmd_train(cfg, args.resume, args.limit_images))
        elif args.command == "evaluate":
            for r in cmd_evaluate(cfg, args.checkpoint, args.split, args.out_dir, args.force, args.limit_images):
                print(f"{r.model_name}\t{r.lesion}\tAP={r.ap:.4f}\tF1={r.f1:.4f}")
        elif args.command == "infer":
            for path in cmd_infer(cfg, args.checkpoint, args.image, args.out, args.force):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PreprocessError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
