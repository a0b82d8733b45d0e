"""Command-line entry point: ``cfsg <command> ...``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import imaging, mapping, training
from . import network as net
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig, load_config, override
from .evaluation import ConfusionMatrix, report

log = logging.getLogger("cfsg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(Exception):
    pass


@contextlib.contextmanager
def staged_output(out_dir):
    """Collect outputs in a scratch dir and move them into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for item in sorted(stage.rglob("*")):
        target = out_dir / item.relative_to(stage)
        if item.is_dir():
            target.mkdir(exist_ok=True)
        else:
            os.replace(item, target)
    shutil.rmtree(stage, ignore_errors=True)


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _limit_threads():
    value = os.environ.get("CFSG_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


# ---------------------------------------------------------------------------
# datasets on disk


def read_dataset(directory) -> list[tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["samples"]
        pairs = [(directory / e["image"], directory / e["mask"]) for e in entries]
    else:
        images = sorted(directory.glob("image_*.png"))
        pairs = [(p, p.with_name(p.name.replace("image_", "mask_", 1))) for p in images]
    if not pairs:
        raise DataError(f"{directory}: no samples found")
    out = []
    for img_path, mask_path in pairs:
        if not mask_path.exists():
            raise DataError(f"{img_path}: missing mask {mask_path.name}")
        image, mask = imaging.load_image(img_path), imaging.load_mask(mask_path)
        if image.shape[:2] != mask.shape:
            raise DataError(f"{img_path}: image and mask dims differ")
        out.append((image, mask))
    return out


def tiles_from_scenes(scenes, params: imaging.PreprocessParams, seed: int):
    tiles = []
    for i, (image, mask) in enumerate(scenes):
        tiles += imaging.preprocess_field(image, mask, np.random.default_rng([seed, i]), params)
    return tiles


def deterministic_preprocess(image, mask, params: imaging.PreprocessParams):
    """Resize + smoothing + gamma without the random crop (evaluation path)."""
    h, w = image.shape[:2]
    ww, wh, sigma = imaging.preprocess_plan(w, h, params)
    img = imaging.gamma_correct(imaging.gaussian_blur(imaging.resize_bilinear(image, ww, wh), sigma), params.gamma)
    msk = imaging.resize_nearest(mask, ww, wh) if mask is not None else None
    return img, msk


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: PipelineConfig, out_dir, count: int) -> list[int]:
    seeds = [cfg.synthetic.base_seed + i for i in range(count)]
    with staged_output(out_dir) as stage:
        samples = []
        for i, seed in enumerate(seeds):
            image, mask = imaging.synth_scene(cfg.synthetic.scene.with_seed(seed))
            names = {"image": f"image_{i:04d}.png", "mask": f"mask_{i:04d}.png"}
            imaging.save_image(image, stage / names["image"])
            imaging.save_mask(mask, stage / names["mask"])
            samples.append({**names, "seed": seed})
        _write_json(stage / "manifest.json", {
            "scene": cfg.synthetic.scene.to_dict(), "samples": samples})
    return seeds


def cmd_train(cfg: PipelineConfig, train_dir, val_dir, out_checkpoint, history_path=None):
    scenes = read_dataset(train_dir)
    val_scenes = read_dataset(val_dir)
    seed = cfg.training.seed
    train_tiles = tiles_from_scenes(scenes, cfg.preprocessing, seed)
    val_tiles = tiles_from_scenes(val_scenes, cfg.preprocessing, seed + 1)
    out_checkpoint = Path(out_checkpoint)
    history_path = Path(history_path or out_checkpoint.with_suffix(".history.csv"))
    model, history = training.train(train_tiles, val_tiles, cfg.training, cfg.architecture)
    save_checkpoint(model, out_checkpoint)
    tmp = history_path.with_name(f".{history_path.name}.tmp")
    training.write_history_csv(history, tmp)
    os.replace(tmp, history_path)
    return model, history


def _predict_image(model, image, cfg: PipelineConfig, tile, overlap, use_crf):
    h, w = image.shape[:2]
    if tile is None and h % 32 == 0 and w % 32 == 0:
        # whole image in one pass
        probs = net.forward(model, image.transpose(2, 0, 1)[None].astype(np.float32), "infer").probabilities
        probs = probs[0].transpose(1, 2, 0)
        if use_crf:
            mask = crf_mod.refine(probs, image, cfg.crf, cfg.mapping.crf_radius)
        else:
            mask = probs.argmax(-1).astype(np.uint8)
        return mask, probs
    tile = tile or cfg.mapping.tile_size
    plan = mapping.plan_tiles(w, h, tile, overlap)
    return mapping.predict_roi(model, image, plan, cfg.crf if use_crf else None, cfg.mapping.crf_radius)


def write_mapping_outputs(stage: Path, mask, probs, cfg: PipelineConfig, grid_px: int, gsd: float) -> dict:
    imaging.save_mask(mask, stage / "mask.png")
    imaging.save_image(imaging.colorize(mask) / 255.0, stage / "map.png")
    np.save(stage / "probabilities.npy", probs)
    heat = mapping.weed_heatmap(mask, cfg.mapping.heatmap_sigma)
    imaging.save_gray(heat, stage / "heatmap.png")
    summary = {}
    try:
        pmap = mapping.prescription(mask, grid_px, cfg.mapping.min_weed_pixels)
    except ValueError as exc:
        summary["prescription_error"] = str(exc)
    else:
        cells = np.kron(pmap.cells, np.ones((grid_px, grid_px), dtype=bool))
        imaging.save_gray(cells.astype(np.float64), stage / "prescription.png")
        np.savetxt(stage / "prescription.csv", pmap.cells.astype(int), fmt="%d", delimiter=",")
        stats = mapping.spray_stats(pmap)
        area = mapping.ground_area(grid_px, gsd)
        with open(stage / "spray_stats.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["grid_px", "cell_side_cm", "free_weed_grids", "weed_grids",
                             "spraying_rate", "saving_rate"])
            writer.writerow([grid_px, area.side_cm, stats.free_weed_grids, stats.weed_grids,
                             f"{stats.spraying_rate:.2f}", f"{stats.saving_rate:.2f}"])
        summary.update(grid_px=grid_px, cell=str(area), cell_side_cm=area.side_cm,
                       cell_area_cm2=area.area_cm2, spraying_rate=stats.spraying_rate,
                       saving_rate=stats.saving_rate)
    grids = [g for g in cfg.mapping.grids if g <= min(mask.shape)]
    if len(grids) >= 2:
        _, fit = mapping.spray_curve(mask, grids, gsd, cfg.mapping.min_weed_pixels)
        _write_json(stage / "fit.json", {"grids_px": grids, **fit.to_dict()})
    _write_json(stage / "summary.json", summary)
    return summary


def cmd_predict(checkpoint, image_path, out_dir, cfg: PipelineConfig, use_crf=False, tile=None,
                overlap=None, gsd=None, grid=None) -> dict:
    model = load_checkpoint(checkpoint)
    image = imaging.load_image(image_path)
    overlap = cfg.mapping.overlap if overlap is None else overlap
    mask, probs = _predict_image(model, image, cfg, tile, overlap, use_crf)
    with staged_output(out_dir) as stage:
        return write_mapping_outputs(stage, mask, probs, cfg, grid or cfg.mapping.grid_px,
                                     gsd or cfg.mapping.gsd_mm_per_px)


def cmd_eval(checkpoint, dataset_dir, out_dir, cfg: PipelineConfig, preprocess=True,
             shift=False, tile=None) -> ConfusionMatrix:
    model = load_checkpoint(checkpoint)
    cm = ConfusionMatrix(model.config.num_classes)
    for image, mask in read_dataset(dataset_dir):
        if preprocess:
            image, mask = deterministic_preprocess(image, mask, cfg.preprocessing)
        if shift:
            image = imaging.domain_shift(image, cfg.domain_shift)
        pred, _ = _predict_image(model, image, cfg, tile, cfg.mapping.overlap, False)
        cm.accumulate(pred, mask)
    names = list(imaging.CLASS_NAMES[:cm.num_classes])
    with staged_output(out_dir) as stage:
        (stage / "confusion.csv").write_text(cm.to_csv(names))
        (stage / "metrics.csv").write_text(report(cm, names, "csv"))
        (stage / "metrics.txt").write_text(report(cm, names, "text"))
    return cm


def cmd_featmaps(checkpoint, image_path, layer: str, out_dir) -> list[str]:
    model = load_checkpoint(checkpoint)
    image = imaging.load_image(image_path)
    rasters = net.extract_feature_maps(model, image, layer)
    names = []
    with staged_output(out_dir) as stage:
        for k, raster in enumerate(rasters):
            name = f"{layer}_ch{k:03d}.png"
            imaging.save_gray(raster, stage / name)
            names.append(name)
        h, w = rasters[0].shape
        _write_json(stage / f"{layer}_index.json",
                    {"layer": layer, "channels": len(rasters), "height": h, "width": w, "files": names})
    return names


def cmd_spraycurve(mask_path, grids, gsd: float, out_dir, min_weed_pixels: int = 1):
    mask = imaging.load_mask(mask_path)
    rows, fit = mapping.spray_curve(mask, grids, gsd, min_weed_pixels)
    with staged_output(out_dir) as stage:
        with open(stage / "spraycurve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["grid_px", "grid_cm", "free_weed_grids", "weed_grids", "spraying_rate", "saving_rate"])
            for g, side, s in rows:
                writer.writerow([g, side, s.free_weed_grids, s.weed_grids,
                                 f"{s.spraying_rate:.2f}", f"{s.saving_rate:.2f}"])
        _write_json(stage / "fit.json", fit.to_dict())
    return rows, fit


def cmd_weights(dataset_dir, num_classes: int = 3) -> np.ndarray:
    counts = training.dataset_class_counts(read_dataset(dataset_dir), num_classes)
    return training.compute_class_weights(counts)


def cmd_crf(probs_path, image_path, out_path, cfg: PipelineConfig) -> np.ndarray:
    probs = np.load(probs_path)
    image = imaging.load_image(image_path)
    mask = crf_mod.refine(probs, image, cfg.crf, cfg.mapping.crf_radius)
    imaging.save_mask(mask, out_path)
    return mask


# ---------------------------------------------------------------------------
# argument parsing


def _grid_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfsg", description="Field-to-aerial crop/weed segmentation pipeline")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic field dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, help="base seed (synthetic.base_seed)")

    p = sub.add_parser("train", help="train on a field dataset")
    p.add_argument("--train-dir", required=True)
    p.add_argument("--val-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV path (default <out>.history.csv)")
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="initial_lr")
    p.add_argument("--seed", type=int)

    for name in ("predict", "map"):
        p = sub.add_parser(name, help="predict an image or tiled ROI and write mapping outputs")
        p.add_argument("checkpoint")
        p.add_argument("image")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--crf", action="store_true", help="refine with the dense CRF")
        p.add_argument("--tile", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--gsd", type=float, help="ground sampling distance, mm/pixel")
        p.add_argument("--grid", type=int, help="prescription grid size, pixels")

    p = sub.add_parser("eval", help="confusion matrix and metrics on a labelled dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--no-preprocess", action="store_true", help="skip resize/smoothing of field scenes")
    p.add_argument("--domain-shift", action="store_true", help="degrade images to the aerial domain first")
    p.add_argument("--tile", type=int)

    p = sub.add_parser("crf", help="refine a saved probability raster")
    p.add_argument("probabilities", help=".npy of shape (H, W, C)")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="mask PNG")
    for flag in ("w1", "w2", "sigma-alpha", "sigma-beta", "sigma-rho"):
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--radius", type=int)

    p = sub.add_parser("featmaps", help="dump per-channel feature maps of one layer")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--layer", default="conv1")
    p.add_argument("--out", required=True)

    p = sub.add_parser("spraycurve", help="saving rate vs grid size with a linear fit")
    p.add_argument("mask")
    p.add_argument("--grids", type=_grid_list, default=None)
    p.add_argument("--gsd", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("weights", help="print class weights for a dataset")
    p.add_argument("dataset")
    return parser


def run(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cmd = args.command
    if cmd == "synth":
        if args.seed is not None:
            cfg = override(cfg, "synthetic", base_seed=args.seed)
        seeds = cmd_synth(cfg, args.out, args.count)
        print(f"wrote {len(seeds)} scenes to {args.out}")
    elif cmd == "train":
        cfg = override(cfg, "training", max_epochs=args.max_epochs, batch_size=args.batch_size,
                       initial_lr=args.initial_lr, seed=args.seed)
        _, history = cmd_train(cfg, args.train_dir, args.val_dir, args.out, args.history)
        print(f"trained {len(history)} epochs; checkpoint {args.out}")
    elif cmd in ("predict", "map"):
        summary = cmd_predict(args.checkpoint, args.image, args.out, cfg, args.crf, args.tile,
                              args.overlap, args.gsd, args.grid)
        print(json.dumps(summary, sort_keys=True))
    elif cmd == "eval":
        cm = cmd_eval(args.checkpoint, args.dataset, args.out, cfg, not args.no_preprocess,
                      args.domain_shift, args.tile)
        print(report(cm, imaging.CLASS_NAMES[:cm.num_classes], "text"), end="")
    elif cmd == "crf":
        cfg = override(cfg, "crf", w1=args.w1, w2=args.w2, sigma_alpha=args.sigma_alpha,
                       sigma_beta=args.sigma_beta, sigma_rho=args.sigma_rho, iterations=args.iterations)
        cfg = override(cfg, "mapping", crf_radius=args.radius)
        cmd_crf(args.probabilities, args.image, args.out, cfg)
    elif cmd == "featmaps":
        names = cmd_featmaps(args.checkpoint, args.image, args.layer, args.out)
        print(f"wrote {len(names)} feature maps")
    elif cmd == "spraycurve":
        rows, fit = cmd_spraycurve(args.mask, args.grids or list(cfg.mapping.grids),
                                   args.gsd or cfg.mapping.gsd_mm_per_px, args.out,
                                   cfg.mapping.min_weed_pixels)
        for g, side, s in rows:
            print(f"grid {g:4d} px ({side:g} cm): saving {s.saving_rate:.2f}%")
        print(json.dumps(fit.to_dict()))
    elif cmd == "weights":
        weights = cmd_weights(args.dataset, cfg.architecture.num_classes)
        print(" ".join(f"{name}={w:.3f}" for name, w in zip(imaging.CLASS_NAMES, weights)))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, imaging.ImageFormatError, FileNotFoundError,
            training.EmptyDatasetError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

