"""Command line: ``tbdetect <verb> [options]``.

Settings come from defaults, then ``--config`` (JSON), then flags. Exit
status: 0 ok, 2 configuration error, 3 missing artifact, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import torch

from . import classify, pipeline, roiext, segmodel, segtrain, synthgen
from .imagecore import (SPLITS, DataError, load_entry, load_image, load_manifest, load_mask, save_image,
                        save_mask)
from .pipeline import ConfigError, PipelineConfig
from .tiling import dump_patches, tile, tile_mask

log = logging.getLogger("tbdetect")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


# config assembly


def _flag_overrides(args) -> dict:
    over = {}
    for key in ("manifest", "output_dir", "seg_checkpoint", "clf_checkpoint", "tiling_policy", "threshold",
                "seed", "workers", "feature_spec", "per_class", "aggregation"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "segmenter", None):
        over["segmenters"] = args.segmenter
    seg = {k: getattr(args, k) for k in ("depth", "base_filters", "input_size") if getattr(args, k, None) is not None}
    if seg:
        over["segmodel"] = seg
    tr = {k: getattr(args, k) for k in ("max_epochs", "patience", "batch_size", "learning_rate")
          if getattr(args, k, None) is not None}
    if tr:
        over["train"] = tr
    return over


def build_config(args) -> PipelineConfig:
    cfg = pipeline.load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    return pipeline.config_from_dict(_flag_overrides(args), cfg)


def _manifest(cfg: PipelineConfig):
    if not cfg.manifest:
        raise ConfigError("no manifest given (use --manifest or the config's manifest key)")
    return load_manifest(cfg.manifest)


def _entries(manifest, split):
    entries = manifest.entries if split == "all" else manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split} entries")
    return entries


def _seg_model(cfg: PipelineConfig, required: bool = True):
    needs = any(s == "unet" for s in cfg.segmenters)
    if not (needs and required):
        return None
    path = cfg.resolve("seg")
    if not path.is_file():
        raise MissingArtifact(f"segmentation checkpoint not found: {path}")
    return segmodel.load_checkpoint(path)


def _ensemble(cfg: PipelineConfig):
    path = cfg.resolve("clf")
    if not path.is_file():
        raise MissingArtifact(f"ensemble checkpoint not found: {path}")
    return classify.load_ensemble(path)


def _out(cfg: PipelineConfig, *parts) -> Path:
    p = Path(cfg.output_dir, *parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


# verbs


def cmd_synth(args, cfg: PipelineConfig) -> int:
    sc = synthgen.SynthConfig(image_size=(args.width, args.height), seed=cfg.seed)
    out = Path(args.out or cfg.output_dir)
    manifest = synthgen.generate_corpus(sc, args.n_images, out, args.name)
    n_train, n_test = manifest.split_counts
    print(f"wrote {len(manifest.entries)} images to {out} (train {n_train}, test {n_test}); "
          f"manifest {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_tile(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    size = cfg.segmodel.input_size
    out = _out(cfg, "patches")
    n = 0
    for entry in _entries(manifest, args.split):
        image, mask = load_entry(entry)
        patches = tile(image, size, cfg.tiling_policy)
        dump_patches(patches, out / "images")
        for (r, c), m in tile_mask(mask, size, cfg.tiling_policy):
            save_mask(m, out / "masks" / f"{image.id}_r{r}_c{c}.png")
        n += len(patches)
    print(f"wrote {n} patches of {size}x{size} to {out}")
    return EXIT_OK


def cmd_train_seg(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    out = _out(cfg)
    path = cfg.resolve("seg")
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    model, records = segtrain.train(manifest, cfg.segmodel, cfg.train_config, cfg.tiling_policy,
                                    log_path=log_path)
    segmodel.save_checkpoint(model, path, {"epoch": model.best_epoch})
    for r in records:
        print(r.to_json())
    print(f"best epoch {model.best_epoch}; checkpoint {path}")
    return EXIT_OK


def cmd_infer_seg(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    model = _seg_model(cfg)
    n = 0
    for entry in _entries(manifest, args.split):
        image, _ = load_entry(entry)
        for s in cfg.segmenters:
            mask = pipeline.segment(image, s, model, cfg.tiling_policy, cfg.threshold)
            save_mask(mask, Path(cfg.output_dir, "masks", s.replace(":", "_"), f"{image.id}.png"))
            n += 1
    print(f"wrote {n} mask(s) under {Path(cfg.output_dir, 'masks')}")
    return EXIT_OK


def _masks_for(cfg, image, masks_dir, model):
    if masks_dir:
        path = Path(masks_dir) / f"{image.id}.png"
        if not path.is_file():
            raise MissingArtifact(f"predicted mask not found: {path}")
        return load_mask(path, image.dims, image.id)
    return pipeline.segment(image, cfg.segmenters[0], model, cfg.tiling_policy, cfg.threshold)


def cmd_extract_rois(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    model = _seg_model(cfg, required=not args.masks_dir)
    out = _out(cfg, "rois")
    r = cfg.roi
    total = 0
    for entry in _entries(manifest, args.split):
        image, _ = load_entry(entry)
        mask = _masks_for(cfg, image, args.masks_dir, model)
        rois = roiext.extract_rois(image, mask, r.min_area, r.max_area, r.margin, r.connectivity)
        roiext.dump_rois(rois, out)
        total += len(rois)
    print(f"wrote {total} roi(s) to {out}")
    return EXIT_OK


def cmd_train_clf(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    regions = pipeline.harvest_split(manifest, "train", cfg.roi, cfg.seed)
    samples = pipeline.featurize_regions(regions, cfg.feature_spec)
    pools = classify.split_pools(samples, 3, cfg.per_class, cfg.seed)
    ensemble = classify.train_ensemble(pools, cfg.hyper, cfg.seed)
    path = cfg.resolve("clf")
    classify.save_ensemble(ensemble, path)
    js, txt = pipeline.write_report({"training": ensemble.training_report, "seed": cfg.seed,
                                     "feature_spec": cfg.feature_spec}, cfg.output_dir, "training_report")
    print(txt.read_text(), end="")
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_detect(args, cfg: PipelineConfig) -> int:
    ensemble = _ensemble(cfg)
    model = _seg_model(cfg, required=not args.masks_dir)
    if args.images:
        images = []
        for p in args.images:
            if not Path(p).is_file():
                raise MissingArtifact(f"image not found: {p}")
            images.append(load_image(p))
    else:
        images = [load_entry(e)[0] for e in _entries(_manifest(cfg), args.split)]
    out = _out(cfg)
    overlays = _out(cfg, "overlays")
    n = 0
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for image in images:
            mask = _masks_for(cfg, image, args.masks_dir, model)
            found = pipeline.detect(image, mask, ensemble, cfg.roi)
            for d in found:
                fh.write(d.to_json() + "\n")
            save_image(pipeline.overlay(image, found), overlays / f"{image.id}.png")
            n += len(found)
            log.info("%s: %d detection(s)", image.id, len(found))
    print(f"{n} detection(s) in {len(images)} image(s); records {out / 'detections.jsonl'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    if not manifest.split("test"):
        raise DataError("manifest has an empty test split")
    model = _seg_model(cfg)
    report = {"aggregation": cfg.aggregation, "seed": cfg.seed, "segmenters": list(cfg.segmenters)}
    report["segmentation"] = pipeline.segmentation_rows(manifest, cfg.segmenters, model, cfg.tiling_policy,
                                                        cfg.threshold, "test", cfg.aggregation)
    if not args.no_classify:
        ensemble = _ensemble(cfg)
        regions = pipeline.harvest_split(manifest, "test", cfg.roi, cfg.seed)
        samples = pipeline.featurize_regions(regions, ensemble.feature_spec_id)
        report["classification"] = pipeline.classification_rows(ensemble, samples)
    js, txt = pipeline.write_report(report, cfg.output_dir, "report")
    print(txt.read_text(), end="")
    print(f"report {js}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "tile": cmd_tile, "train-seg": cmd_train_seg, "infer-seg": cmd_infer_seg,
    "extract-rois": cmd_extract_rois, "train-clf": cmd_train_clf, "detect": cmd_detect,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="JSON pipeline config; flags override its values")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--manifest")
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("--seg-checkpoint", dest="seg_checkpoint")
    g.add_argument("--clf-checkpoint", dest="clf_checkpoint")
    g.add_argument("--segmenter", action="append", help="unet, otsu:gray or otsu:rg; repeatable")
    g.add_argument("--policy", dest="tiling_policy", choices=("crop", "pad"))
    g.add_argument("--threshold", type=float)
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tbdetect", description="Bacilli detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", help="corpus directory (default: output dir)")

    p = sub.add_parser("tile", parents=[common], help="dump image and mask patches")
    p.add_argument("--split", choices=("all",) + SPLITS, default="all")

    p = sub.add_parser("train-seg", parents=[common], help="train the segmentation network")
    for flag, typ in (("--max-epochs", int), ("--patience", int), ("--batch-size", int),
                      ("--learning-rate", float), ("--depth", int), ("--base-filters", int),
                      ("--input-size", int)):
        p.add_argument(flag, type=typ)

    p = sub.add_parser("infer-seg", parents=[common], help="write predicted masks")
    p.add_argument("--split", choices=("all",) + SPLITS, default="test")

    p = sub.add_parser("extract-rois", parents=[common], help="crop regions around mask components")
    p.add_argument("--split", choices=("all",) + SPLITS, default="test")
    p.add_argument("--masks-dir", help="read <image_id>.png masks instead of segmenting")

    p = sub.add_parser("train-clf", parents=[common], help="train the voting ensemble")
    p.add_argument("--per-class", type=int, help="regions per class in each pool")
    p.add_argument("--feature-spec", choices=classify.FEATURE_SPECS)

    p = sub.add_parser("detect", parents=[common], help="segment, crop and classify")
    p.add_argument("images", nargs="*", help="image files (default: the manifest split)")
    p.add_argument("--split", choices=("all",) + SPLITS, default="test")
    p.add_argument("--masks-dir", help="read <image_id>.png masks instead of segmenting")

    p = sub.add_parser("evaluate", parents=[common], help="segmentation and classification reports")
    p.add_argument("--aggregation", choices=("mean", "pooled"))
    p.add_argument("--no-classify", action="store_true", help="skip the classification table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        torch.set_num_threads(cfg.workers)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing: {e}", file=sys.stderr)
        return EXIT_MISSING
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
