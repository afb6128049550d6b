"""Command-line interface: ``oilseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .data.labels import CATEGORIES, CategoryLabel
from .data.patches import extract_patches, load_manifest, save_samples, split_by_event
from .data.preprocess import downsample_mask, preprocess_product
from .data.raster import load_raster, read_grid, save_raster, write_grid
from .data.synth import PlantedSlick, SynthConfig, synthesize_dataset, synthesize_product
from .evaluation import evaluate_maps
from .inference import filter_color, predict_tiled, threshold_mask
from .models import build_classifier, build_ofcn, load_model, save_model
from .pipeline import LocalDirectorySource, PipelineRequest, run_pipeline, validate_geojson
from .training import SearchSpace, TrainConfig, hparam_search, predict_samples, train, train_two_stage

log = logging.getLogger("oilseg")


def _load_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _train_config(args) -> TrainConfig:
    d = _load_config(args.config)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise SystemExit(f"unknown TrainConfig fields in config: {sorted(unknown)}")
    for name in ("epochs", "batch_size", "learning_rate"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, default=str))


# subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.products:
        rng = np.random.default_rng(args.seed)
        for i in range(args.products):
            slicks = [PlantedSlick(float(rng.uniform(30, args.height - 30)), float(rng.uniform(30, args.width - 30)),
                                   float(rng.uniform(6, 14)), str(rng.choice(["patch", "disk"])))
                      for _ in range(args.slicks)]
            p = synthesize_product(args.height, args.width, slicks, rng, product_id=f"S{i:03d}",
                                   timestamp=f"2020-06-{i % 28 + 1:02d}T10:00:00Z")
            save_raster(p.raw, out / f"S{i:03d}.g16r")
            write_grid(p.mask, out / f"S{i:03d}.mask")
            write_grid(p.event_map.astype(np.uint16), out / f"S{i:03d}.events")
            _write_json({str(k): v.to_dict() for k, v in p.labels.items()}, out / f"S{i:03d}.labels.json")
        print(f"wrote {args.products} products to {out}")
        return 0
    cfg = SynthConfig(args.n + args.val, size=args.size, contrast=args.contrast)
    samples = synthesize_dataset(cfg, args.seed)
    save_samples({"train": samples[: args.n], "val": samples[args.n :]}, out)
    print(f"wrote {len(samples)} samples to {out / 'manifest.json'}")
    return 0


def cmd_prepare(args) -> int:
    src = Path(args.raw)
    d1_all, d2_all = [], []
    rng = np.random.default_rng(args.seed)
    for path in sorted(src.glob("*.g16r")):
        raw = load_raster(path)
        product = preprocess_product(raw)
        stem = path.with_suffix("")
        mask = read_grid(f"{stem}.mask")
        events = read_grid(f"{stem}.events").astype(np.int32)
        if mask.shape != product.values.shape:
            mask = downsample_mask(mask)
            events = downsample_mask(events)
        labels_path = Path(f"{stem}.labels.json")
        labels = ({int(k): CategoryLabel.from_dict(v) for k, v in json.loads(labels_path.read_text()).items()}
                  if labels_path.exists() else None)
        d1, d2 = extract_patches(product, mask, events, labels, rng, args.size)
        d1_all += d1
        d2_all += d2
    dataset = d1_all if args.dataset == "D1" else d2_all
    splits = split_by_event(dataset, {"train": 0.8, "val": 0.1, "test": 0.1}, rng)
    save_samples(splits, args.out)
    print(json.dumps({k: len(v) for k, v in splits.items()}))
    return 0


def _segmentation_model(args, cfg: TrainConfig):
    return build_ofcn(args.width, cfg.use_bn, cfg.use_se, cfg.dropout, seed=args.seed)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    tr, va = load_manifest(args.data, "train"), load_manifest(args.data, "val")
    model, hist = train(_segmentation_model(args, cfg), tr, va, cfg, checkpoint_path=args.out)
    save_model(model, args.out)
    hist.to_csv(args.history or f"{args.out}.history.csv")
    print(json.dumps({"best_epoch": hist.best_epoch, "best_val_f1": hist.best_f1, "wall_time": hist.wall_time}))
    return 0


def cmd_train2stage(args) -> int:
    cfg = _train_config(args)
    tr, va = load_manifest(args.data, "train"), load_manifest(args.data, "val")
    model, hists = train_two_stage(_segmentation_model(args, cfg), tr, va, cfg, args.stage1, args.stage2)
    save_model(model, args.out)
    for i, h in enumerate(hists, start=1):
        h.to_csv(f"{args.out}.stage{i}.csv")
    print(json.dumps({"stage_best_f1": [h.best_f1 for h in hists]}))
    return 0


def cmd_search(args) -> int:
    tr, va = load_manifest(args.data, "train"), load_manifest(args.data, "val")
    trials = hparam_search(SearchSpace(), args.budget, tr, va, rng=args.seed, epochs=args.epochs,
                           width=args.width, batch_size=args.batch_size, log_path=args.log)
    for rank, t in enumerate(trials[: args.top], start=1):
        print(f"{rank}\t{t.val_f1:.4f}\t{json.dumps(t.config.to_dict(), default=str)}")
    return 0


def _preprocessed(path):
    product = load_raster(path)
    if product.meta.pixel_size_m < 40:
        product = preprocess_product(product)
    return product


def cmd_infer(args) -> int:
    model = load_model(args.model)
    product = _preprocessed(args.product)
    soft = predict_tiled(model, product.values, args.window, not args.no_tta)
    write_grid(soft.astype(np.float32), args.out_soft)
    mask = filter_color(soft, args.tau_filter, args.tau_color) if args.filter else threshold_mask(soft, args.tau_color)
    if args.out_mask:
        write_grid(mask.astype(np.uint8), args.out_mask)
    print(json.dumps({"oil_pixels": int(mask.sum()), "shape": list(soft.shape)}))
    return 0


def cmd_eval(args) -> int:
    taus = [round(t, 4) for t in np.arange(0.05, 0.951, 0.05)]
    if args.model:
        model = load_model(args.model)
        samples = load_manifest(args.data, args.split)
        softs = list(predict_samples(model, samples))
        truths = [s.mask for s in samples]
        angles = [s.incidence_angle for s in samples]
    else:
        softs, truths, angles = [read_grid(args.soft)], [read_grid(args.truth)], None
    report = evaluate_maps(softs, truths, args.tau, taus, angles)
    report.write(args.out)
    print(json.dumps(report.summary()))
    return 0


def cmd_classify_train(args) -> int:
    cfg = _train_config(args)
    tr, va = load_manifest(args.data, "train"), load_manifest(args.data, "val")
    tr = [s for s in tr if s.categories is not None]
    va = [s for s in va if s.categories is not None]
    k = len(CATEGORIES[args.category])
    size = tr[0].vv.shape[0]
    model = build_classifier(k, cfg.use_bn, cfg.use_se, cfg.dropout, seed=args.seed, input_size=size)
    model, hist = train(model, tr, va, cfg, category=args.category)
    save_model(model, args.out)
    hist.to_csv(f"{args.out}.history.csv")
    print(json.dumps({"category": args.category, "best_val_f1": hist.best_f1}))
    return 0


def cmd_pipeline(args) -> int:
    d = _load_config(args.config)
    if args.workers:
        d["workers"] = args.workers
    if args.bit_exact:
        d["workers"] = 1
    request = PipelineRequest(**d)
    doc, report = run_pipeline(request, LocalDirectorySource(args.source))
    problems = validate_geojson(doc)
    if problems:
        log.error("invalid GeoJSON: %s", problems[:5])
        return 2
    _write_json(doc, args.out)
    if args.report:
        _write_json(report.to_dict(), args.report)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_viz_export(args) -> int:
    from PIL import Image

    product = _preprocessed(args.product)
    soft = read_grid(args.soft)
    gray = (np.clip(product.values, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    mask = filter_color(soft, args.tau_filter, args.tau_color).astype(bool)
    rgb[mask] = (0.5 * rgb[mask] + 0.5 * np.array([255, 40, 40])).astype(np.uint8)
    Image.fromarray(rgb).save(args.out_png)
    if args.geojson:
        from .inference import extract_slicks, prune_slicks
        from .pipeline import emit_geojson

        slicks = prune_slicks(extract_slicks(mask, soft, product.meta.pixel_size_m))
        meta = {"product_id": product.meta.product_id, "timestamp": product.meta.timestamp}
        _write_json(emit_geojson(slicks, product.meta.georef, meta), args.geojson)
    print(f"wrote {args.out_png}")
    return 0


# parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oilseg", description="Oil-spill segmentation toolkit for SAR imagery.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with TrainConfig or PipelineRequest fields")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    p.add_argument("--bit-exact", action="store_true", help="sequential, deterministic execution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic patches or raw products")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--val", type=int, default=40)
    s.add_argument("--size", type=int, default=160)
    s.add_argument("--contrast", default="strong", choices=["strong", "weak", "variable"])
    s.add_argument("--products", type=int, default=0, help="write this many raw products instead of patches")
    s.add_argument("--height", type=int, default=320)
    s.add_argument("--width", type=int, default=320)
    s.add_argument("--slicks", type=int, default=3)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="preprocess raw products and extract D1/D2 patches")
    s.add_argument("--raw", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset", choices=["D1", "D2"], default="D2")
    s.add_argument("--size", type=int, default=160)
    s.set_defaults(func=cmd_prepare)

    for name, func, help_ in (("train", cmd_train, "train an OFCN"),
                              ("train2stage", cmd_train2stage, "two-stage OFCN training")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--width", type=int, default=32)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--learning-rate", type=float)
        if name == "train":
            s.add_argument("--history")
        else:
            s.add_argument("--stage1", type=int, default=50)
            s.add_argument("--stage2", type=int, default=50)
        s.set_defaults(func=func)

    s = sub.add_parser("search", help="random hyperparameter search")
    s.add_argument("--data", required=True)
    s.add_argument("--budget", type=int, default=10)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--log", default="trials.jsonl")
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("infer", help="predict one product")
    s.add_argument("--model", required=True)
    s.add_argument("--product", required=True)
    s.add_argument("--out-soft", required=True)
    s.add_argument("--out-mask")
    s.add_argument("--window", type=int, default=160)
    s.add_argument("--no-tta", action="store_true")
    s.add_argument("--filter", action="store_true", help="apply filter-color instead of a plain threshold")
    s.add_argument("--tau-filter", type=float, default=0.8)
    s.add_argument("--tau-color", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="pixel, box and threshold reports")
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--soft")
    s.add_argument("--truth")
    s.add_argument("--tau", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classify-train", help="train one category classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--category", required=True, choices=list(CATEGORIES))
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.set_defaults(func=cmd_classify_train)

    s = sub.add_parser("pipeline", help="batch detection to GeoJSON (request from --config)")
    s.add_argument("--source", required=True, help="directory of raw products")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("viz-export", help="PNG overlay and GeoJSON for one product")
    s.add_argument("--product", required=True)
    s.add_argument("--soft", required=True)
    s.add_argument("--out-png", required=True)
    s.add_argument("--geojson")
    s.add_argument("--tau-filter", type=float, default=0.8)
    s.add_argument("--tau-color", type=float, default=0.5)
    s.set_defaults(func=cmd_viz_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.bit_exact:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(args.seed)
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
