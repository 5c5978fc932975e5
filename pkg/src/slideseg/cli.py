"""Command-line entry points for every pipeline stage.

Stage subcommands operate on the on-disk exchange formats (slide
directories, 1-bit mask PNGs, 16-bit heatmap PNGs, grid CSV/JSON), so any
stage can be run, inspected, and re-run in isolation; ``pipeline`` and
``experiment`` chain them end to end from a JSON config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from .bridge import classify_batch, extract_features, parse_backend_spec
from .cluster import EvolutionConfig, evolve_cluster_count, save_cluster_model
from .errors import InputError, SlideSegError
from .heatmap import save_heatmap, stitch_heatmap
from .heatmap import load_refinement_input
from .metrics import aggregate, overlap_metrics, report_to_json, reports_to_csv, with_hausdorff
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (
    PipelineConfig,
    load_config,
    load_probs,
    run_experiment_matrix,
    run_pipeline,
    save_probs,
)
from .pngio import (
    load_heatmap_png16,
    load_mask_png,
    load_rgb_png,
    save_heatmap_png16,
    save_mask_png,
    save_rgb_png,
)
from .postprocess import BinaryMask, PostprocessConfig, postprocess, refine
from .rng import derive_rng
from .slide import import_raster, open_slide
from .tissue import (
    TissueMask,
    build_patch_grid,
    compute_tissue_mask,
    default_mask_level,
    extract_patch,
    load_grid,
    save_grid,
)


def _range_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def _cmd_import(args) -> int:
    slide = import_raster(args.input, args.tile_size, args.out, args.slide_id)
    print(f"imported {slide.slide_id}: {len(slide.levels)} levels -> {args.out}")
    return 0


def _cmd_phantom(args) -> int:
    spec = PhantomSpec(
        width=args.width,
        height=args.height,
        n_tumor_blobs=args.blobs,
        blob_radius_range=args.radius_range or PhantomSpec.blob_radius_range,
        tissue_coverage=args.coverage,
        seed=args.seed,
    )
    slide, tissue, tumor = generate_phantom(spec, args.out, args.slide_id, args.tile_size)
    print(
        f"phantom {slide.slide_id}: tissue {int(tissue.sum())} px, "
        f"tumor {int(tumor.sum())} px -> {args.out}"
    )
    return 0


def _cmd_mask(args) -> int:
    slide = open_slide(args.slide)
    level = args.level if args.level is not None else default_mask_level(slide)
    tm = compute_tissue_mask(slide, level, args.gradient_threshold, args.brightness_ceiling)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask_png(out / "tissue_mask.png", tm.bits)
    with open(out / "tissue_mask.json", "w") as f:
        json.dump({"level": tm.level, "width": tm.width, "height": tm.height}, f, indent=2)
        f.write("\n")
    print(f"mask level {level}: {int(tm.bits.sum())} tissue px -> {out}")
    return 0


def _cmd_grid(args) -> int:
    slide = open_slide(args.slide)
    with open(Path(args.mask).with_suffix(".json")) as f:
        mask_meta = json.load(f)
    bits = load_mask_png(args.mask)
    tm = TissueMask(
        level=mask_meta["level"], width=bits.shape[1], height=bits.shape[0], bits=bits
    )
    truth = None
    if args.truth:
        tb = load_mask_png(args.truth)
        truth = TissueMask(level=args.level, width=tb.shape[1], height=tb.shape[0], bits=tb)
    grid = build_patch_grid(slide, args.level, args.patch_size, tm, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(grid, out / "grid.csv", out / "grid.json")
    n_eligible = len(grid.eligible_records())
    print(f"grid {grid.cols}x{grid.rows}: {n_eligible} eligible patches -> {out}")
    return 0


def _cmd_augment(args) -> int:
    img = load_rgb_png(args.input)
    if args.grid_overlay:
        img = aug.draw_grid_overlay(img, spacing=args.grid_spacing)
    cfg = aug.AugmentConfig(
        num_lenses=args.lenses,
        radius_range=args.radius_range,
        strength_range=args.strength_range,
        crop_size=args.crop_size,
        seed=args.seed,
    )
    if args.lenses_only:
        rng = derive_rng(args.seed, "augment-cli")
        lenses = aug.sample_lenses(cfg, img.shape[:2], rng)
        out = aug.apply_multi_lens_distortion(img, lenses)
    else:
        rng = derive_rng(args.seed, "augment-cli")
        out = aug.augment_patch(img, cfg, rng)
    save_rgb_png(args.out, out)
    print(f"augmented {args.input} -> {args.out}")
    return 0


def _cmd_classify(args) -> int:
    slide = open_slide(args.slide)
    grid = load_grid(Path(args.grid) / "grid.csv", Path(args.grid) / "grid.json")
    backend = parse_backend_spec(args.backend)
    if args.batch_size:
        backend = replace(backend, batch_size=args.batch_size)
    records = grid.eligible_records()
    patches = [((r.grid_x, r.grid_y), extract_patch(slide, r)) for r in records]
    probs = classify_batch(backend, patches)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_probs(probs, out / "probs.csv")
    print(f"classified {len(probs)} patches -> {out / 'probs.csv'}")
    return 0


def _cmd_stitch(args) -> int:
    grid = load_grid(Path(args.grid) / "grid.csv", Path(args.grid) / "grid.json")
    probs = load_probs(args.probs)
    hm = stitch_heatmap(grid, probs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_heatmap(hm, out / "heatmap.png", out / "heatmap.json")
    print(f"stitched {grid.cols}x{grid.rows} heatmap -> {out}")
    return 0


def _cmd_refine(args) -> int:
    ri = load_refinement_input(args.input, Path(args.input).with_suffix(".json"))
    backend = parse_backend_spec(args.backend)
    raster = refine(ri, backend)
    save_heatmap_png16(args.out, raster)
    print(f"refined raster -> {args.out}")
    return 0


def _cmd_postprocess(args) -> int:
    raster = load_heatmap_png16(args.input)
    cfg = PostprocessConfig(
        threshold=args.threshold,
        min_fragment_area=args.min_fragment_area,
        opening_kernel=args.opening_kernel,
        median_kernel=args.median_kernel,
    )
    mask = postprocess(raster, cfg)
    save_mask_png(args.out, mask.bits)
    print(f"final mask ({int(mask.bits.sum())} px) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise InputError(f"no PNG masks in {pred_dir}")
    reports = []
    for name in names:
        tpath = truth_dir / name
        if not tpath.is_file():
            raise InputError(f"no matching truth mask for {name}")
        pred = BinaryMask.from_array(load_mask_png(pred_dir / name))
        truth = BinaryMask.from_array(load_mask_png(tpath))
        rep = overlap_metrics(pred, truth, slide_id=Path(name).stem)
        rep = with_hausdorff(rep, pred, truth)
        report_to_json(rep, out / f"{Path(name).stem}.json")
        reports.append(rep)
    reports_to_csv(reports, out / "report.csv")
    with open(out / "summary.json", "w") as f:
        json.dump(aggregate(reports), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"evaluated {len(reports)} mask pairs -> {out}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = run_pipeline(cfg, workers=args.workers)
    for s in result.slides:
        status = "ok" if s.ok else f"FAILED: {s.error}"
        extra = f" dsc={s.metrics.dsc:.4f}" if s.metrics else ""
        print(f"{s.slide_id}: {status}{extra}")
    if result.summary and result.summary.get("dsc"):
        d = result.summary["dsc"]
        print(f"cohort dsc: mean={d['mean']:.4f} median={d['median']:.4f}")
    return 1 if result.failed else 0


def _cmd_experiment(args) -> int:
    with open(args.configs) as f:
        spec = json.load(f)
    if not isinstance(spec, dict) or not spec:
        raise InputError("experiment spec must be a JSON object of name -> config")
    named = [(name, PipelineConfig.from_json_dict(c)) for name, c in spec.items()]
    result = run_experiment_matrix(named, args.out, workers=args.workers)
    for e in result.pairings:
        if e["degenerate"]:
            print(f"{e['config_a']} vs {e['config_b']}: degenerate ({e['reason']})")
        else:
            print(
                f"{e['config_a']} vs {e['config_b']}: W={e['w_statistic']} "
                f"p={e['p_value']:.6g} ({e['method']})"
            )
    print(f"{len(result.pairings)} pairings -> {result.out_dir}")
    return 0


def _cmd_cluster(args) -> int:
    slide = open_slide(args.slide)
    grid = load_grid(Path(args.grid) / "grid.csv", Path(args.grid) / "grid.json")
    backend = parse_backend_spec(args.backend, feature_dim=args.feature_dim)
    records = grid.eligible_records()
    patches = [((r.grid_x, r.grid_y), extract_patch(slide, r)) for r in records]
    feats = np.asarray(extract_features(backend, patches))
    cfg = EvolutionConfig(
        population=args.population,
        generations=args.generations,
        k_min=args.k_min,
        k_max=args.k_max,
        mutation_rate=args.mutation_rate,
        seed=args.seed,
    )
    model = evolve_cluster_count(feats, cfg)
    save_cluster_model(model, args.out)
    print(f"clustered {len(records)} patches: k={model.k} objective={model.objective:.4f}")
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    t0 = time.monotonic()
    result = run_pipeline(cfg, workers=args.workers)
    wall = time.monotonic() - t0
    stages: dict[str, float] = {}
    for s in result.slides:
        for k, v in s.timings.items():
            stages[k] = stages.get(k, 0.0) + v
    print(f"{'stage':<12} {'total_s':>9}")
    for k, v in stages.items():
        print(f"{k:<12} {v:>9.3f}")
    print(f"{'wall':<12} {wall:>9.3f}")
    return 1 if result.failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slideseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("import", help="tile a PNG/TIFF raster into a slide directory")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile-size", type=int, default=512)
    s.add_argument("--slide-id", default=None)
    s.set_defaults(func=_cmd_import)

    s = sub.add_parser("phantom", help="generate a synthetic slide with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=4096)
    s.add_argument("--height", type=int, default=4096)
    s.add_argument("--blobs", type=int, default=2)
    s.add_argument("--radius-range", type=_range_pair, default=None)
    s.add_argument("--coverage", type=float, default=0.68)
    s.add_argument("--tile-size", type=int, default=512)
    s.add_argument("--slide-id", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_phantom)

    s = sub.add_parser("mask", help="compute the tissue/glass mask")
    s.add_argument("--slide", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--level", type=int, default=None)
    s.add_argument("--gradient-threshold", type=float, default=0.02)
    s.add_argument("--brightness-ceiling", type=float, default=0.95)
    s.set_defaults(func=_cmd_mask)

    s = sub.add_parser("grid", help="build the labeled patch lattice")
    s.add_argument("--slide", required=True)
    s.add_argument("--mask", required=True, help="tissue_mask.png (JSON sidecar next to it)")
    s.add_argument("--out", required=True)
    s.add_argument("--level", type=int, default=0)
    s.add_argument("--patch-size", type=int, default=224)
    s.add_argument("--truth", default=None, help="ground-truth tumor mask PNG at grid level")
    s.set_defaults(func=_cmd_grid)

    s = sub.add_parser("augment", help="augment one patch image")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lenses", type=int, default=4)
    s.add_argument("--radius-range", type=_range_pair, default=None)
    s.add_argument("--strength-range", type=_range_pair, default=(0.2, 0.4))
    s.add_argument("--crop-size", type=int, default=224)
    s.add_argument("--lenses-only", action="store_true", help="apply only the lens warp")
    s.add_argument("--grid-overlay", action="store_true", help="burn in a grid to visualize the warp")
    s.add_argument("--grid-spacing", type=int, default=16)
    s.set_defaults(func=_cmd_augment)

    s = sub.add_parser("classify", help="run the patch classifier over a grid")
    s.add_argument("--slide", required=True)
    s.add_argument("--grid", required=True, help="directory with grid.csv/grid.json")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", default="heuristic", help="heuristic | exec:<cmd>")
    s.add_argument("--batch-size", type=int, default=None)
    s.set_defaults(func=_cmd_classify)

    s = sub.add_parser("stitch", help="stitch patch probabilities into a heatmap")
    s.add_argument("--grid", required=True)
    s.add_argument("--probs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_stitch)

    s = sub.add_parser("refine", help="run the refinement backend on a fused input")
    s.add_argument("--input", required=True, help="refine_input.bin (JSON header next to it)")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", default="identity", help="identity | exec:<cmd>")
    s.set_defaults(func=_cmd_refine)

    s = sub.add_parser("postprocess", help="threshold and clean a probability raster")
    s.add_argument("--input", required=True, help="16-bit probability PNG")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--min-fragment-area", type=int, default=100)
    s.add_argument("--opening-kernel", type=int, default=7)
    s.add_argument("--median-kernel", type=int, default=11)
    s.set_defaults(func=_cmd_postprocess)

    s = sub.add_parser("eval", help="score prediction masks against truth masks")
    s.add_argument("--pred", required=True, help="directory of prediction PNGs")
    s.add_argument("--truth", required=True, help="directory of matching truth PNGs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("pipeline", help="run the full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="override config out_dir")
    s.add_argument("--seed", type=int, default=None, help="override config seed")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_pipeline)

    s = sub.add_parser("experiment", help="run named configs and compare pairwise")
    s.add_argument("--configs", required=True, help="JSON object: name -> pipeline config")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_experiment)

    s = sub.add_parser("cluster", help="cluster patch features with evolutionary k selection")
    s.add_argument("--slide", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--backend", default="heuristic")
    s.add_argument("--feature-dim", type=int, default=0, help="feature dim for exec backends")
    s.add_argument("--k-min", type=int, default=2)
    s.add_argument("--k-max", type=int, default=8)
    s.add_argument("--population", type=int, default=16)
    s.add_argument("--generations", type=int, default=20)
    s.add_argument("--mutation-rate", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_cluster)

    s = sub.add_parser("bench", help="run the pipeline and print stage timings")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(func=_cmd_bench)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SlideSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
