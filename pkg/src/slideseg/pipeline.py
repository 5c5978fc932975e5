"""End-to-end pipeline runner and the experiment harness.

One slide flows through: tissue mask -> patch grid -> patch classification ->
heatmap stitching -> down-sampled RGB + heatmap fusion -> refinement ->
post-processing -> (evaluation against ground truth when provided). Every
stage writes its artifact under ``<out>/<slide_id>/<stage>/``.

Determinism contract: given the same config and seed, the artifact tree is
byte-identical regardless of worker count. Work is parallelized over patch
batches with order-preserving maps, all randomness is derived per patch, and
wall-clock timings are reported in memory / logs only, never written into
the tree. The echoed effective config likewise excludes runtime-only knobs
(worker count).
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

from .bridge import (
    BackendDescriptor,
    BackendKind,
    ExternalBackendClient,
    PatchProbability,
    classify_batch,
    parse_backend_spec,
)
from .errors import ConsistencyError, InputError, SlideSegError
from .heatmap import (
    fuse_inputs,
    resize_heatmap,
    save_heatmap,
    save_refinement_input,
    stitch_heatmap,
)
from .metrics import (
    MetricsReport,
    aggregate,
    overlap_metrics,
    report_to_json,
    reports_to_csv,
    with_hausdorff,
)
from .pngio import load_mask_png, save_heatmap_png16, save_mask_png, save_rgb_png
from .postprocess import (
    BinaryMask,
    PostprocessConfig,
    overlay_tp_fp_fn,
    postprocess,
    refine,
    upscale_mask_lattice_aligned,
)
from .slide import TiledSlide, downsample_to, open_slide
from .stats import WilcoxonResult, wilcoxon_signed_rank
from .tissue import (
    TissueMask,
    build_patch_grid,
    compute_tissue_mask,
    default_mask_level,
    extract_patch,
    save_grid,
)

log = logging.getLogger("slideseg")

CLASSIFY_PATCH_SIZE = 224


@dataclass(frozen=True)
class SlideJob:
    slide_dir: str
    truth_path: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    slides: tuple[SlideJob, ...]
    out_dir: str
    classifier: str = "heuristic"
    refiner: str = "identity"
    patch_size: int = 224
    refinement_size: int = 1120
    grid_level: int = 0
    mask_level: int | None = None  # None: pyramid level nearest 1/32 resolution
    gradient_threshold: float = 0.02
    brightness_ceiling: float = 0.95
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    batch_size: int = 64
    seed: int = 0
    write_overlay: bool = False
    write_level0_mask: bool = True
    compute_hausdorff: bool = True

    def to_json_dict(self) -> dict:
        d = {
            "slides": [
                {"dir": j.slide_dir, "truth": j.truth_path} for j in self.slides
            ],
            "out_dir": self.out_dir,
            "classifier": self.classifier,
            "refiner": self.refiner,
            "patch_size": self.patch_size,
            "refinement_size": self.refinement_size,
            "grid_level": self.grid_level,
            "mask_level": self.mask_level,
            "gradient_threshold": self.gradient_threshold,
            "brightness_ceiling": self.brightness_ceiling,
            "postprocess": asdict(self.postprocess),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "write_overlay": self.write_overlay,
            "write_level0_mask": self.write_level0_mask,
            "compute_hausdorff": self.compute_hausdorff,
        }
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "PipelineConfig":
        known = {
            "classifier",
            "refiner",
            "patch_size",
            "refinement_size",
            "grid_level",
            "mask_level",
            "gradient_threshold",
            "brightness_ceiling",
            "batch_size",
            "seed",
            "write_overlay",
            "write_level0_mask",
            "compute_hausdorff",
        }
        unknown = set(d) - known - {"slides", "out_dir", "postprocess"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        slides = tuple(
            SlideJob(slide_dir=e["dir"], truth_path=e.get("truth"))
            for e in d.get("slides", [])
        )
        pp = PostprocessConfig(**d.get("postprocess", {}))
        kwargs = {k: d[k] for k in known if k in d}
        return cls(slides=slides, out_dir=d["out_dir"], postprocess=pp, **kwargs)


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return PipelineConfig.from_json_dict(json.load(f))


@dataclass
class SlideResult:
    slide_id: str
    ok: bool
    error: str | None
    metrics: MetricsReport | None
    timings: dict[str, float]


@dataclass
class PipelineResult:
    slides: list[SlideResult]
    summary: dict | None
    failed: bool


class _ClientPool:
    """One external-process client per worker thread, lazily spawned."""

    def __init__(self, backend: BackendDescriptor):
        self.backend = backend
        self._local = threading.local()
        self._all: list[ExternalBackendClient] = []
        self._lock = threading.Lock()

    def get(self) -> ExternalBackendClient | None:
        if self.backend.kind is not BackendKind.EXTERNAL_PROCESS:
            return None
        client = getattr(self._local, "client", None)
        if client is None:
            client = ExternalBackendClient(self.backend.command, self.backend.timeout_s)
            self._local.client = client
            with self._lock:
                self._all.append(client)
        return client

    def close_all(self):
        with self._lock:
            for c in self._all:
                c.close()
            self._all.clear()


def _classify_grid(
    slide: TiledSlide, grid, backend: BackendDescriptor, batch_size: int, workers: int
) -> list[PatchProbability]:
    eligible = grid.eligible_records()
    chunks = [eligible[i : i + batch_size] for i in range(0, len(eligible), batch_size)]
    pool = _ClientPool(backend)

    def work(chunk):
        patches = [
            ((r.grid_x, r.grid_y), extract_patch(slide, r, CLASSIFY_PATCH_SIZE))
            for r in chunk
        ]
        return classify_batch(backend, patches, client=pool.get())

    try:
        if workers <= 1 or len(chunks) <= 1:
            parts = [work(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(work, chunks))
    finally:
        pool.close_all()
    return [p for part in parts for p in part]


def save_probs(probs: list[PatchProbability], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["grid_x", "grid_y", "p_tumor"])
        for p in probs:
            w.writerow([p.grid_x, p.grid_y, repr(float(p.p_tumor))])


def load_probs(path) -> list[PatchProbability]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                PatchProbability(int(row["grid_x"]), int(row["grid_y"]), float(row["p_tumor"]))
            )
    return out


def _load_truth(slide: TiledSlide, level: int, path) -> TissueMask:
    bits = load_mask_png(path)
    desc = slide.level_desc(level)
    if bits.shape != (desc.height, desc.width):
        raise ConsistencyError(
            f"truth mask {bits.shape} does not match level {level} "
            f"({desc.height}, {desc.width})"
        )
    return TissueMask(level=level, width=desc.width, height=desc.height, bits=bits)


def run_slide(cfg: PipelineConfig, job: SlideJob, workers: int = 1) -> SlideResult:
    timings: dict[str, float] = {}
    t_all = time.monotonic()
    slide = open_slide(job.slide_dir)
    base = Path(cfg.out_dir) / slide.slide_id
    classifier = parse_backend_spec(cfg.classifier)
    refiner = parse_backend_spec(cfg.refiner)

    def stage(name):
        d = base / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    t0 = time.monotonic()
    mask_level = cfg.mask_level if cfg.mask_level is not None else default_mask_level(slide)
    tm = compute_tissue_mask(slide, mask_level, cfg.gradient_threshold, cfg.brightness_ceiling)
    d = stage("mask")
    save_mask_png(d / "tissue_mask.png", tm.bits)
    with open(d / "tissue_mask.json", "w") as f:
        json.dump(
            {
                "level": tm.level,
                "width": tm.width,
                "height": tm.height,
                "gradient_threshold": cfg.gradient_threshold,
                "brightness_ceiling": cfg.brightness_ceiling,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    timings["mask"] = time.monotonic() - t0

    t0 = time.monotonic()
    truth = _load_truth(slide, cfg.grid_level, job.truth_path) if job.truth_path else None
    grid = build_patch_grid(slide, cfg.grid_level, cfg.patch_size, tm, truth)
    d = stage("grid")
    save_grid(grid, d / "grid.csv", d / "grid.json")
    timings["grid"] = time.monotonic() - t0

    t0 = time.monotonic()
    probs = _classify_grid(slide, grid, classifier, cfg.batch_size, workers)
    save_probs(probs, stage("classify") / "probs.csv")
    timings["classify"] = time.monotonic() - t0

    t0 = time.monotonic()
    hm = stitch_heatmap(grid, probs)
    d = stage("stitch")
    save_heatmap(hm, d / "heatmap.png", d / "heatmap.json")
    timings["stitch"] = time.monotonic() - t0

    t0 = time.monotonic()
    rgb_small = downsample_to(slide, cfg.refinement_size, cfg.refinement_size)
    hm_big = resize_heatmap(hm, cfg.refinement_size)
    fused = fuse_inputs(rgb_small, hm_big)
    d = stage("fuse")
    save_refinement_input(fused, d / "refine_input.bin", d / "refine_input.json")
    timings["fuse"] = time.monotonic() - t0

    t0 = time.monotonic()
    refined = refine(fused, refiner)
    save_heatmap_png16(stage("refine") / "refined.png", refined)
    timings["refine"] = time.monotonic() - t0

    t0 = time.monotonic()
    final = postprocess(refined, cfg.postprocess)
    d = stage("postprocess")
    save_mask_png(d / "final_mask.png", final.bits)
    l0 = slide.levels[0]
    final_l0 = upscale_mask_lattice_aligned(
        final, grid.cols, grid.rows, cfg.patch_size, l0.width, l0.height
    )
    if cfg.write_level0_mask:
        save_mask_png(d / "final_mask_level0.png", final_l0.bits)
    timings["postprocess"] = time.monotonic() - t0

    report = None
    if truth is not None:
        t0 = time.monotonic()
        truth_mask = BinaryMask.from_array(truth.bits)
        report = overlap_metrics(final_l0, truth_mask, slide_id=slide.slide_id)
        if cfg.compute_hausdorff:
            report = with_hausdorff(report, final_l0, truth_mask)
        d = stage("eval")
        report_to_json(report, d / "metrics.json")
        if cfg.write_overlay:
            save_rgb_png(d / "overlay.png", overlay_tp_fp_fn(final_l0, truth_mask))
        timings["eval"] = time.monotonic() - t0

    timings["total"] = time.monotonic() - t_all
    log.info(
        "slide %s done: %s",
        slide.slide_id,
        " ".join(f"{k}={v:.2f}s" for k, v in timings.items()),
    )
    return SlideResult(
        slide_id=slide.slide_id, ok=True, error=None, metrics=report, timings=timings
    )


def run_pipeline(cfg: PipelineConfig, workers: int = 1) -> PipelineResult:
    """Run every slide; a failing slide aborts only itself."""
    if workers < 1:
        raise InputError(f"workers must be >= 1, got {workers}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # The echo records every computation-affecting parameter; runtime-only
    # knobs (worker count, output location) stay out so identical runs
    # produce identical trees.
    echo = cfg.to_json_dict()
    echo.pop("out_dir")
    with open(out / "effective_config.json", "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")

    results: list[SlideResult] = []
    for job in cfg.slides:
        try:
            results.append(run_slide(cfg, job, workers))
        except SlideSegError as exc:
            slide_id = Path(job.slide_dir).name
            log.error("slide %s failed: %s", slide_id, exc)
            results.append(
                SlideResult(slide_id=slide_id, ok=False, error=str(exc), metrics=None, timings={})
            )

    reports = [r.metrics for r in results if r.ok and r.metrics is not None]
    summary = None
    if reports:
        summary = aggregate(reports)
        reports_to_csv(reports, out / "report.csv")
        with open(out / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    failed = any(not r.ok for r in results)
    return PipelineResult(slides=results, summary=summary, failed=failed)


@dataclass
class ExperimentResult:
    per_config: dict[str, PipelineResult]
    dsc_table: dict[str, dict[str, float]]  # config -> slide_id -> dsc
    pairings: list[dict]
    out_dir: Path


def run_experiment_matrix(
    named_configs: list[tuple[str, PipelineConfig]], out_dir, workers: int = 1
) -> ExperimentResult:
    """Run >= 2 configs over one shared truth-annotated slide set and compare.

    Emits per-config cohort summaries, a boxplot-ready CSV of per-slide DSC,
    and pairwise Wilcoxon signed-rank results over per-slide DSC.
    """
    if len(named_configs) < 2:
        raise InputError("experiment matrix needs at least 2 configs")
    names = [n for n, _ in named_configs]
    if len(set(names)) != len(names):
        raise InputError(f"duplicate config names: {names}")
    slide_sets = {
        name: tuple((j.slide_dir, j.truth_path) for j in cfg.slides)
        for name, cfg in named_configs
    }
    first = slide_sets[names[0]]
    for name, sset in slide_sets.items():
        if sset != first:
            raise ConsistencyError(f"config {name!r} runs a different slide set")
    if not all(t for _, t in first):
        raise ConsistencyError("experiment slides must all carry ground truth")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_config: dict[str, PipelineResult] = {}
    dsc_table: dict[str, dict[str, float]] = {}
    for name, cfg in named_configs:
        cfg_out = replace(cfg, out_dir=str(out_dir / name))
        res = run_pipeline(cfg_out, workers=workers)
        per_config[name] = res
        dsc_table[name] = {
            r.slide_id: r.metrics.dsc for r in res.slides if r.ok and r.metrics
        }

    slide_ids = sorted(dsc_table[names[0]])
    for name in names:
        if sorted(dsc_table[name]) != slide_ids:
            raise ConsistencyError(f"config {name!r} produced a different slide set")

    with open(out_dir / "boxplot.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "slide_id", "dsc"])
        for name in names:
            for sid in slide_ids:
                w.writerow([name, sid, repr(dsc_table[name][sid])])

    pairings: list[dict] = []
    for a, b in combinations(names, 2):
        xa = [dsc_table[a][sid] for sid in slide_ids]
        xb = [dsc_table[b][sid] for sid in slide_ids]
        entry: dict = {"config_a": a, "config_b": b, "n_slides": len(slide_ids)}
        try:
            res: WilcoxonResult = wilcoxon_signed_rank(xa, xb)
            entry.update(
                n_effective=res.n_effective,
                w_statistic=res.w_statistic,
                p_value=res.p_value,
                method=res.method.value,
                degenerate=False,
            )
        except SlideSegError as exc:
            entry.update(degenerate=True, reason=str(exc))
        pairings.append(entry)

    with open(out_dir / "wilcoxon.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["config_a", "config_b", "n_slides", "n_effective", "w_statistic", "p_value", "method", "degenerate"]
        )
        for e in pairings:
            w.writerow(
                [
                    e["config_a"],
                    e["config_b"],
                    e["n_slides"],
                    e.get("n_effective", ""),
                    e.get("w_statistic", ""),
                    repr(e["p_value"]) if "p_value" in e else "",
                    e.get("method", ""),
                    e["degenerate"],
                ]
            )

    with open(out_dir / "comparison.json", "w") as f:
        json.dump(
            {
                name: per_config[name].summary
                for name in names
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    return ExperimentResult(
        per_config=per_config, dsc_table=dsc_table, pairings=pairings, out_dir=out_dir
    )
