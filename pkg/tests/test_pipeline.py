import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import stub_cmd
from slideseg.errors import ConsistencyError, InputError
from slideseg.phantom import PhantomSpec, generate_phantom
from slideseg.pipeline import (
    PipelineConfig,
    SlideJob,
    load_probs,
    run_experiment_matrix,
    run_pipeline,
    save_probs,
)


def tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def phantom_set(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline_phantoms")
    jobs = []
    for seed in range(2):
        spec = PhantomSpec(
            width=1024,
            height=1024,
            n_tumor_blobs=1,
            blob_radius_range=(160.0, 210.0),
            tissue_coverage=0.6,
            seed=20 + seed,
        )
        d = base / f"p{seed}"
        generate_phantom(spec, d, tile_size=128)
        jobs.append(SlideJob(str(d), str(d / "tumor_truth.png")))
    return jobs


def base_config(jobs, out_dir) -> PipelineConfig:
    # Small refinement raster keeps the pure-Python refiner stubs fast;
    # the 1120 default is exercised in the acceptance suite.
    return PipelineConfig(slides=tuple(jobs), out_dir=str(out_dir), refinement_size=280)


def test_pipeline_runs_and_writes_all_stages(phantom_set, tmp_path):
    cfg = base_config(phantom_set[:1], tmp_path / "out")
    result = run_pipeline(cfg, workers=2)
    assert not result.failed
    s = result.slides[0]
    assert s.ok and s.metrics is not None
    root = tmp_path / "out" / s.slide_id
    for rel in (
        "mask/tissue_mask.png",
        "mask/tissue_mask.json",
        "grid/grid.csv",
        "grid/grid.json",
        "classify/probs.csv",
        "stitch/heatmap.png",
        "stitch/heatmap.json",
        "fuse/refine_input.bin",
        "fuse/refine_input.json",
        "refine/refined.png",
        "postprocess/final_mask.png",
        "postprocess/final_mask_level0.png",
        "eval/metrics.json",
    ):
        assert (root / rel).is_file(), rel
    assert (tmp_path / "out" / "report.csv").is_file()
    assert (tmp_path / "out" / "summary.json").is_file()
    assert (tmp_path / "out" / "effective_config.json").is_file()
    assert set(s.timings) >= {
        "mask",
        "grid",
        "classify",
        "stitch",
        "fuse",
        "refine",
        "postprocess",
        "eval",
        "total",
    }
    assert sum(v for k, v in s.timings.items() if k != "total") <= s.timings["total"] + 1e-6


def test_empty_slide_list_is_noop(tmp_path):
    cfg = PipelineConfig(slides=(), out_dir=str(tmp_path / "empty"))
    result = run_pipeline(cfg)
    assert not result.failed
    assert result.slides == [] and result.summary is None
    assert (tmp_path / "empty" / "effective_config.json").is_file()
    assert not (tmp_path / "empty" / "report.csv").exists()


def test_determinism_across_workers_and_runs(phantom_set, tmp_path):
    digests = []
    for i, workers in enumerate((1, 4, 1)):
        out = tmp_path / f"run{i}"
        cfg = base_config(phantom_set, out)
        result = run_pipeline(cfg, workers=workers)
        assert not result.failed
        digests.append(tree_digest(out))
    assert digests[0] == digests[1] == digests[2]


def test_seed_echoed_but_runtime_knobs_not(phantom_set, tmp_path):
    cfg = replace(base_config(phantom_set[:1], tmp_path / "echo"), seed=77)
    run_pipeline(cfg, workers=3)
    echoed = json.loads((tmp_path / "echo" / "effective_config.json").read_text())
    assert echoed["seed"] == 77
    assert "workers" not in echoed
    assert "out_dir" not in echoed


def test_failing_slide_continues_cohort(phantom_set, tmp_path):
    jobs = [SlideJob("/nonexistent/slide"), phantom_set[0]]
    cfg = base_config(jobs, tmp_path / "fail")
    result = run_pipeline(cfg)
    assert result.failed
    assert not result.slides[0].ok and result.slides[0].error
    assert result.slides[1].ok


def test_external_refiner_stub_halves(phantom_set, tmp_path):
    half_cmd = " ".join(stub_cmd("half_refiner.py"))
    cfg = replace(base_config(phantom_set[:1], tmp_path / "half"), refiner=f"exec:{half_cmd}")
    result = run_pipeline(cfg, workers=1)
    assert not result.failed
    # Halved probabilities cannot cross the 0.5 threshold, so the final mask
    # is empty and DSC against a non-empty truth is 0.
    assert result.slides[0].metrics.dsc == 0.0


def test_probs_csv_roundtrip(phantom_set, tmp_path):
    cfg = base_config(phantom_set[:1], tmp_path / "probs")
    run_pipeline(cfg)
    path = tmp_path / "probs" / f"phantom_{20}" / "classify" / "probs.csv"
    probs = load_probs(path)
    assert probs
    save_probs(probs, tmp_path / "copy.csv")
    assert load_probs(tmp_path / "copy.csv") == probs


def test_truth_dim_mismatch_fails_slide(phantom_set, tmp_path):
    from slideseg.pngio import save_mask_png

    bad = tmp_path / "bad_truth.png"
    save_mask_png(bad, np.zeros((64, 64), np.uint8))
    jobs = [SlideJob(phantom_set[0].slide_dir, str(bad))]
    result = run_pipeline(base_config(jobs, tmp_path / "badt"))
    assert result.failed


def test_config_json_roundtrip(phantom_set, tmp_path):
    cfg = replace(
        base_config(phantom_set, tmp_path / "cfg"),
        classifier="heuristic",
        refiner="identity",
        mask_level=2,
        seed=5,
    )
    d = cfg.to_json_dict()
    back = PipelineConfig.from_json_dict(json.loads(json.dumps(d)))
    assert back == cfg
    with pytest.raises(InputError):
        PipelineConfig.from_json_dict({"out_dir": "x", "bogus_key": 1})


def test_experiment_matrix_identity_beats_half_refiner(phantom_set, tmp_path):
    half_cmd = " ".join(stub_cmd("half_refiner.py"))
    cfg_a = base_config(phantom_set, tmp_path / "ignored_a")
    cfg_b = replace(cfg_a, refiner=f"exec:{half_cmd}")
    result = run_experiment_matrix(
        [("identity", cfg_a), ("half", cfg_b)], tmp_path / "exp", workers=1
    )
    mean_identity = np.mean(list(result.dsc_table["identity"].values()))
    mean_half = np.mean(list(result.dsc_table["half"].values()))
    assert mean_identity > mean_half
    assert len(result.pairings) == 1
    e = result.pairings[0]
    assert not e["degenerate"] and 0 < e["p_value"] <= 1.0
    assert (tmp_path / "exp" / "boxplot.csv").is_file()
    assert (tmp_path / "exp" / "wilcoxon.csv").is_file()
    box_lines = (tmp_path / "exp" / "boxplot.csv").read_text().strip().splitlines()
    assert len(box_lines) == 1 + 2 * len(phantom_set)


def test_experiment_identical_configs_degenerate(phantom_set, tmp_path):
    cfg = base_config(phantom_set[:1], tmp_path / "ignored")
    result = run_experiment_matrix([("a", cfg), ("b", cfg)], tmp_path / "exp2")
    assert result.pairings[0]["degenerate"]


def test_experiment_pairing_count_10_configs(phantom_set, tmp_path):
    # n(n-1)/2 pairings for 10 named configs; run on one tiny slide set.
    cfg = base_config(phantom_set[:1], tmp_path / "ignored")
    named = [(f"c{i}", replace(cfg, seed=i)) for i in range(10)]
    result = run_experiment_matrix(named, tmp_path / "exp10")
    assert len(result.pairings) == 45


def test_experiment_validation(phantom_set, tmp_path):
    cfg = base_config(phantom_set, tmp_path / "x")
    with pytest.raises(InputError):
        run_experiment_matrix([("only", cfg)], tmp_path / "e1")
    cfg_less = base_config(phantom_set[:1], tmp_path / "y")
    with pytest.raises(ConsistencyError):
        run_experiment_matrix([("a", cfg), ("b", cfg_less)], tmp_path / "e2")
    no_truth = PipelineConfig(
        slides=(SlideJob(phantom_set[0].slide_dir),), out_dir=str(tmp_path / "z")
    )
    with pytest.raises(ConsistencyError):
        run_experiment_matrix([("a", no_truth), ("b", no_truth)], tmp_path / "e3")
