import json

import numpy as np
import pytest

from conftest import stub_cmd
from slideseg.cli import main
from slideseg.phantom import PhantomSpec, generate_phantom
from slideseg.pngio import load_mask_png, load_rgb_png, save_mask_png, save_rgb_png


@pytest.fixture(scope="module")
def cli_phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "p"
    spec = PhantomSpec(
        width=512,
        height=512,
        n_tumor_blobs=1,
        blob_radius_range=(80.0, 110.0),
        tissue_coverage=0.6,
        seed=31,
    )
    generate_phantom(spec, d, tile_size=128)
    return d


def test_phantom_and_import_commands(tmp_path):
    rc = main(
        [
            "phantom",
            "--out",
            str(tmp_path / "ph"),
            "--width",
            "256",
            "--height",
            "256",
            "--blobs",
            "1",
            "--radius-range",
            "40,60",
            "--coverage",
            "0.6",
            "--tile-size",
            "128",
            "--seed",
            "3",
        ]
    )
    assert rc == 0
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 96, 3), dtype=np.uint8)
    save_rgb_png(tmp_path / "img.png", img)
    rc = main(["import", "--input", str(tmp_path / "img.png"), "--out", str(tmp_path / "s"), "--tile-size", "32"])
    assert rc == 0
    from slideseg.slide import open_slide, read_level

    assert np.array_equal(read_level(open_slide(tmp_path / "s"), 0), img)


def test_mask_grid_classify_stitch_chain(cli_phantom, tmp_path):
    mask_dir = tmp_path / "mask"
    assert main(["mask", "--slide", str(cli_phantom), "--out", str(mask_dir), "--level", "1"]) == 0
    grid_dir = tmp_path / "grid"
    assert (
        main(
            [
                "grid",
                "--slide",
                str(cli_phantom),
                "--mask",
                str(mask_dir / "tissue_mask.png"),
                "--out",
                str(grid_dir),
                "--level",
                "0",
                "--patch-size",
                "128",
                "--truth",
                str(cli_phantom / "tumor_truth.png"),
            ]
        )
        == 0
    )
    classify_dir = tmp_path / "classify"
    assert (
        main(
            [
                "classify",
                "--slide",
                str(cli_phantom),
                "--grid",
                str(grid_dir),
                "--out",
                str(classify_dir),
                "--backend",
                "heuristic",
            ]
        )
        == 0
    )
    stitch_dir = tmp_path / "stitch"
    assert (
        main(
            [
                "stitch",
                "--grid",
                str(grid_dir),
                "--probs",
                str(classify_dir / "probs.csv"),
                "--out",
                str(stitch_dir),
            ]
        )
        == 0
    )
    assert (stitch_dir / "heatmap.png").is_file()


def test_augment_command(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(240, 240, 3), dtype=np.uint8)
    save_rgb_png(tmp_path / "patch.png", img)
    rc = main(
        [
            "augment",
            "--input",
            str(tmp_path / "patch.png"),
            "--out",
            str(tmp_path / "aug.png"),
            "--seed",
            "5",
            "--lenses",
            "3",
            "--radius-range",
            "20,60",
            "--strength-range",
            "0.2,0.4",
            "--grid-overlay",
        ]
    )
    assert rc == 0
    out = load_rgb_png(tmp_path / "aug.png")
    assert out.shape == (224, 224, 3)


def test_postprocess_and_eval_commands(tmp_path):
    from slideseg.pngio import save_heatmap_png16

    yy, xx = np.mgrid[0:128, 0:128]
    disc = (np.hypot(yy - 64, xx - 64) <= 40).astype(np.float64)
    save_heatmap_png16(tmp_path / "raster.png", disc * 0.9)
    rc = main(
        [
            "postprocess",
            "--input",
            str(tmp_path / "raster.png"),
            "--out",
            str(tmp_path / "mask.png"),
            "--min-fragment-area",
            "10",
        ]
    )
    assert rc == 0
    pred_dir = tmp_path / "pred"
    truth_dir = tmp_path / "truth"
    pred_dir.mkdir()
    truth_dir.mkdir()
    bits = load_mask_png(tmp_path / "mask.png")
    save_mask_png(pred_dir / "s1.png", bits)
    save_mask_png(truth_dir / "s1.png", disc > 0)
    rc = main(["eval", "--pred", str(pred_dir), "--truth", str(truth_dir), "--out", str(tmp_path / "eval")])
    assert rc == 0
    report = json.loads((tmp_path / "eval" / "s1.json").read_text())
    assert report["dsc"] > 0.9


def test_pipeline_and_bench_commands(cli_phantom, tmp_path):
    cfg = {
        "slides": [{"dir": str(cli_phantom), "truth": str(cli_phantom / "tumor_truth.png")}],
        "out_dir": str(tmp_path / "out"),
        "patch_size": 128,
        "compute_hausdorff": False,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(cfg_path), "--workers", "2"]) == 0
    assert (tmp_path / "out" / "report.csv").is_file()
    assert main(["bench", "--config", str(cfg_path), "--out", str(tmp_path / "bench"), "--workers", "2"]) == 0


def test_refine_command_with_stub(cli_phantom, tmp_path):
    cfg = {
        "slides": [{"dir": str(cli_phantom), "truth": None}],
        "out_dir": str(tmp_path / "out"),
        "patch_size": 128,
        "refinement_size": 256,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(cfg_path)]) == 0
    fused = tmp_path / "out" / "phantom_31" / "fuse" / "refine_input.bin"
    half_cmd = " ".join(stub_cmd("half_refiner.py"))
    rc = main(
        [
            "refine",
            "--input",
            str(fused),
            "--out",
            str(tmp_path / "refined.png"),
            "--backend",
            f"exec:{half_cmd}",
        ]
    )
    assert rc == 0


def test_experiment_command(cli_phantom, tmp_path):
    base = {
        "slides": [{"dir": str(cli_phantom), "truth": str(cli_phantom / "tumor_truth.png")}],
        "out_dir": "ignored",
        "patch_size": 128,
        "compute_hausdorff": False,
    }
    half_cmd = " ".join(stub_cmd("half_refiner.py"))
    spec = {"identity": base, "half": {**base, "refiner": f"exec:{half_cmd}"}}
    cfg_path = tmp_path / "experiment.json"
    cfg_path.write_text(json.dumps(spec))
    rc = main(["experiment", "--configs", str(cfg_path), "--out", str(tmp_path / "exp")])
    assert rc == 0
    assert (tmp_path / "exp" / "wilcoxon.csv").is_file()


def test_cluster_command(cli_phantom, tmp_path):
    mask_dir = tmp_path / "mask"
    main(["mask", "--slide", str(cli_phantom), "--out", str(mask_dir), "--level", "0"])
    grid_dir = tmp_path / "grid"
    main(
        [
            "grid",
            "--slide",
            str(cli_phantom),
            "--mask",
            str(mask_dir / "tissue_mask.png"),
            "--out",
            str(grid_dir),
            "--patch-size",
            "64",
        ]
    )
    rc = main(
        [
            "cluster",
            "--slide",
            str(cli_phantom),
            "--grid",
            str(grid_dir),
            "--out",
            str(tmp_path / "model.json"),
            "--k-max",
            "4",
            "--generations",
            "5",
            "--population",
            "8",
        ]
    )
    assert rc == 0
    model = json.loads((tmp_path / "model.json").read_text())
    assert 2 <= model["k"] <= 4


def test_cli_error_exit_code(tmp_path):
    rc = main(["mask", "--slide", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 2
