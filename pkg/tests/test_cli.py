from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import HE_PINK, THREE_STEPS, WHITE, plan_text, reasoning_text, smooth_region, solid, two_region_slide
from pathagent.cli import main
from pathagent.dataset_io import VqaRecord, write_vqa_manifest
from pathagent.eval_harness import VqaPrediction, write_predictions
from pathagent.slide_model import RegionImage, load_region, pyramid_from_array, read_raster, save_pyramid, save_region


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def entry(stage, response):
    return {"match": {"stage": stage}, "response": response}


def test_pass_at_k(capsys, tmp_path):
    code, out, _ = run(capsys, "pass-at-k", "--n", 8, "--c", 4, "--k", 2, "--out", tmp_path)
    assert code == 0 and out.strip() == "0.785714"


def test_pass_at_k_invalid_is_domain_error(capsys, tmp_path):
    code, _, err = run(capsys, "pass-at-k", "--n", 2, "--c", 3, "--k", 1, "--out", tmp_path)
    assert code == 1 and "InvalidArgs" in err


def test_unknown_flag_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "pass-at-k", "--n", 8, "--c", 4, "--k", 2, "--bogus")
    assert code == 2 and "usage" in err


def test_missing_command_exit_2(capsys):
    assert run(capsys)[0] == 2


def test_bad_config_value_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "tile", "--slide", "x.json", "--overlap", "1.5", "--out", tmp_path)
    assert code == 2 and "overlap" in err


def test_tile(capsys, tmp_path):
    base = solid(600, 1000, WHITE)
    base[:, 500:] = HE_PINK
    manifest = save_pyramid(pyramid_from_array(base, "slideA", downsamples=(1, 4)), tmp_path / "slide")
    out = tmp_path / "out"
    code, stdout, _ = run(capsys, "tile", "--slide", manifest, "--region-size", 400, "--out", out)
    assert code == 0 and "regions kept" in stdout
    lines = [json.loads(l) for l in (out / "slideA" / "regions.jsonl").read_text().splitlines()]
    ids = [d["region_id"] for d in lines]
    assert ids and all((out / "slideA" / f"region_{i}.png").exists() for i in ids)
    region = load_region(out / "slideA" / f"region_{ids[0]}.png")
    assert region.slide_id == "slideA" and region.size == (400, 400)
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["command"] == "tile" and resolved["config"]["region_size"] == 400
    assert (out / "log.jsonl").exists()


def test_config_precedence_and_rerun(capsys, tmp_path):
    base = solid(300, 300, HE_PINK)
    manifest = save_pyramid(pyramid_from_array(base, "s"), tmp_path / "slide")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("region_size = 200\noverlap = 0.1\n")
    out = tmp_path / "o"
    assert run(capsys, "tile", "--slide", manifest, "--config", cfg, "--overlap", 0.2, "--out", out)[0] == 0
    first = json.loads((out / "config.resolved.json").read_text())
    assert first["config"]["region_size"] == 200 and first["config"]["overlap"] == 0.2
    assert run(capsys, "tile", "--slide", manifest, "--rerun", "--out", out)[0] == 0
    assert json.loads((out / "config.resolved.json").read_text()) == first


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"regoin_size": 3}))
    assert run(capsys, "pass-at-k", "--n", 2, "--c", 1, "--k", 1, "--config", cfg, "--out", tmp_path)[0] == 2


def test_thumbnail_grid_crop(capsys, tmp_path):
    manifest = save_pyramid(pyramid_from_array(smooth_region(1, 256), "s", downsamples=(1, 8)), tmp_path / "sl")
    assert run(capsys, "thumbnail", "--slide", manifest, "--factor", 8, "--out", tmp_path)[0] == 0
    assert read_raster(tmp_path / "s_thumbnail.png").shape == (32, 32, 3)

    save_region(RegionImage.from_array(smooth_region(2, 512)), tmp_path / "r.png")
    assert run(capsys, "grid", "--image", tmp_path / "r.png", "--out", tmp_path)[0] == 0
    assert (tmp_path / "r_grid.png").exists()

    (tmp_path / "plan.json").write_text(plan_text(THREE_STEPS))
    code, _, _ = run(capsys, "crop", "--region", tmp_path / "r.png", "--plan", tmp_path / "plan.json",
                     "--out-res", 128, "--out", tmp_path / "c")
    assert code == 0
    views = json.loads((tmp_path / "c" / "views.json").read_text())
    assert len(views) == 3 and read_raster(tmp_path / "c" / "views" / "step_2.png").shape == (128, 128, 3)


def test_run_region_and_vqa(capsys, tmp_path):
    save_region(RegionImage.from_array(smooth_region(3, 512)), tmp_path / "r.png")
    script = tmp_path / "script.json"
    script.write_text(json.dumps([entry("navigation_planning", plan_text(THREE_STEPS)),
                                  entry("reasoning", reasoning_text(3, "benign stroma")),
                                  entry("navigation_planning_vqa", plan_text(THREE_STEPS)),
                                  entry("reasoning_vqa", reasoning_text(3, "Answer: B"))]))
    code, out, _ = run(capsys, "run-region", "--region", tmp_path / "r.png", "--script", script,
                       "--out-res", 64, "--out", tmp_path / "d")
    assert code == 0 and "benign stroma" in out
    assert (tmp_path / "d" / "region_0" / "reasoning.json").exists()

    write_vqa_manifest(tmp_path / "m.jsonl", [VqaRecord("q", "Which?", ("x", "y"), 1, "BRCA")])
    code, out, _ = run(capsys, "run-region", "--region", tmp_path / "r.png", "--script", script,
                       "--vqa", tmp_path / "m.jsonl", "--record", "q", "--pass-at-k", "--attempts", 3,
                       "--out-res", 64, "--out", tmp_path / "v")
    assert code == 0 and "3/3" in out
    assert len((tmp_path / "v" / "predictions.jsonl").read_text().splitlines()) == 3


def test_run_wsi_and_classify(capsys, tmp_path):
    manifest = save_pyramid(two_region_slide("sl"), tmp_path / "slide")
    sel = {"groups": [{"name": "t", "region_ids": [0, 1], "needs_high_mag": True}], "priority": [0, 1]}
    script = tmp_path / "s.json"
    script.write_text(json.dumps([entry("global_screening", json.dumps(sel)),
                                  entry("navigation_planning", plan_text(THREE_STEPS)),
                                  entry("reasoning", reasoning_text(3, "ductal carcinoma")),
                                  entry("wsi_classification", "IDC")]))
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "run-wsi", "--slide", manifest, "--script", script, "--region-size", 1024,
                          "--out-res", 128, "--thumbnail-factor", 8, "--out", out)
    assert code == 0 and "2 regions described" in stdout
    report = out / "sl" / "report.json"
    code, stdout, _ = run(capsys, "classify-wsi", "--report", report, "--labels", "IDC,ILC",
                          "--script", script, "--out", out)
    assert code == 0 and stdout.strip() == "IDC"
    assert json.loads((out / "classification.json").read_text())["label"] == "IDC"


def test_run_wsi_without_backend_is_usage_error(capsys, tmp_path):
    manifest = save_pyramid(pyramid_from_array(solid(50, 50, HE_PINK), "x"), tmp_path / "s")
    assert run(capsys, "run-wsi", "--slide", manifest, "--out", tmp_path)[0] == 2


def test_missing_slide_is_domain_error(capsys, tmp_path):
    assert run(capsys, "tile", "--slide", tmp_path / "nope.json", "--out", tmp_path)[0] == 1


def test_eval_and_report(capsys, tmp_path):
    recs = [VqaRecord(f"r{i}", "q", ("a", "b"), i % 2, s) for i, s in enumerate(["BRCA", "BRCA", "LUAD", "TGCT"])]
    write_vqa_manifest(tmp_path / "m.jsonl", recs)
    preds = [VqaPrediction(r.record_id, a, r.answer_index if (a + i) % 2 == 0 else 1 - r.answer_index)
             for i, r in enumerate(recs) for a in range(4)]
    write_predictions(tmp_path / "p.jsonl", preds)
    code, out, _ = run(capsys, "eval-vqa", "--manifest", tmp_path / "m.jsonl", "--predictions", tmp_path / "p.jsonl",
                       "--ks", "1,2", "--out", tmp_path)
    assert code == 0 and "Overall" in out
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    assert rep["overall"]["correct"] == 2 and rep["pass_at_k"]["1"] == 0.5
    code, out2, _ = run(capsys, "report", "--eval", tmp_path / "eval_report.json", "--out", tmp_path)
    assert code == 0 and out2 == out


def test_filter_shortcuts(capsys, tmp_path):
    recs = [VqaRecord(f"r{i}", f"question {i}", ("a", "b"), 0, "BRCA") for i in range(3)]
    write_vqa_manifest(tmp_path / "m.jsonl", recs)
    (tmp_path / "a.json").write_text(json.dumps([{"match": {"contains": "question 0"}, "response": "Answer: A"},
                                                 {"match": {"contains": "question 1"}, "response": "Answer: A"},
                                                 {"match": {"contains": "question 2"}, "raise": "timeout"}]))
    # one shared entry: every conversation of backend b answers A
    (tmp_path / "b.json").write_text(json.dumps([{"response": "Answer: A"}]))
    code, out, _ = run(capsys, "filter-shortcuts", "--manifest", tmp_path / "m.jsonl", "--script-a", tmp_path / "a.json",
                       "--script-b", tmp_path / "b.json", "--out", tmp_path / "f")
    assert code == 0
    dropped = [json.loads(l)["record_id"] for l in (tmp_path / "f" / "dropped.jsonl").read_text().splitlines()]
    assert dropped == ["r0", "r1"]


def test_tile_four_regions_scaled_geometry(capsys, tmp_path):
    # same shape as 31200^2 at 16000/15200, scaled to region 1000 / stride 950
    base = np.empty((1950, 1950, 3), np.uint8)
    base[:] = HE_PINK
    manifest = save_pyramid(pyramid_from_array(base, "fx", downsamples=(1, 8)), tmp_path / "slide")
    out = tmp_path / "out"
    assert run(capsys, "tile", "--slide", manifest, "--region-size", 1000, "--out", out)[0] == 0
    pngs = sorted(p.name for p in (out / "fx").glob("region_*.png"))
    assert pngs == ["region_0.png", "region_1.png", "region_2.png", "region_3.png"]
    origins = [(d["x"], d["y"]) for d in map(json.loads, (out / "fx" / "regions.jsonl").read_text().splitlines())]
    assert origins == [(0, 0), (950, 0), (0, 950), (950, 950)]


def test_rerun_is_byte_identical(capsys, tmp_path):
    manifest = save_pyramid(two_region_slide("sl"), tmp_path / "slide")
    sel = {"groups": [{"name": "t", "region_ids": [0, 1], "needs_high_mag": True}], "priority": [1, 0]}
    script = tmp_path / "s.json"
    script.write_text(json.dumps([entry("global_screening", json.dumps(sel)),
                                  entry("navigation_planning", plan_text(THREE_STEPS)),
                                  entry("reasoning", reasoning_text(3))]))
    out = tmp_path / "o"
    assert run(capsys, "run-wsi", "--slide", manifest, "--script", script, "--region-size", 1024,
               "--out-res", 64, "--thumbnail-factor", 8, "--workers", 2, "--out", out)[0] == 0
    names = ["report.json", "transcript.jsonl", "selection.json"]
    first = {n: (out / "sl" / n).read_bytes() for n in names}
    assert run(capsys, "run-wsi", "--slide", manifest, "--rerun", "--out", out)[0] == 0
    assert {n: (out / "sl" / n).read_bytes() for n in names} == first
