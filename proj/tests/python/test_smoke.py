import json
import math
import os
import subprocess

import numpy as np
import pytest

import mapseg

SMALL = {
    "scene": {"n_frames": 3, "image_height": 32, "image_width": 48, "grid_height": 16, "grid_width": 8},
    "model": {"d_model": 16, "backbone_widths": [8, 12, 16], "norm_groups": 4, "aspp_width": 8},
    "encoder": {"heads": 2, "ffn": 32},
    "sgm": {"d_k": 16},
    "decoder": {"heads": 2, "ffn": 32, "layers": 2, "n_instances": 6, "n_points": 5},
    "train": {"epochs": 2},
}


def test_config_defaults_and_errors():
    cfg = mapseg.default_config()
    assert cfg["loss"]["lambda1"] == 15.0
    assert cfg["loss"]["lambda2"] == 0.5
    assert cfg["optim"]["lr0"] == 3e-4
    merged = mapseg.normalize_config({"train": {"epochs": 3}})
    assert merged["train"]["epochs"] == 3
    assert merged["train"]["batch_size"] == 2
    with pytest.raises(mapseg.ConfigError, match="bogus"):
        mapseg.normalize_config({"bogus": 1})
    assert issubclass(mapseg.ConfigError, mapseg.MapSegError)
    assert "properties" in mapseg.config_schema()


def test_scene_arrays():
    frame = mapseg.generate_scene(5, SMALL)
    assert frame.images.shape == (4, 3, 32, 48)
    assert frame.uv_masks.shape == (4, 1, 32, 48)
    assert frame.bev_mask.shape == (1, 16, 8)
    assert set(np.unique(frame.bev_mask)) <= {0, 1}
    assert frame.n_cameras == 4
    for e in frame.elements:
        assert e["cls"] in ("ped_crossing", "divider", "boundary")
        assert e["points"].shape[1] == 2
    assert mapseg.generate_scene(5, SMALL) == frame
    assert frame.mirrored().mirrored() == frame


def test_dataset_round_trip(tmp_path):
    frames = mapseg.generate_dataset(SMALL)
    mapseg.save_dataset(frames, tmp_path / "ds", SMALL)
    scene, back = mapseg.load_dataset(tmp_path / "ds")
    assert scene["n_frames"] == 3
    assert back == frames


def test_losses():
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt.flat[:100] = 1
    assert mapseg.dice_loss(np.zeros((10, 10)), gt) == pytest.approx(1 - 1 / 101, abs=1e-12)
    assert mapseg.dice_loss(gt.astype(float), gt) == pytest.approx(0.0, abs=1e-12)
    assert mapseg.seg_ce_loss(np.zeros((2, 10, 10)), gt) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(mapseg.DomainError):
        mapseg.dice_loss(np.full((10, 10), 1.5), gt)
    with pytest.raises(mapseg.ShapeError):
        mapseg.dice_loss(np.zeros((5, 20)), gt)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 10, 10))
    assert mapseg.seg_loss(logits, gt, 0.0, 1.0) == mapseg.seg_ce_loss(logits, gt)
    r = mapseg.total_loss(1.5, 2.5, 3.0)
    assert r["seg"] == 4.0 and r["total"] == 7.0
    with pytest.raises(mapseg.NumericError, match="bsm"):
        mapseg.total_loss(0.0, float("nan"), 0.0)


def test_matching():
    pts = mapseg.resample_element(np.array([[0.0, 0.0], [0.0, 9.0]]), False, 10)
    np.testing.assert_allclose(pts[:, 1], np.arange(10), atol=1e-12)
    assert len(mapseg.equivalent_orderings(pts, False)) == 2
    ring = mapseg.resample_element(np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]]), True, 10)
    assert len(mapseg.equivalent_orderings(ring, True)) == 20
    with pytest.raises(mapseg.DegenerateGeometryError):
        mapseg.resample_element(np.array([[1.0, 1.0], [1.0, 1.0]]), False, 4)
    scores = np.zeros((3, 4))
    points = np.zeros((3, 4, 2))
    empty = mapseg.hungarian_match(scores, points, [])
    assert empty["pairs"] == [] and empty["unmatched_preds"] == [0, 1, 2]
    gt = [{"cls": "divider", "points": np.array([[0.0, 0.0], [3.0, 0.0]])}]
    m = mapseg.hungarian_match(scores, points, gt)
    assert m["pairs"] == [(0, 0)]
    assert mapseg.solve_assignment([[3.0, 1.0], [1.0, 3.0]]) == [1, 0]


def test_evaluation():
    assert mapseg.chamfer_distance(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(5.0)
    assert mapseg.average_precision([True, False, True], 3) == pytest.approx(5 / 9)
    line = lambda y: np.array([[0.0, y], [6.0, y]])  # noqa: E731
    gts = [[{"cls": "divider", "points": line(0)}], [{"cls": "divider", "points": line(3)}]]
    dets = [[{"cls": "divider", "points": line(0.1), "score": 0.9}], []]
    r = mapseg.evaluate(dets, gts)
    assert r["per_class_ap"]["divider"] == pytest.approx(0.5)
    assert math.isnan(r["per_class_ap"]["boundary"])
    assert r["map"] == pytest.approx(0.5)


def test_model_forward():
    model = mapseg.Model(SMALL)
    out = model.forward(mapseg.generate_scene(1, SMALL))
    assert out["scores"].shape == (6, 4)
    assert out["points"].shape == (6, 5, 2)
    assert out["bsm_logits"].shape == (2, 16, 8)
    assert model.num_parameters > 0
    assert any(n.startswith("sgm.") for n in model.param_names)
    no_usm = mapseg.Model({**SMALL, "usm": {"enabled": False}})
    assert not any(n.startswith("usm.") for n in no_usm.param_names)


def test_train_resume(tmp_path):
    frames = mapseg.generate_dataset(SMALL)
    straight = mapseg.Trainer(SMALL, frames)
    records = straight.run()
    assert straight.done and len(records) == straight.total_steps == 4
    for r in records:
        loss = r["loss"]
        assert loss["total"] == loss["maptr"] + loss["seg"]

    first = mapseg.Trainer(SMALL, frames)
    first.run(2)
    first.save(tmp_path / "a.ckpt")
    resumed = mapseg.Trainer.resume(tmp_path / "a.ckpt", frames)
    rest = resumed.run()
    assert rest[-1]["loss"]["total"] == records[-1]["loss"]["total"]
    assert resumed.config["train"]["epochs"] == 2
    result = resumed.evaluate(frames[:1])
    assert 0.0 <= result["map"] <= 1.0 or math.isnan(result["map"])


def test_gradcheck_suite():
    results = mapseg.run_gradcheck(0)
    assert len(results) == 9
    assert all(r["passed"] for r in results), results


@pytest.mark.skipif("MAPSEG_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_config_and_errors(tmp_path):
    cli = os.environ["MAPSEG_CLI"]
    out = subprocess.run([cli, "config", "--set", "loss.lambda1=3"], capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["loss"]["lambda1"] == 3
    bad = subprocess.run([cli, "config", "--set", "nope.key=1"], capture_output=True, text=True)
    assert bad.returncode == 1
    assert json.loads(bad.stderr.strip().splitlines()[-1])["error"] == "config"
    usage = subprocess.run([cli, "train"], capture_output=True, text=True)
    assert usage.returncode == 2
