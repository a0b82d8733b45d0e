import csv
import json

import numpy as np
import pytest

from cfsg import cli, imaging
from cfsg import network as net
from cfsg.checkpoint import load_checkpoint, save_checkpoint
from cfsg.evaluation import ConfusionMatrix, metrics, parse_report_csv

SMALL = {
    "version": 1,
    "training": {"batch_size": 2, "max_epochs": 1},
    "preprocessing": {"work_width": 64, "work_height": 64, "tile_size": 64, "crops_per_image": 1},
    "synthetic": {"scene": {"width": 64, "height": 64}},
    "mapping": {"tile_size": 32, "grids": [20, 10], "grid_px": 20},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(net.build_model(net.ArchitectureConfig(), seed=0), path)
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_writes_dataset_deterministically(tmp_path, config):
    assert run("--config", config, "synth", "--out", tmp_path / "a", "--count", 10) == 0
    assert run("--config", config, "synth", "--out", tmp_path / "b", "--count", 10) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(list(a.glob("image_*.png"))) == 10 and len(list(a.glob("mask_*.png"))) == 10
    seeds = [s["seed"] for s in json.loads((a / "manifest.json").read_text())["samples"]]
    assert len(set(seeds)) == 10
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()
    assert not list(a.glob(".stage-*"))


@pytest.mark.slow
def test_train_produces_checkpoint_and_history(tmp_path, config):
    run("--config", config, "synth", "--out", tmp_path / "tr", "--count", 4)
    run("--config", config, "synth", "--out", tmp_path / "va", "--count", 2, "--seed", 5000)
    out = tmp_path / "m.ckpt"
    assert run("--config", config, "train", "--train-dir", tmp_path / "tr", "--val-dir", tmp_path / "va",
               "--out", out, "--epochs", 2) == 0
    rows = list(csv.reader(open(tmp_path / "m.history.csv")))
    assert len(rows) == 1 + 2
    assert load_checkpoint(out).config == net.ArchitectureConfig()
    assert not list(tmp_path.glob(".*.tmp"))


def test_train_on_empty_dir_is_data_error(tmp_path, config):
    (tmp_path / "empty").mkdir()
    assert run("--config", config, "train", "--train-dir", tmp_path / "empty", "--val-dir", tmp_path / "empty",
               "--out", tmp_path / "m.ckpt") == 3
    assert not (tmp_path / "m.ckpt").exists()


def test_predict_writes_mapping_outputs(tmp_path, config, checkpoint, capsys):
    image, _ = imaging.synth_scene(imaging.SceneSpec(width=96, height=64, seed=1))
    imaging.save_image(image, tmp_path / "roi.png")
    out = tmp_path / "pred"
    assert run("--config", config, "predict", checkpoint, tmp_path / "roi.png", "--out", out,
               "--gsd", 1.78, "--grid", 100 // 5) == 0
    for name in ("mask.png", "map.png", "probabilities.npy", "heatmap.png", "prescription.png",
                 "prescription.csv", "spray_stats.csv", "summary.json", "fit.json"):
        assert (out / name).exists(), name
    assert imaging.load_mask(out / "mask.png").shape == (64, 96)
    assert set(json.loads((out / "fit.json").read_text())) >= {"slope", "intercept", "r_squared"}
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["grid_px"] == 20


def test_grid_100_reports_paper_cell(tmp_path, checkpoint):
    image = np.random.default_rng(0).random((128, 128, 3))
    imaging.save_image(image, tmp_path / "roi.png")
    assert run("map", checkpoint, tmp_path / "roi.png", "--out", tmp_path / "o", "--gsd", 1.78, "--grid", 100) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["cell"] == "17.8x17.8 cm^2" and summary["cell_side_cm"] == 17.8


def test_crf_changes_mask_not_probabilities(tmp_path, checkpoint):
    image, _ = imaging.synth_scene(imaging.SceneSpec(width=64, height=64, seed=2))
    imaging.save_image(image, tmp_path / "roi.png")
    run("predict", checkpoint, tmp_path / "roi.png", "--out", tmp_path / "plain")
    run("predict", checkpoint, tmp_path / "roi.png", "--out", tmp_path / "crf", "--crf")
    a = (tmp_path / "plain" / "probabilities.npy").read_bytes()
    assert a == (tmp_path / "crf" / "probabilities.npy").read_bytes()


def test_predict_tiled_roi(tmp_path, checkpoint):
    imaging.save_image(np.random.default_rng(0).random((70, 90, 3)), tmp_path / "roi.png")
    assert run("predict", checkpoint, tmp_path / "roi.png", "--out", tmp_path / "o", "--tile", 32,
               "--overlap", 8) == 0
    assert imaging.load_mask(tmp_path / "o" / "mask.png").shape == (70, 90)


def test_corrupt_checkpoint_exit_code(tmp_path, checkpoint):
    data = bytearray(open(checkpoint, "rb").read())
    data[500] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    imaging.save_image(np.zeros((32, 32, 3)), tmp_path / "i.png")
    assert run("predict", bad, tmp_path / "i.png", "--out", tmp_path / "o") == 3
    assert not (tmp_path / "o" / "mask.png").exists()


def test_eval_matches_predict_and_is_repeatable(tmp_path, config, checkpoint):
    run("--config", config, "synth", "--out", tmp_path / "ds", "--count", 2)
    assert run("eval", checkpoint, tmp_path / "ds", "--out", tmp_path / "e1", "--no-preprocess") == 0
    assert run("eval", checkpoint, tmp_path / "ds", "--out", tmp_path / "e2", "--no-preprocess") == 0
    for name in ("metrics.csv", "metrics.txt", "confusion.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    values = parse_report_csv((tmp_path / "e1" / "metrics.csv").read_text())
    assert list(values) == ["soil_OA", "soil_IOU", "crop_OA", "crop_IOU", "weed_OA", "weed_IOU", "mOA", "mIOU"]

    cm = ConfusionMatrix(3)
    for i in range(2):
        run("predict", checkpoint, tmp_path / "ds" / f"image_{i:04d}.png", "--out", tmp_path / f"p{i}")
        cm.accumulate(imaging.load_mask(tmp_path / f"p{i}" / "mask.png"),
                      imaging.load_mask(tmp_path / "ds" / f"mask_{i:04d}.png"))
    assert values["mIOU"] == metrics(cm).mean_iou


def test_eval_with_oracle_predictions_scores_one(tmp_path):
    mask = imaging.synth_scene(imaging.SceneSpec(width=64, height=64, seed=3))[1]
    cm = ConfusionMatrix(3).accumulate(mask, mask)
    m = metrics(cm)
    assert m.mean_iou == m.mean_class_accuracy == 1.0


def test_featmaps(tmp_path, checkpoint):
    imaging.save_image(np.random.default_rng(0).random((64, 64, 3)), tmp_path / "i.png")
    assert run("featmaps", checkpoint, tmp_path / "i.png", "--layer", "conv1", "--out", tmp_path / "f") == 0
    shallow = sorted((tmp_path / "f").glob("conv1_ch*.png"))
    assert len(shallow) == 8
    assert imaging.load_mask(shallow[0]).shape == (64, 64)
    run("featmaps", checkpoint, tmp_path / "i.png", "--layer", "conv26", "--out", tmp_path / "f")
    deep = sorted((tmp_path / "f").glob("conv26_ch*.png"))
    assert imaging.load_mask(deep[0]).shape[0] < 64
    index = json.loads((tmp_path / "f" / "conv1_index.json").read_text())
    assert index["channels"] == 8
    assert run("featmaps", checkpoint, tmp_path / "i.png", "--layer", "conv77", "--out", tmp_path / "g") == 3


def test_spraycurve_on_hand_counted_fixture(tmp_path, capsys):
    # 200x200 mask; weeds placed so the counts are known by construction
    mask = np.zeros((200, 200), np.uint8)
    mask[5, 5] = 2          # grid100 cell (0,0); grid50 (0,0); grid10 (0,0)
    mask[60, 60] = 2        # grid100 (0,0); grid50 (1,1); grid10 (6,6)
    mask[150:152, 150] = 2  # grid100 (1,1); grid50 (3,3); grid10 (15,15)
    imaging.save_mask(mask, tmp_path / "m.png")
    assert run("spraycurve", tmp_path / "m.png", "--grids", "100,50,10", "--gsd", 1.78, "--out", tmp_path / "s") == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "spraycurve.csv")))
    assert [(r["weed_grids"], r["free_weed_grids"]) for r in rows] == [("2", "2"), ("3", "13"), ("3", "397")]
    assert [r["saving_rate"] for r in rows] == ["50.00", "81.25", "99.25"]
    savings = [float(r["saving_rate"]) for r in rows]
    assert savings == sorted(savings)
    assert set(json.loads((tmp_path / "s" / "fit.json").read_text())) == {"slope", "intercept", "r_squared"}
    assert run("spraycurve", tmp_path / "m.png", "--grids", "300,10", "--out", tmp_path / "x") == 3


def test_weights_command(tmp_path, config, capsys):
    run("--config", config, "synth", "--out", tmp_path / "ds", "--count", 3)
    capsys.readouterr()
    assert run("weights", tmp_path / "ds") == 0
    out = capsys.readouterr().out
    assert out.startswith("soil=1.000 crop=")


def test_crf_command(tmp_path):
    rng = np.random.default_rng(0)
    np.save(tmp_path / "p.npy", rng.dirichlet(np.ones(3), (8, 8)))
    imaging.save_image(rng.random((8, 8, 3)), tmp_path / "i.png")
    assert run("crf", tmp_path / "p.npy", tmp_path / "i.png", "--out", tmp_path / "m.png", "--iterations", 0) == 0
    np.testing.assert_array_equal(imaging.load_mask(tmp_path / "m.png"), np.load(tmp_path / "p.npy").argmax(-1))


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"version": 1, "bogus": 1}))
    assert run("--config", bad, "synth", "--out", tmp_path / "o") == 2
    bad.write_text(json.dumps({"training": {}}))
    assert run("--config", bad, "synth", "--out", tmp_path / "o") == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 2


def test_divergence_exit_4(tmp_path, config, monkeypatch):
    run("--config", config, "synth", "--out", tmp_path / "ds", "--count", 2)
    from cfsg import training

    def explode(*_a, **_k):
        raise training.DivergenceError("loss is nan")

    monkeypatch.setattr(training, "train", explode)
    assert run("--config", config, "train", "--train-dir", tmp_path / "ds", "--val-dir", tmp_path / "ds",
               "--out", tmp_path / "m.ckpt") == 4


def test_thread_cap_env(tmp_path, config, monkeypatch):
    monkeypatch.setenv("CFSG_THREADS", "1")
    assert run("--config", config, "synth", "--out", tmp_path / "o", "--count", 1) == 0
