import csv
import json

import numpy as np
import pytest

from data import read_pgm, save_image
from main import main

TINY = {
    "data": {"input_size": 16, "image_size": 16, "n_train": 6, "n_test": 3, "num_structures": 2},
    "generator": {"kind": "mini_unet", "base_channels": 4, "depth": 2, "epochs": 1, "batch_size": 3, "lr": 0.001},
    "segmenter": {"kind": "mini_unet", "base_channels": 4, "depth": 2, "epochs": 1, "batch_size": 3},
    "train": {"seed": 2},
}


def tree_bytes(root):
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


class TestArguments:

    def test_missing_required_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exit_info:
            main(["train-gen", "--out", str(tmp_path)])
        assert exit_info.value.code == 1

    def test_unknown_command(self, tmp_path):
        with pytest.raises(SystemExit) as exit_info:
            main(["distill", "--out", str(tmp_path)])
        assert exit_info.value.code == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"generator": {"momentum": 0.9}}))
        assert main(["synth", "--out", str(tmp_path / "out"), "--config", str(path)]) == 1
        assert "momentum" in capsys.readouterr().err

    def test_unknown_model_kind(self, tmp_path, tiny_config):
        main(["synth", "--out", str(tmp_path / "synth"), "--config", tiny_config])
        code = main(["ablation", "--out", str(tmp_path / "ablation"), "--config", tiny_config,
                     "--manifest", str(tmp_path / "synth" / "a_train.json"),
                     "--test-manifest", str(tmp_path / "synth" / "b_test.json"), "--generators", "resnet"])
        assert code == 1

    @pytest.mark.parametrize("blob", [b"JUNK" + bytes(40), b"LBCK\x01\x00"])
    def test_corrupt_checkpoint_is_runtime_failure(self, tmp_path, tiny_config, blob):
        main(["synth", "--out", str(tmp_path / "synth"), "--config", tiny_config])
        broken = tmp_path / "broken.lbck"
        broken.write_bytes(blob)
        code = main(["infer", "--out", str(tmp_path / "pred"), "--config", tiny_config,
                     "--manifest", str(tmp_path / "synth" / "b_test.json"),
                     "--gen-ckpt", str(broken), "--seg-ckpt", str(broken)])
        assert code == 2

    def test_missing_manifest_is_runtime_failure(self, tmp_path, tiny_config):
        code = main(["train-gen", "--out", str(tmp_path), "--config", tiny_config,
                     "--manifest", str(tmp_path / "nowhere.json")])
        assert code == 2


class TestCommands:

    def test_synth_is_byte_identical(self, tmp_path, tiny_config, capsys):
        assert main(["synth", "--out", str(tmp_path / "one"), "--config", tiny_config]) == 0
        assert main(["synth", "--out", str(tmp_path / "two"), "--config", tiny_config]) == 0
        assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
        assert (tmp_path / "one" / "config.resolved.json").exists()
        assert "6 images" in capsys.readouterr().out

    def test_seed_flag_changes_benchmark(self, tmp_path, tiny_config):
        main(["synth", "--out", str(tmp_path / "one"), "--config", tiny_config])
        main(["synth", "--out", str(tmp_path / "two"), "--config", tiny_config, "--seed", "9"])
        one, two = tree_bytes(tmp_path / "one"), tree_bytes(tmp_path / "two")
        assert one["a_train.json"] == two["a_train.json"]
        assert one != two

    def test_edges_of_constant_image(self, tmp_path):
        save_image(tmp_path / "flat.pgm", np.full((16, 16), 0.4))
        assert main(["edges", "--in", str(tmp_path / "flat.pgm"), "--out", str(tmp_path / "edges")]) == 0
        samples, maxval = read_pgm(tmp_path / "edges" / "flat.edges.pgm")
        assert maxval == 255
        assert samples.shape == (16, 16)
        assert not samples.any()

    def test_edges_of_square(self, tmp_path):
        image = np.zeros((32, 32))
        image[8:24, 8:24] = 1.0
        save_image(tmp_path / "square.pgm", image)
        assert main(["edges", "--in", str(tmp_path / "square.pgm"), "--out", str(tmp_path)]) == 0
        samples, _ = read_pgm(tmp_path / "square.edges.pgm")
        assert set(np.unique(samples)) == {0, 255}

    def test_full_run(self, tmp_path, tiny_config, capsys):
        synth, run = tmp_path / "synth", tmp_path / "run"
        common = ["--config", tiny_config]
        assert main(["synth", "--out", str(synth)] + common) == 0
        assert main(["train-gen", "--out", str(run / "gen"), "--manifest", str(synth / "a_train.json")] + common) == 0
        gen_ckpt = run / "gen" / "generator.lbck"
        assert (run / "gen" / "generator.runlog.jsonl").exists()
        assert json.loads((run / "gen" / "generator.record.json").read_text())["stage"] == "generator"

        assert main(["train-seg", "--out", str(run / "seg"), "--manifest", str(synth / "a_train.json"),
                     "--gen-ckpt", str(gen_ckpt)] + common) == 0
        seg_ckpt = run / "seg" / "segmenter.lbck"
        checkpoints = [gen_ckpt.read_bytes(), seg_ckpt.read_bytes()]

        assert main(["infer", "--out", str(run / "pred"), "--manifest", str(synth / "b_test.json"),
                     "--gen-ckpt", str(gen_ckpt), "--seg-ckpt", str(seg_ckpt)] + common) == 0
        assert [gen_ckpt.read_bytes(), seg_ckpt.read_bytes()] == checkpoints
        assert sorted(p.name for p in (run / "pred").glob("*.pred.pgm")) == [
            "img_0000.pred.pgm", "img_0001.pred.pgm", "img_0002.pred.pgm"]

        capsys.readouterr()
        assert main(["eval", "--out", str(run / "eval"), "--manifest", str(synth / "b_test.json"),
                     "--in", str(run / "pred")] + common) == 0
        assert capsys.readouterr().out.splitlines()[1].startswith("LowBridge | ")
        metrics = json.loads((run / "eval" / "metrics.json").read_text())
        assert metrics["n_samples"] == 3
        with open(run / "eval" / "metrics.csv", newline="") as file:
            rows = list(csv.reader(file))
        assert rows[0] == ["class", "dice", "asd_mm"]
        assert rows[-1][0] == "average"

    def test_eval_missing_prediction(self, tmp_path, tiny_config):
        main(["synth", "--out", str(tmp_path / "synth"), "--config", tiny_config])
        (tmp_path / "empty").mkdir()
        code = main(["eval", "--out", str(tmp_path / "eval"), "--manifest", str(tmp_path / "synth" / "b_test.json"),
                     "--in", str(tmp_path / "empty"), "--config", tiny_config])
        assert code == 1

    def test_baseline(self, tmp_path, tiny_config, capsys):
        synth = tmp_path / "synth"
        main(["synth", "--out", str(synth), "--config", tiny_config])
        capsys.readouterr()
        assert main(["baseline", "--out", str(tmp_path / "base"), "--config", tiny_config, "--mode", "no_adapt",
                     "--manifest", str(synth / "a_train.json"), "--test-manifest", str(synth / "b_test.json")]) == 0
        assert capsys.readouterr().out.startswith("no_adapt ")
        assert (tmp_path / "base" / "metrics.json").exists()
