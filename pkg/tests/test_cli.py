import io
import json
import shutil
import subprocess

import numpy as np
import pytest

from bispike import cli
from bispike.checkpoint import checkpoint_load, checkpoint_save
from bispike.model import SpikingTransformer
from bispike.train import make_task, toy_model_config

CONFIG = {
    "schema_version": 1,
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "train": {"task": "synth_cls", "steps": 30, "batch_size": 16, "warmup_steps": 5, "eval_every": 10,
              "n_train": 256, "n_val": 64, "seq_len": 8, "peak_lr": 1e-3},
    "analysis": {"kinds": ["firing"], "sample_size": 32},
    "io": {"keep_checkpoints": True},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.json", CONFIG)
    code = cli.main(["train", "--config", str(cfg), "--out", str(root / "out")])
    return code, root


@pytest.fixture(scope="module")
def samples(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "val.npy"
    np.save(path, make_task("synth_cls", 0, n_train=8, n_val=512).val_x)
    return path


def fresh_checkpoint(path, **changes):
    model = SpikingTransformer(toy_model_config(**changes))
    checkpoint_save(path, model, run_config={"analysis": {"sample_size": 512}})
    return path


class TestTrain:
    def test_outputs(self, run):
        code, root = run
        out = root / "out"
        assert code == 0
        for name in ("metrics.csv", "checkpoint.splm", "calibration.json", "firing.json",
                     "checkpoint.step000010.splm", "checkpoint.step000030.splm"):
            assert (out / name).exists(), name

    def test_metrics_rows_and_columns(self, run):
        _, root = run
        text = (root / "out" / "metrics.csv").read_text().splitlines()
        assert text[0] == f"# schema_version={cli.METRICS_SCHEMA_VERSION}"
        header = text[1].split(",")
        assert header[:6] == ["step", "lr", "train_loss", "val_loss", "val_metric", "mean_firing_rate"]
        assert "r_block0.ff_hidden" in header
        rows = cli.read_metrics(root / "out" / "metrics.csv")
        assert len(rows) == 30 // 10
        assert [r["step"] for r in rows] == [10, 20, 30]

    def test_rerun_is_byte_identical(self, run, tmp_path):
        _, root = run
        assert cli.main(["train", "--config", str(root / "run.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (root / "out" / "metrics.csv").read_bytes()
        assert (tmp_path / "checkpoint.splm").read_bytes() == (root / "out" / "checkpoint.splm").read_bytes()

    def test_resume_reproduces_metrics(self, run, tmp_path):
        _, root = run
        shutil.copy(root / "out" / "metrics.csv", tmp_path / "metrics.csv")
        code = cli.main(["train", "--config", str(root / "run.json"), "--out", str(tmp_path),
                         "--resume", str(root / "out" / "checkpoint.step000010.splm")])
        assert code == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (root / "out" / "metrics.csv").read_bytes()

    def test_resume_with_mismatched_model(self, run, tmp_path):
        _, root = run
        doc = json.loads(json.dumps(CONFIG))
        doc["model"]["d_ff"] = 64
        cfg = write_config(tmp_path / "other.json", doc)
        code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"),
                         "--resume", str(root / "out" / "checkpoint.splm")])
        assert code == cli.EXIT_CONFIG

    def test_calibration_report(self, run):
        _, root = run
        doc = json.loads((root / "out" / "calibration.json").read_text())
        assert len(doc["alpha"]) == 6 and 0 < doc["mean_firing_rate"] < 1

    @pytest.mark.parametrize("patch, field", [(("train", "steps", "many"), "train.steps"),
                                              (("model", "colour", 3), "model"),
                                              (("train", "peak_lr", -1.0), "train.peak_lr"),
                                              (("io", "metrics", "../m.csv"), "io.metrics")])
    def test_bad_config_exits_2_without_outputs(self, tmp_path, capsys, patch, field):
        doc = json.loads(json.dumps(CONFIG))
        section, key, value = patch
        doc[section][key] = value
        cfg = write_config(tmp_path / "bad.json", doc)
        out = tmp_path / "out"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
        assert not out.exists()
        assert field in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_missing_config_is_io_error(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == cli.EXIT_IO

    def test_char_lm_needs_text(self, tmp_path):
        doc = json.loads(json.dumps(CONFIG))
        doc["train"]["task"] = "char_lm"
        cfg = write_config(tmp_path / "lm.json", doc)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3(self, tmp_path):
        doc = json.loads(json.dumps(CONFIG))
        doc["train"].update(peak_lr=1e30, warmup_steps=0)
        cfg = write_config(tmp_path / "div.json", doc)
        out = tmp_path / "o"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_DIVERGED
        assert checkpoint_load(out / "checkpoint.splm").step == 0


class TestAnalyze:
    def analyze(self, tmp_path, kind, ckpt, data, k=None):
        out = tmp_path / f"{kind}-{k}.json"
        argv = ["analyze", "--kind", kind, "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]
        if k is not None:
            argv += ["--k", str(k)]
        assert cli.main(argv) == 0
        return json.loads(out.read_text())

    def test_isometry_on_fresh_model(self, tmp_path, samples):
        doc = self.analyze(tmp_path, "isometry", fresh_checkpoint(tmp_path / "f.splm"), samples, k=2)
        assert doc["schema_version"] == cli.REPORT_SCHEMA_VERSION and doc["kind"] == "isometry"
        layers = doc["report"]["layers"]
        assert len(layers) == 12
        for row in layers:
            assert abs(row["phi_emp"] - (1 - row["r"])) < 0.02

    def test_energy_scales_with_T(self, tmp_path, samples):
        one = self.analyze(tmp_path, "energy", fresh_checkpoint(tmp_path / "t1.splm", T=1), samples)["report"]
        four = self.analyze(tmp_path, "energy", fresh_checkpoint(tmp_path / "t4.splm", T=4), samples)["report"]
        ac1 = {l["name"]: l for l in one["layers"] if l["kind"] == "ac"}
        ac4 = {l["name"]: l for l in four["layers"] if l["kind"] == "ac"}
        ratio = four["spike_pj"]["fp32"] / one["spike_pj"]["fp32"]
        rate_ratio = np.mean([ac4[n]["r"] / ac1[n]["r"] for n in ac1])
        assert 0.75 < rate_ratio < 1.25
        assert 3.0 < ratio < 5.0
        assert set(four["total_pj"]) == {"fp32", "fp16"}

    def test_firing_sweep_decreases(self, tmp_path, samples):
        ckpt = fresh_checkpoint(tmp_path / "f.splm")
        rates = [self.analyze(tmp_path, "firing", ckpt, samples, k=k)["report"]["mean_firing_rate"]
                 for k in (2, 3, 4)]
        assert rates[0] > rates[1] > rates[2]

    def test_trained_checkpoint_uses_frozen_alpha(self, run, tmp_path, samples):
        _, root = run
        doc = self.analyze(tmp_path, "firing", root / "out" / "checkpoint.splm", samples)
        assert doc["n_samples"] == 32 and doc["k"] == 2.0

    def test_raw_bytes_data(self, tmp_path):
        corpus = tmp_path / "c.bin"
        corpus.write_bytes(bytes(range(16)) * 64)
        doc = self.analyze(tmp_path, "firing", fresh_checkpoint(tmp_path / "f.splm"), corpus)
        assert doc["n_samples"] == 64

    def test_missing_data(self, tmp_path):
        ckpt = fresh_checkpoint(tmp_path / "f.splm")
        code = cli.main(["analyze", "--kind", "energy", "--ckpt", str(ckpt), "--out", str(tmp_path / "e.json")])
        assert code == cli.EXIT_CONFIG

    def test_bad_checkpoint(self, tmp_path, samples):
        bad = tmp_path / "bad.splm"
        bad.write_bytes(b"garbage")
        code = cli.main(["analyze", "--kind", "energy", "--ckpt", str(bad), "--data", str(samples),
                         "--out", str(tmp_path / "e.json")])
        assert code == cli.EXIT_IO

    def test_out_of_vocab_data(self, tmp_path):
        data = tmp_path / "x.npy"
        np.save(data, np.full((4, 8), 99))
        code = cli.main(["analyze", "--kind", "energy", "--ckpt", str(fresh_checkpoint(tmp_path / "f.splm")),
                         "--data", str(data), "--out", str(tmp_path / "e.json")])
        assert code == cli.EXIT_CONFIG


class TestGradcheck:
    def test_default_passes(self):
        buf = io.StringIO()
        assert cli.cmd_gradcheck(0, stream=buf) == 0
        assert "71/71 checks passed" in buf.getvalue()

    @pytest.mark.parametrize("op", ["softmax", "elastic_bi", "layer_norm"])
    def test_perturbation_is_named(self, op):
        buf = io.StringIO()
        assert cli.cmd_gradcheck(0, perturb=op, stream=buf) == cli.EXIT_CHECK_FAILED
        failed = buf.getvalue().rsplit("failed: ", 1)[1]
        assert op in failed

    def test_unknown_perturbation(self):
        assert cli.main(["gradcheck", "--perturb", "nonsense"]) == cli.EXIT_CONFIG


class TestEntryPoint:
    def test_usage_error(self):
        assert cli.main(["analyze"]) == cli.EXIT_CONFIG

    def test_thread_env_validation(self, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        assert cli.main(["gradcheck"]) == cli.EXIT_CONFIG

    def test_console_script(self):
        proc = subprocess.run(["bispike", "gradcheck", "--seed", "1"], capture_output=True, text=True,
                              env={"BISPIKE_NUM_THREADS": "1", "PATH": "/usr/local/bin:/usr/bin:/bin"})
        assert proc.returncode == 0, proc.stderr
        assert "checks passed" in proc.stdout
