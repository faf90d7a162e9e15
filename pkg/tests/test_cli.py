import json

import numpy as np
import pytest
import yaml

from csikit import cli
from csikit.autodiff import ConfigError
from csikit.channel import load_dataset
from csikit.training import load_checkpoint

TINY = {
    "channel": {"n_t": 4, "n_c": 64, "n_a": 8, "paths": 2, "max_delay_tap": 3, "seed": 5},
    "data": {"count": 30},
    "model": {"d_model": 8, "seq_len": 8, "n_heads": 2, "n_layers": 1, "conv_kernel": 3,
              "ff_expansion": 2, "cr": 4},
    "training": {"epochs": 2, "batch_size": 8},
    "compare": {"epochs": 1},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("CSIKIT_RUN_DIR", str(tmp_path / "runs"))
    (tmp_path / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    return tmp_path


def run(workdir, *argv):
    return cli.main([argv[0], "--config", str(workdir / "tiny.yaml"), *argv[1:]])


def reports(workdir):
    lines = (workdir / "runs" / "reports.jsonl").read_text().splitlines()
    return [json.loads(s) for s in lines]


def ckpt_file(workdir, reported):
    return workdir / "runs" / reported


@pytest.fixture
def trained(workdir):
    assert run(workdir, "gen-data") == 0
    assert run(workdir, "train") == 0
    return workdir, reports(workdir)[-1]["checkpoint"]


class TestConfig:
    def test_defaults_validate(self):
        cfg = cli.RunConfig.build()
        assert cfg.model_config().cr == 4 and cfg.data["split"] == [10, 3, 2]

    def test_unknown_section_and_key(self):
        with pytest.raises(ConfigError):
            cli.RunConfig.build({"optimizer": {}})
        with pytest.raises(ConfigError):
            cli.RunConfig.build({"model": {"depth": 3}})
        with pytest.raises(ConfigError):
            cli.RunConfig.build(overrides=("training.lr=1",))

    def test_set_parses_values(self):
        cfg = cli.RunConfig.build(overrides=("model.cr=16", "training.lr_max=0.001", "quantizer.dim=null"))
        assert cfg.model["cr"] == 16 and cfg.training["lr_max"] == 0.001 and cfg.quantizer["dim"] is None

    def test_exponent_floats(self, tmp_path):
        (tmp_path / "c.yaml").write_text("training:\n  lr_min: 5e-5\n  lr_max: 2e-4\n")
        cfg = cli.RunConfig.build(cli.load_config_file(tmp_path / "c.yaml"), ("training.beta=1e-1",))
        assert (cfg.training["lr_min"], cfg.training["lr_max"], cfg.training["beta"]) == (5e-5, 2e-4, 0.1)

    def test_bad_set_syntax(self):
        with pytest.raises(ConfigError):
            cli.RunConfig.build(overrides=("cr=16",))

    def test_invalid_values_caught_early(self):
        with pytest.raises(ConfigError):
            cli.RunConfig.build(overrides=("model.cr=3",))
        with pytest.raises(ConfigError):
            cli.RunConfig.build(overrides=("channel.n_a=16",))  # no longer matches model.seq_len

    def test_hash_ignores_paths(self):
        a = cli.RunConfig.build(overrides=("paths.run_dir=/x",))
        b = cli.RunConfig.build()
        c = cli.RunConfig.build(overrides=("training.seed=1",))
        assert a.config_hash() == b.config_hash() != c.config_hash()

    def test_json_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(TINY))
        cfg = cli.RunConfig.build(cli.load_config_file(tmp_path / "c.json"))
        assert cfg.model["d_model"] == 8

    @pytest.mark.parametrize("count,split", [(150, (100, 30, 20)), (15, (10, 3, 2)), (16, (10, 3, 3))])
    def test_split_counts(self, count, split):
        assert cli.split_counts(count, [10, 3, 2]) == split


class TestGenData:
    def test_splits_written(self, workdir):
        assert run(workdir, "gen-data") == 0
        sizes = [len(load_dataset(workdir / "runs" / "data" / f"{s}.csid")[0]) for s in cli.SPLITS]
        assert sizes == [20, 6, 4]

    def test_byte_identical_rerun(self, workdir, tmp_path):
        run(workdir, "gen-data")
        first = {s: (workdir / "runs" / "data" / f"{s}.csid").read_bytes() for s in cli.SPLITS}
        run(workdir, "gen-data", "--set", f"paths.data_dir={tmp_path / 'again'}")
        assert all((tmp_path / "again" / f"{s}.csid").read_bytes() == first[s] for s in cli.SPLITS)

    def test_splits_disjoint(self, workdir):
        run(workdir, "gen-data")
        data = np.concatenate([load_dataset(workdir / "runs" / "data" / f"{s}.csid")[0] for s in cli.SPLITS])
        flat = data.reshape(len(data), -1)
        assert len(np.unique(flat, axis=0)) == len(flat)

    def test_shared_scale(self, workdir):
        run(workdir, "gen-data")
        scales = {load_dataset(workdir / "runs" / "data" / f"{s}.csid")[1] for s in cli.SPLITS}
        assert len(scales) == 1


class TestTrainEval:
    def test_checkpoint_loads(self, trained):
        workdir, ckpt = trained
        model, quantizer, meta = load_checkpoint(ckpt_file(workdir, ckpt))
        assert quantizer is None and meta["config_hash"]
        assert model.cfg.input_gain > 1.0  # fitted to the training split

    def test_eval_report(self, trained):
        workdir, ckpt = trained
        assert run(workdir, "eval", "--checkpoint", ckpt) == 0
        row = reports(workdir)[-1]
        assert row["bits_per_csi"] == 32 * (8 * 8 // 4)
        assert row["flops"] > 0 and row["params"] > 0
        assert {"config_hash", "seed"} <= row.keys()

    def test_svqvae_bits(self, workdir):
        run(workdir, "gen-data")
        assert run(workdir, "train", "--quantizer", "svqvae", "--bits", "5") == 0
        ckpt = reports(workdir)[-1]["checkpoint"]
        _, q, _ = load_checkpoint(ckpt_file(workdir, ckpt))
        assert q.codebook.size == 32
        run(workdir, "eval", "--checkpoint", ckpt)
        assert reports(workdir)[-1]["bits_per_csi"] == (8 * 8 // 4) * 5

    def test_reruns_append(self, trained):
        workdir, ckpt = trained
        n = len(reports(workdir))
        run(workdir, "eval", "--checkpoint", ckpt)
        run(workdir, "eval", "--checkpoint", ckpt)
        rows = reports(workdir)
        assert len(rows) == n + 2 and rows[-1] == rows[-2]

    def test_reported_paths_relative_to_run_root(self, trained):
        workdir, ckpt = trained
        assert not ckpt.startswith("/") and ckpt.endswith("model.ckpt")
        assert run(workdir, "eval", "--checkpoint", str(ckpt_file(workdir, ckpt))) == 0
        assert reports(workdir)[-1]["checkpoint"] == ckpt

    def test_train_runs_get_fresh_directories(self, trained):
        workdir, first = trained
        run(workdir, "train")
        assert reports(workdir)[-1]["checkpoint"] != first

    def test_ablation_flag(self, workdir):
        run(workdir, "gen-data")
        assert run(workdir, "train", "--ablation", "none_conv") == 0
        model, _, _ = load_checkpoint(ckpt_file(workdir, reports(workdir)[-1]["checkpoint"]))
        assert not model.cfg.conv_module_enabled


class TestCompareAndFlops:
    def test_grid_shape(self, trained):
        workdir, ckpt = trained
        assert run(workdir, "quantize-compare", "--checkpoint", ckpt) == 0
        rows = [r for r in reports(workdir) if r["command"] == "quantize-compare"]
        assert len(rows) == 12
        assert {(r["quantizer"], r["bits"]) for r in rows} == {(k, b) for k in cli.QUANTIZER_KINDS for b in (3, 4, 5)}
        assert len({r["seed"] for r in rows}) == 1

    def test_flops_matches_accountant(self, workdir):
        from csikit.conformer import ConformerConfig, flops_count

        assert cli.main(["flops"]) == 0
        rows = [r for r in reports(workdir) if r["command"] == "flops"]
        assert [r["cr"] for r in rows] == [4, 8, 16, 32, 64]
        assert rows[0]["flops"] == flops_count(ConformerConfig(cr=4))

    def test_human_table_printed(self, workdir, capsys):
        cli.main(["flops"])
        out = capsys.readouterr().out
        assert "flops" in out.splitlines()[0] and "27770880" in out


class TestExitCodes:
    def test_config_error(self, workdir):
        assert run(workdir, "train", "--set", "model.bogus=1") == cli.EXIT_CONFIG

    def test_missing_data(self, workdir):
        assert run(workdir, "train") == cli.EXIT_DATA

    def test_missing_checkpoint_argument(self, workdir):
        assert run(workdir, "eval") == cli.EXIT_CONFIG

    def test_checkpoint_config_mismatch(self, trained, capsys):
        workdir, ckpt = trained
        assert run(workdir, "eval", "--checkpoint", ckpt, "--set", "model.cr=8") == cli.EXIT_CONFIG
        assert "model.cr: checkpoint=4 config=8" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, trained, tmp_path):
        workdir, _ = trained
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        assert run(workdir, "eval", "--checkpoint", str(tmp_path / "bad.ckpt")) == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, workdir):
        run(workdir, "gen-data")
        assert run(workdir, "train", "--set", "training.lr_max=1e300", "--set", "training.lr_min=1e299") \
            == cli.EXIT_NUMERIC

    def test_module_entry_point(self, workdir):
        import subprocess
        import sys

        proc = subprocess.run([sys.executable, "-m", "csikit", "flops", "--cr", "16"], capture_output=True, text=True)
        assert proc.returncode == 0 and "26198016" in proc.stdout
