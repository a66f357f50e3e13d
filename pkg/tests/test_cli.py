import json
import math
import os

import pytest
import yaml

from app.main import (
    EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError, build_parser, collect_overrides, config_echo,
    join_signed_values, load_config, main, parse_grid, parse_list, set_path,
)
from app.tools.logger import LOG_LEVEL_ENV

TINY = {
    "data": {"synthetic": {"n_samples": 210, "dims": [5, 4, 3], "seed": 3}},
    "train": {
        "epochs": 1,
        "batch_size": 16,
        "val_snr_grid": [10.0],
        "model": {"feature_hidden": 6, "latent_dims": [3, 3, 3], "transmitted_dim": 6,
                  "fusion_hidden": 8, "receiver_latent_dim": 4, "decoder_hidden": 6, "disc_hidden": 8},
        "channel": {"family": "awgn", "snr_db": 10.0},
    },
    "eval": {"seeds": [0], "workers": 2},
}


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(LOG_LEVEL_ENV, "ERROR")
    monkeypatch.delenv("MMTOC_OUTPUT_ROOT", raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["data_dir"] = str(tmp_path / "data")
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


def _manifest(outdir):
    with open(os.path.join(outdir, "run.json"), encoding="utf-8") as f:
        return json.load(f)


def _rows(path):
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()[1:]


class TestParsing:
    def test_grid_range(self):
        grid = parse_grid("-12:18:3")
        assert len(grid) == 11
        assert grid[0] == -12.0
        assert grid[-1] == 18.0

    def test_grid_list_with_noiseless(self):
        assert parse_grid("0, 6,inf") == [0.0, 6.0, math.inf]

    @pytest.mark.parametrize("bad", ["5:0:1", "0:5:0", "a:b:c", "x,1"])
    def test_grid_rejects(self, bad):
        with pytest.raises(ConfigError):
            parse_grid(bad)

    def test_list(self):
        assert parse_list("0, 1,2", int) == [0, 1, 2]
        assert parse_list(None) is None
        with pytest.raises(ConfigError):
            parse_list("1,x", int)

    def test_set_path_replaces_scalars(self):
        cfg = {"train": None}
        set_path(cfg, "train.channel.snr_db", 3.0)
        assert cfg == {"train": {"channel": {"snr_db": 3.0}}}

    def test_training_flags(self):
        args = build_parser().parse_args(["train", "--no-grl", "--noiseless-train", "--epochs", "3"])
        o = collect_overrides(args)
        assert o["train.alpha_max"] == 0.0
        assert o["train.channel.snr_db"] == math.inf
        assert o["train.epochs"] == 3

    def test_eval_seed_becomes_seed_list(self):
        args = build_parser().parse_args(["eval", "--checkpoint", "c.json", "--seed", "4"])
        assert collect_overrides(args)["eval.seeds"] == [4]

    def test_negative_grid_value_is_joined(self):
        assert join_signed_values(["sweep", "--grid", "-12:18:3", "--snr", "-6"]) == [
            "sweep", "--grid=-12:18:3", "--snr=-6"]

    def test_negative_grid_parses(self):
        argv = join_signed_values(["sweep", "--checkpoint", "c.json", "--grid", "-12:18:3"])
        args = build_parser().parse_args(argv)
        assert args.grid == "-12:18:3"
        assert parse_grid(args.grid)[0] == -12.0


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config("missing.yaml")
        assert cfg.train.lambda_red == 0.4
        assert cfg.eval.snr_grid[0] == -12.0

    def test_required_file_missing(self):
        with pytest.raises(ConfigError):
            load_config("missing.yaml", required=True)

    def test_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  epochs: 5\noutput:\n  root: from_yaml\n", encoding="utf-8")
        monkeypatch.setenv("MMTOC_OUTPUT_ROOT", "from_env")
        cfg = load_config(str(path), {"train.epochs": 7, "train.lambda_red": None})
        assert cfg.train.epochs == 7
        assert cfg.train.lambda_red == 0.4
        assert cfg.output.root == "from_env"

    def test_env_log_level(self, monkeypatch):
        monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
        assert load_config(None).logging.level == "DEBUG"

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_echo_keeps_noiseless_snr(self):
        cfg = load_config(None, {"train.channel.snr_db": math.inf})
        echoed = yaml.safe_load(yaml.safe_dump(config_echo(cfg)))
        assert echoed["train"]["channel"]["snr_db"] == math.inf
        assert echoed["train"]["model"]["latent_dims"] == [8, 8, 8]


class TestCommands:
    def test_gen_data_is_deterministic(self, tiny_config, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["gen-data", "--config", tiny_config, "--out", a]) == EXIT_OK
        assert main(["gen-data", "--config", tiny_config, "--out", b]) == EXIT_OK
        for name in ("train.txt", "val.txt", "test.txt"):
            with open(os.path.join(a, name)) as fa, open(os.path.join(b, name)) as fb:
                assert fa.read() == fb.read()
        m = _manifest(a)
        assert m["status"] == "ok"
        assert sum(m["counts"].values()) == 210
        assert os.path.exists(os.path.join(a, "artifacts_index.md"))
        assert os.path.exists(tmp_path / "store" / "run_index.jsonl")

    def test_invalid_rho(self, tiny_config):
        assert main(["gen-data", "--config", tiny_config, "--rho", "1.5"]) == EXIT_CONFIG

    def test_missing_config_file(self):
        assert main(["gen-data", "--config", "nope.yaml"]) == EXIT_CONFIG

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--no-such-flag"])
        assert info.value.code == EXIT_CONFIG

    def test_train_without_dataset(self, tiny_config, tmp_path):
        out = str(tmp_path / "run")
        assert main(["train", "--config", tiny_config, "--out", out]) == EXIT_CONFIG
        m = _manifest(out)
        assert m["status"] == "error"
        assert m["error"]["type"] == "FileNotFoundError"

    def test_train_eval_sweep(self, tiny_config, tmp_path):
        assert main(["gen-data", "--config", tiny_config]) == EXIT_OK

        train_dir = str(tmp_path / "train")
        assert main(["train", "--config", tiny_config, "--out", train_dir, "--quiet"]) == EXIT_OK
        for name in ("checkpoint.json", "epoch_log.csv", "summary.md", "config.yaml", "run.log"):
            assert os.path.exists(os.path.join(train_dir, name)), name
        assert len(_rows(os.path.join(train_dir, "epoch_log.csv"))) == 1
        ckpt = os.path.join(train_dir, "checkpoint.json")

        eval_dir = str(tmp_path / "eval")
        assert main(["eval", "--config", tiny_config, "--checkpoint", ckpt, "--out", eval_dir,
                     "--quiet"]) == EXIT_OK
        rows = _rows(os.path.join(eval_dir, "results.csv"))
        assert rows[0].startswith("awgn,inf,0,")
        assert len(rows) == 3
        assert len(_rows(os.path.join(eval_dir, "redundancy.csv"))) == 3
        assert _manifest(eval_dir)["headline"]["points"] == 1

        sweep_dir = str(tmp_path / "sweep")
        assert main(["sweep", "--config", tiny_config, "--checkpoint", ckpt, "--out", sweep_dir,
                     "--grid", "0:6:3", "--families", "awgn,rayleigh", "--no-mi", "--quiet"]) == EXIT_OK
        rows = _rows(os.path.join(sweep_dir, "results.csv"))
        assert len(rows) == 6 + 2 * 6
        assert _manifest(sweep_dir)["channel_stats"]["rayleigh_draws"] > 0

        negative_dir = str(tmp_path / "negative")
        assert main(["sweep", "--config", tiny_config, "--checkpoint", ckpt, "--out", negative_dir,
                     "--grid", "-12:18:3", "--families", "awgn", "--no-mi", "--quiet"]) == EXIT_OK
        rows = _rows(os.path.join(negative_dir, "results.csv"))
        assert len(rows) == 3 * 11
        assert rows[0].startswith("awgn,-12,0,")

    def test_repeated_runs_are_bit_identical(self, tiny_config, tmp_path):
        assert main(["gen-data", "--config", tiny_config]) == EXIT_OK
        outputs = []
        for tag in ("a", "b"):
            train_dir = str(tmp_path / f"train_{tag}")
            eval_dir = str(tmp_path / f"eval_{tag}")
            assert main(["train", "--config", tiny_config, "--out", train_dir, "--quiet"]) == EXIT_OK
            assert main(["eval", "--config", tiny_config, "--checkpoint",
                         os.path.join(train_dir, "checkpoint.json"), "--out", eval_dir, "--snr", "-6",
                         "--channel", "rayleigh", "--quiet"]) == EXIT_OK
            with open(os.path.join(train_dir, "epoch_log.csv"), "rb") as f:
                log = f.read()
            with open(os.path.join(eval_dir, "results.csv"), "rb") as f:
                results = f.read()
            outputs.append((log, results))
        assert outputs[0] == outputs[1]

    def test_eval_dims_mismatch(self, tiny_config, tmp_path):
        assert main(["gen-data", "--config", tiny_config]) == EXIT_OK
        train_dir = str(tmp_path / "train")
        assert main(["train", "--config", tiny_config, "--out", train_dir, "--quiet"]) == EXIT_OK

        other = json.loads(json.dumps(TINY))
        other["data"]["synthetic"]["dims"] = [6, 4, 3]
        other["data"]["data_dir"] = str(tmp_path / "other")
        path = tmp_path / "other.yaml"
        path.write_text(yaml.safe_dump(other), encoding="utf-8")
        assert main(["gen-data", "--config", str(path)]) == EXIT_OK
        code = main(["eval", "--config", str(path), "--checkpoint",
                     os.path.join(train_dir, "checkpoint.json"), "--out", str(tmp_path / "e")])
        assert code == EXIT_CONFIG

    def test_missing_checkpoint(self, tiny_config, tmp_path):
        assert main(["gen-data", "--config", tiny_config]) == EXIT_OK
        code = main(["eval", "--config", tiny_config, "--checkpoint", "none.json",
                     "--out", str(tmp_path / "e")])
        assert code == EXIT_CONFIG

    def test_divergence_exit_code(self, tiny_config, tmp_path):
        assert main(["gen-data", "--config", tiny_config]) == EXIT_OK
        with open(tiny_config, encoding="utf-8") as f:
            cfg = yaml.safe_load(f)
        cfg["train"]["divergence_threshold"] = 1e-3
        with open(tiny_config, "w", encoding="utf-8") as f:
            yaml.safe_dump(cfg, f)
        out = str(tmp_path / "run")
        assert main(["train", "--config", tiny_config, "--out", out, "--quiet"]) == EXIT_RUNTIME
        assert _manifest(out)["error"]["type"] == "TrainingDiverged"
