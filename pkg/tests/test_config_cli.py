import numpy as np
import pytest

from tempered_dp import cli, experiments
from tempered_dp.config import ConfigError, ExperimentConfig, parse_config


def test_empty_text_gives_defaults():
    assert parse_config("") == ExperimentConfig()


def test_comments_and_later_keys_win():
    cfg = parse_config("""
        # a comment
        noise_multiplier = 1.1   # trailing
        epochs = 3
        epochs = 4
        sweep_scale = 1, 2.5
        private = false
        train_subset = none
    """)
    assert cfg.noise_multiplier == 1.1
    assert cfg.epochs == 4
    assert cfg.sweep_scale == (1.0, 2.5)
    assert cfg.private is False
    assert cfg.train_subset is None


def test_noise_multiplier_reaches_dp_config():
    cfg = experiments.resolve(parse_config("noise_multiplier = 1.1"))
    assert experiments.dp_config(cfg, 60_000).noise_multiplier == 1.1


def test_near_miss_key_is_named():
    with pytest.raises(ConfigError) as e:
        parse_config("nois_multiplier = 1.1")
    msg = str(e.value)
    assert "did you mean 'noise_multiplier'" in msg
    assert "line 1" in msg and "valid keys" in msg


def test_bad_values_and_lines():
    with pytest.raises(ConfigError, match="bad value for epochs"):
        parse_config("epochs = many")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("epochs 3")


def test_to_text_round_trips():
    cfg = parse_config("scale = 1.5\nprobes = activation\ndata_dir = /x\nsteps = 7")
    assert parse_config(cfg.to_text()) == cfg


def test_resolve_fills_dataset_defaults():
    cfg = experiments.resolve(parse_config("dataset = fashion-mnist\nfull = true"))
    assert cfg.epochs == 40
    assert cfg.budget_epsilon == 2.7
    assert cfg.learning_rate == pytest.approx(0.332)
    assert cfg.architecture == "mnist"
    with pytest.raises(ConfigError, match="--long"):
        experiments.resolve(parse_config("dataset = cifar10"))
    with pytest.raises(ConfigError, match="unknown dataset"):
        experiments.resolve(parse_config("dataset = svhn"))


def test_auto_noise_hits_the_budget():
    from tempered_dp.accountant import epsilon_for_training

    cfg = experiments.resolve(ExperimentConfig())
    d = experiments.dp_config(cfg, 60_000)
    assert d.noise_multiplier == pytest.approx(0.840521, abs=1e-6)
    assert epsilon_for_training(d.q(60_000), d.noise_multiplier, d.total_steps(60_000),
                                1e-5).epsilon == pytest.approx(2.93, abs=1e-6)


def test_cli_flags_override_config_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("epochs = 2\nseed = 5\n")
    args = cli.build_parser().parse_args(["train", "--config", str(f), "--seed", "9", "--full"])
    cfg = cli.config_from_args(args)
    assert (cfg.epochs, cfg.seed, cfg.full) == (2, 9, True)


def test_cli_accountant_table_and_inversion(tmp_path, capsys):
    rc = cli.main(["accountant", "--epochs", "15", "--solve-for", "noise_multiplier",
                   "--checkpoints", "3", "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "noise_multiplier = 0.840521" in out
    lines = (tmp_path / "accountant.csv").read_text().splitlines()
    assert lines[0] == "steps,epochs,epsilon,optimal_order"
    assert lines[-1].startswith("3516,") and ",2.93," in lines[-1]


def test_cli_accountant_infeasible(tmp_path, capsys):
    rc = cli.main(["accountant", "--target-epsilon", "0.01", "--solve-for", "noise_multiplier",
                   "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "infeasible" in capsys.readouterr().err


def test_cli_config_error_exit_code(tmp_path, capsys):
    f = tmp_path / "c.cfg"
    f.write_text("nois_multiplier = 1\n")
    assert cli.main(["train", "--config", str(f)]) == 2
    assert "noise_multiplier" in capsys.readouterr().err


def test_cli_bounds_writes_csv(tmp_path):
    rc = cli.main(["bounds", "--trials", "50", "--dim", "10", "--num-classes", "3",
                   "--out-dir", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "bounds.csv").read_text().startswith("trial,kind,norm,bound,ratio\n")
    assert (tmp_path / "config.resolved").exists()


def _synthetic(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 10, n)
    x = rng.random((n, 28, 28, 1)).astype(np.float32) * 0.2
    for i, c in enumerate(y):
        x[i, 2 * c + 2 : 2 * c + 5, 4:24, 0] = 1.0
    from tempered_dp.data import DatasetSplit

    return DatasetSplit(x, y, "synthetic", "train")


def test_cmd_train_writes_report_and_echo(tmp_path, capsys):
    cfg = parse_config(f"epochs = 2\nbatch_size = 50\nout_dir = {tmp_path}\nlearning_rate = 1.0")
    rep = experiments.cmd_train(cfg, datasets=(_synthetic(500, 0), _synthetic(200, 1)))
    out = capsys.readouterr().out
    assert "accuracy=" in out and "epsilon=2.93" in out and "delta=1e-05" in out
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.split(",") == list(rep.columns)
    echo = (tmp_path / "config.resolved").read_text()
    assert "learning_rate = 1.0" in echo and "# resolved noise_multiplier" in echo
