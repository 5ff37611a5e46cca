import json

import pytest

from f2dc import cli, runner
from f2dc.config import ExperimentConfig, dump_config, load_config, parse_config
from f2dc.errors import ConfigError, InvariantViolation

TINY = """
[experiment]
rounds = 2
local_epochs = 1
dtype = float64
[federation]
clients = 4
[data]
domains = 2
classes = 3
train_size = 12
test_size = 12
image_size = 8
[optimizer]
batch_size = 8
[model]
channels = 4, 8, 8
"""


def test_defaults_are_the_published_recipe():
    cfg = ExperimentConfig()
    assert (cfg.rounds, cfg.local_epochs, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size) == \
        (100, 10, 0.01, 0.9, 1e-5, 64)
    assert (cfg.sigma, cfg.tau, cfg.lambda1, cfg.lambda2, cfg.alpha, cfg.beta) == (0.1, 0.06, 0.8, 1.0, 1.0, 0.4)
    assert cfg.validate() is cfg


def test_parse_and_dump_round_trip():
    cfg = parse_config(TINY)
    assert cfg.num_clients == 4 and cfg.channels == (4, 8, 8) and cfg.dtype == "float64"
    assert parse_config(dump_config(cfg)) == cfg


def test_desk_config_file():
    cfg = load_config("configs/desk.ini").validate()
    assert (cfg.rounds, cfg.local_epochs, cfg.num_clients, cfg.num_domains, cfg.num_classes) == (30, 2, 8, 4, 4)


@pytest.mark.parametrize("text,field", [
    ("[experiment]\nmode = fedprox\n", "mode"),
    ("[optimizer]\nlr = 0\n", "lr"),
    ("[f2dc]\nsigma = -1\n", "sigma"),
    ("[f2dc]\ntau = 0\n", "tau"),
    ("[ablation]\ndfd = off\n", "dfc_on"),
    ("[federation]\nclients = 2\n", "num_clients"),
    ("[federation]\nparticipation = 0\n", "participation"),
    ("[experiment]\nprotocol = f+\nmode = fedavg\n", "protocol"),
])
def test_validation_names_the_field(text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text).validate()
    assert err.value.field == field


@pytest.mark.parametrize("text", ["[experiment]\nrounds = many\n", "[colors]\nred = 1\n", "[data]\nshape = 3\n",
                                  "not an ini file"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def write_tiny(tmp_path, extra=""):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY + extra)
    return path


def test_cli_success_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["--config", str(write_tiny(tmp_path)), "--out", str(out), "--mode", "fedavg", "--spectrum"])
    assert code == 0
    summary = json.loads((out / runner.SUMMARY_NAME).read_text())
    assert summary["config"]["mode"] == "fedavg" and "spectrum" in summary
    assert (out / runner.CSV_NAME).read_text().count("\n") == 2 * 2 + 1
    assert "AVG" in capsys.readouterr().out


def test_cli_flags_override_config(tmp_path):
    path = write_tiny(tmp_path)
    args = cli.build_parser().parse_args(["--config", str(path), "--seed", "4", "--rounds", "0", "--ablate", "daa",
                                          "--ablate", "dfc", "--protocol", "f-", "--workers", "2"])
    cfg = cli.config_from_args(args)
    assert (cfg.seed, cfg.rounds, cfg.daa_on, cfg.dfc_on, cfg.dfd_on, cfg.protocol, cfg.workers) == \
        (4, 0, False, False, True, "f-", 2)


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["--config", str(write_tiny(tmp_path, "[f2dc]\nsigma = 0\n"))]) == 2
    assert "sigma" in capsys.readouterr().err
    assert cli.main(["--config", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["--config", str(write_tiny(tmp_path)), "--ablate", "dfd"]) == 2


def test_cli_invariant_exit_code(tmp_path, monkeypatch):
    def broken(report, num_domains):
        raise InvariantViolation("forced")

    monkeypatch.setattr(runner, "check_report", broken)
    assert cli.main(["--config", str(write_tiny(tmp_path)), "--out", str(tmp_path / "x")]) == 3
