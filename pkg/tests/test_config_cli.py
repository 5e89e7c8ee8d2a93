import json

import pytest
import yaml

from routed_steering import autodiff as ad
from routed_steering import cli
from routed_steering.config import ConfigError, RunConfig, build, dump_config, load_config, parse_override
from routed_steering.pipeline import Pipeline


def test_defaults_roundtrip_through_yaml(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p).hash() == cfg.hash()


def test_unknown_keys_are_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"rl": {"grpo": {"learning_rate": 0.1}}}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(p)


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="rl.grpo.group_size"):
        build(RunConfig, {"rl": {"grpo": {"group_size": "eight"}}})
    with pytest.raises(ConfigError, match="router"):
        build(RunConfig, {"router": {"tau": 3.0}})


def test_override_parsing():
    assert parse_override("rl.grpo.kl_coef=0.01") == ("rl.grpo.kl_coef", 0.01)
    assert parse_override("eval.seeds=[0, 4]") == ("eval.seeds", [0, 4])
    cfg = load_config(overrides={"eval.seeds": [0, 4], "router.tau": 0.6})
    assert cfg.eval.seeds == (0, 4) and cfg.router.tau == 0.6
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_overlapping_seed_ranges_rejected(tmp_path):
    cfg = load_config(overrides={"tasks.eval_range": [6550, 6650]})
    with pytest.raises(ValueError, match="overlap"):
        Pipeline(cfg, tmp_path)


def test_rl_flags_land_verbatim(tmp_path):
    args = cli.make_parser().parse_args(
        ["train-rl", "--group-size", "8", "--kl-coef", "0.001", "--rollout-temp", "1.5", "--out", str(tmp_path)])
    g = cli.resolve_config(args, tmp_path).rl.grpo
    assert (g.group_size, g.kl_coef, g.rollout_temperature) == (8, 0.001, 1.5)


def test_flags_beat_set_beat_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"rl": {"grpo": {"kl_coef": 0.5, "lr": 0.2}}}))
    args = cli.make_parser().parse_args(
        ["train-rl", "--config", str(p), "--set", "rl.grpo.kl_coef=0.25", "--kl-coef", "0.125"])
    g = cli.resolve_config(args, tmp_path).rl.grpo
    assert g.kl_coef == 0.125 and g.lr == 0.2


def test_show_config(capsys, tmp_path):
    assert cli.main(["show-config", "--out", str(tmp_path), "--set", "seed=7"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["seed"] == 7
    assert not (tmp_path / "config.yaml").exists()


def test_usage_errors_exit_1(capsys, tmp_path):
    assert cli.main(["show-config", "--out", str(tmp_path), "--set", "model.width=3"]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train-rl", "--group-size", "many"])
    assert exc.value.code == 1


def test_evaluate_before_pretrain_names_pretrain(capsys, tmp_path):
    assert cli.main(["evaluate", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "run `pretrain` first" in err


def test_environment_variables(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "envout"))
    assert cli.main(["elicit"]) == 2
    assert (tmp_path / "envout" / "config.yaml").exists()
    monkeypatch.setenv(cli.ENV_THREADS, "lots")
    assert cli.main(["show-config"]) == 1


def test_saved_config_is_reused(tmp_path):
    assert cli.main(["elicit", "--out", str(tmp_path), "--set", "seed=11"]) == 2
    args = cli.make_parser().parse_args(["evaluate", "--out", str(tmp_path)])
    assert cli.resolve_config(args, tmp_path).seed == 11


def test_numerical_failure_exits_3(monkeypatch, tmp_path):
    def boom(self, force=False):
        raise ad.NumericalError("loss became nan")
    monkeypatch.setattr(Pipeline, "run_pretrain", boom)
    assert cli.main(["pretrain", "--out", str(tmp_path)]) == 3
