import os

import pytest

from conftest import config_text
from hdff.cli import dispatch
from hdff.config import RUN_DIR_ENV, parse_config, resolved_dict, write_resolved_config
from hdff.errors import ConfigError
from hdff.schedules import CosineSchedule, StepSchedule
from hdff.training import StageId


@pytest.fixture()
def valid_config(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    path = tmp_path / "run.toml"
    path.write_text(config_text(manifest, tmp_path / "run"))
    return path


def test_minimal_config_fills_defaults(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    path = tmp_path / "min.toml"
    path.write_text(
        f"""
[registry]
backbones = ["mock_tiny"]

[data]
manifest = "{manifest}"
input_size = 48
"""
    )
    cfg = parse_config(path)
    assert cfg.registry.weights == {"mock_tiny": "random"}
    assert cfg.registry.param_limit == 200_000_000
    assert cfg.stages["selective"].epochs == 2
    sc = cfg.stage_config("selective")
    assert sc.stage is StageId.SELECTIVE_FT
    assert isinstance(sc.scheduler, CosineSchedule)
    assert sc.optimizer.base_lr == pytest.approx(1e-3)  # stage default


def test_stage_freeze_binding_rejected(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    path = tmp_path / "bad.toml"
    path.write_text(
        config_text(manifest, tmp_path / "run")
        + '\n[stage.fusion.unused]\n'
    )
    # rewrite with an explicit violating freeze key instead
    path.write_text(
        config_text(manifest, tmp_path / "run").replace(
            "[stage.fusion]", '[stage.fusion]\nfreeze = "full"'
        )
    )
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert any("bound to" in p for p in err.value.problems)


def test_all_errors_aggregated(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text(
        """
[registry]
backbones = ["nonesuch", "mock_tiny", "mock_tiny"]

[data]
manifest = "/does/not/exist.csv"
input_size = 16

[stage.selective]
epochs = -1
scheduler = "linear"

[pipeline]
order = ["fusion", "selective", "full"]
"""
    )
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    text = "\n".join(err.value.problems)
    assert "unknown backbone 'nonesuch'" in text
    assert "duplicate backbone" in text
    assert "manifest" in text
    assert "input_size" in text
    assert "epochs" in text
    assert "scheduler" in text
    assert "order" in text
    assert len(err.value.problems) >= 7


def test_syntax_error_reports_location(tmp_path):
    path = tmp_path / "syntax.toml"
    path.write_text("[registry\nbackbones = [")
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert "syntax" in str(err.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "ghost.toml")


def test_step_scheduler_selected(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    path = tmp_path / "step.toml"
    path.write_text(
        config_text(manifest, tmp_path / "run").replace(
            "[stage.full]", '[stage.full]\nscheduler = "step"\ngamma = 0.5\nstep_size = 2'
        )
    )
    cfg = parse_config(path)
    sched = cfg.stage_config("full").scheduler
    assert isinstance(sched, StepSchedule)
    assert sched.gamma == 0.5 and sched.step_size == 2


def test_resolved_copy_is_fixed_point(tmp_path, valid_config):
    cfg = parse_config(valid_config)
    copy_path = tmp_path / "resolved.toml"
    write_resolved_config(cfg, copy_path)
    reparsed = parse_config(copy_path)
    assert resolved_dict(reparsed) == resolved_dict(cfg)
    copy2 = tmp_path / "resolved2.toml"
    write_resolved_config(reparsed, copy2)
    assert copy2.read_text() == copy_path.read_text()


def test_run_dir_env_override(valid_config, tmp_path, monkeypatch):
    cfg = parse_config(valid_config)
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "elsewhere"))
    assert cfg.run_dir() == tmp_path / "elsewhere"
    monkeypatch.delenv(RUN_DIR_ENV)
    assert cfg.run_dir().name == "run"


def test_unknown_subcommand_usage_exit():
    assert dispatch(["frobnicate"]) == 2


def test_missing_required_args_usage_exit():
    assert dispatch(["budget"]) == 2


def test_train_missing_config_exit(tmp_path, capsys):
    code = dispatch(["train", "--config", str(tmp_path / "missing.toml")])
    captured = capsys.readouterr()
    assert code == 2
    assert "missing.toml" in captured.err


def test_budget_command_pass(valid_config, capsys):
    assert dispatch(["budget", "--config", str(valid_config)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "TOTAL" in out


def test_budget_command_fail_exit_one(tmp_path, forgery_dataset, capsys):
    manifest, _ = forgery_dataset
    path = tmp_path / "tight.toml"
    path.write_text(config_text(manifest, tmp_path / "run", param_limit=100))
    assert dispatch(["budget", "--config", str(path)]) == 1
    assert "FAIL" in capsys.readouterr().out
