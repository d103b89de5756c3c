import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calsheq.cli import main
from calsheq.calibrator import TimescaleSchedule
from calsheq.core import ConfigurationError
from calsheq.experiment import (ExperimentConfig, metrics_header, preset, read_metrics, report, run,
                                target_labels)
from calsheq.plots import write_plots


def tiny(mode="calibrate", iterations=4, **kw):
    cfg = preset("desk-exp5", mode)
    cfg.episodes = 2
    cfg.budget = iterations * cfg.steps_per_iteration
    cfg.checkpoint_every = 2
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.mark.parametrize("name", ["exp1", "exp2", "exp3", "exp4", "exp5", "desk-exp2", "desk-exp5"])
def test_presets_validate_and_roundtrip(name, tmp_path):
    cfg = preset(name)
    cfg.validate()
    again = ExperimentConfig.load(cfg.save(tmp_path / "c.yaml"))
    assert again == cfg


def test_exp5_preset_targets():
    cfg = preset("desk-exp5")
    assert target_labels(cfg.targets) == ["share_s1", "total_share"]
    assert [t.target for c in cfg.targets.components for t in c.targets] == [0.4, 0.8]
    assert cfg.market.n_merchants == 3 and len(cfg.supertypes) == 2
    assert len(target_labels(preset("exp2").targets)) == 20


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 64), st.floats(1e-6, 1e-2), st.sampled_from(["train", "calibrate"]))
def test_config_roundtrip_property(seed, episodes, lr, mode):
    cfg = preset("desk-exp5", mode)
    cfg.seed, cfg.episodes = seed, episodes
    cfg.ppo.lr = lr
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg


def test_validation_lists_every_problem():
    cfg = preset("desk-exp5")
    cfg.assignment = [0, 1]
    cfg.episodes = 0
    cfg.mode = "fly"
    with pytest.raises(ConfigurationError) as err:
        cfg.validate()
    msg = str(err.value)
    assert "mode must be" in msg and "assignment lists 2" in msg and "episodes" in msg


def test_constant_schedule_needs_opt_in():
    cfg = preset("desk-exp5")
    cfg.schedule = TimescaleSchedule(kind="constant", shared_scale=3e-4, ratio=0.1)
    with pytest.raises(ConfigurationError, match="two-timescale"):
        cfg.validate()
    cfg.allow_constant_schedule = True
    cfg.validate()


def test_desk_budget_fits_two_million_steps():
    cfg = preset("desk-exp5")
    assert cfg.budget <= 2_000_000 and cfg.iterations * cfg.steps_per_iteration == cfg.budget


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="unknown"):
        ExperimentConfig.from_dict({"nme": "typo"})


def test_run_is_seed_deterministic(tmp_path):
    a = run(tiny(), tmp_path / "a", make_plots=False)
    b = run(tiny(), tmp_path / "b", make_plots=False)
    assert (a / "metrics.csv").read_text() == (b / "metrics.csv").read_text()
    c = run(tiny(seed=1), tmp_path / "c", make_plots=False)
    assert (a / "metrics.csv").read_text() != (c / "metrics.csv").read_text()


@pytest.mark.parametrize("mode", ["calibrate", "train"])
def test_resume_matches_uninterrupted_run(tmp_path, mode):
    full = run(tiny(mode, iterations=5), tmp_path / "full", make_plots=False)

    def interrupt(m, total, row):
        if m == 3:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run(tiny(mode, iterations=5), tmp_path / "cut", make_plots=False, progress=interrupt)
    resumed = run(tiny(mode, iterations=5), tmp_path / "cut", make_plots=False)
    assert (full / "metrics.csv").read_text() == (resumed / "metrics.csv").read_text()


def test_checkpoint_from_another_config_is_refused(tmp_path):
    run(tiny(), tmp_path / "r", make_plots=False)
    with pytest.raises(ValueError):
        run(tiny(seed=9), tmp_path / "r", make_plots=False)


def test_metrics_schema_and_report(tmp_path):
    cfg = tiny()
    out = run(cfg, tmp_path / "r")
    M = read_metrics(out / "metrics.csv")
    assert list(M) == metrics_header(cfg)
    assert np.all(M["schema"] == 1) and list(M["iteration"]) == [1, 2, 3, 4]
    s = report(out)
    assert s.iterations == 4 and s.params_within_bounds and 0 < s.rcal <= 1
    assert set(s.fits) == {"share_s1", "total_share"}
    assert "calibrator reward" in s.to_text()
    assert {p.name for p in out.glob("*.svg")} == {"calibrator_reward.svg", "supertype_rewards.svg",
                                                   "target_fits.svg", "parameters.svg"}


def test_report_flags_negative_reward(tmp_path):
    out = run(tiny("train"), tmp_path / "r", make_plots=False)
    path = out / "metrics.csv"
    with path.open() as fh:
        rows = list(csv.reader(fh))
    col = rows[0].index("reward_s1")
    for r in rows[1:]:
        r[col] = "-5.0"
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    assert any("supertype 1" in a for a in report(out).anomalies)
    assert write_plots(out)


def test_report_without_metrics(tmp_path):
    tiny().save(tmp_path / "config.yaml")
    with pytest.raises(FileNotFoundError):
        report(tmp_path)


def test_bo_mode_writes_history(tmp_path):
    cfg = tiny("baseline-bo", iterations=5)
    cfg.acquisition.period = 2
    out = run(cfg, tmp_path / "bo", make_plots=False)
    with (out / "bo_history.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) >= 2
    assert report(out).max_jump is not None


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tiny()
    cfg.save(tmp_path / "c.yaml")
    assert main(["calibrate", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "r"),
                 "--no-plots", "--progress", "0"]) == 0
    assert "calibrator reward" in capsys.readouterr().out
    assert main(["report", "--out", str(tmp_path / "r")]) == 0
    assert main(["report", "--out", str(tmp_path / "missing")]) == 2
    assert main(["train", "--preset", "nope"]) == 2
    bad = cfg.to_dict()
    bad["episodes"] = 0
    ExperimentConfig.from_dict(bad).save(tmp_path / "bad.yaml")
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "x")]) == 2
    assert "episodes" in capsys.readouterr().err
