from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from cadnet import harness
from cadnet.errors import ConfigurationError, UsageError
from cadnet.harness import (
    SUITE_ROWS,
    SuiteConfig,
    TrainConfig,
    build_suite_data,
    ordering_criteria,
    run_experiment_suite,
    timing_probe,
    train,
)
from cadnet.model import CADNet, ModelConfig, load_checkpoint
from cadnet.scoring import EvalRow, EvalSummary
from cadnet.world import load_rulebook, load_scenario

SMALL = ModelConfig(S=13, C=8, F=256, conv_channels=(4, 4), encoder_fc=16, context_time=8, context_gps=8,
                    context_frame=8, frame_hidden=8, latent=4)


@pytest.fixture(scope="module")
def world():
    return load_scenario(), load_rulebook()


@pytest.fixture(scope="module")
def data(world):
    spec, rb = world
    return build_suite_data(spec, rb, SuiteConfig(n_normal=200, n_point=10, n_contextual=10))


def small_model(spec, seed=0) -> CADNet:
    return CADNet(replace(SMALL, gps_bounds=spec.gps_bounds()), seed=seed)


def test_schedule_and_defaults():
    tc = TrainConfig()
    assert (tc.lr_at(4), tc.lr_at(5), tc.lr_at(18)) == pytest.approx((0.05, 0.005, 0.0005))
    assert tc.batch_size == 64
    assert harness.SUITE_TRAIN.lr_at(1) == pytest.approx(0.005)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    assert TrainConfig.from_dict(tc.to_dict()) == tc


def test_training_reduces_loss_and_writes_checkpoint(tmp_path, world, data):
    spec, _ = world
    ckpt = tmp_path / "m.ckpt"
    result = train(small_model(spec), data.train, data.val, replace(harness.SUITE_TRAIN, max_epochs=3), ckpt,
                   data.hashes())
    m = result.manifest
    assert m.status == "ok" and m.stopped_epoch == 3
    assert m.train_loss[-1] < m.train_loss[0]
    loaded, state = load_checkpoint(ckpt)
    assert state["best_epoch"] == m.best_epoch
    saved = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert saved["dataset_hashes"]["train"] == data.hashes()["train"]
    for name in loaded.params:
        np.testing.assert_array_equal(loaded.params[name], result.model.params[name])


def test_patience_one_stops_after_first_worsening_epoch(monkeypatch, world, data):
    spec, _ = world
    vals = iter([1.0, 2.0, 3.0, 4.0])
    snapshots = []
    monkeypatch.setattr(harness, "evaluate_loss", lambda model, inp, kl, batch_size=256: next(vals))
    model = small_model(spec)
    result = train(model, data.train, data.val, replace(harness.SUITE_TRAIN, max_epochs=4, patience=1),
                   on_epoch=lambda e, t, v: snapshots.append(model.params.copy()))
    assert result.manifest.stopped_epoch == 2
    assert result.manifest.best_epoch == 1
    for name in snapshots[0]:
        np.testing.assert_array_equal(result.model.params[name], snapshots[0][name])


def test_training_is_reproducible(world, data):
    spec, _ = world
    tc = replace(harness.SUITE_TRAIN, max_epochs=2, seed=5)
    a = train(small_model(spec, 5), data.train, data.val, tc)
    b = train(small_model(spec, 5), data.train, data.val, tc)
    assert a.manifest.train_loss == b.manifest.train_loss
    assert a.manifest.val_loss == b.manifest.val_loss
    for name in a.model.params:
        np.testing.assert_array_equal(a.model.params[name], b.model.params[name])


def test_divergence_is_reported_not_raised(world, data):
    spec, _ = world
    result = train(small_model(spec), data.train, data.val, TrainConfig(learning_rate=1e4, max_epochs=3))
    assert result.diverged
    assert "lr" in result.manifest.diagnostic and "seed" in result.manifest.diagnostic
    for name in result.model.params:
        assert np.isfinite(result.model.params[name]).all()


def test_training_needs_data(world, data):
    spec, _ = world
    with pytest.raises(UsageError):
        train(small_model(spec), [], data.val, TrainConfig())


def test_manifest_detects_changed_data(data):
    m = harness.RunManifest({}, {}, 0, data.hashes())
    m.verify({"train": data.train})
    with pytest.raises(UsageError):
        m.verify({"train": data.train[1:]})


def test_suite_rows_and_failure_isolation(monkeypatch, tmp_path, world, data):
    spec, rb = world
    real_train = harness.train

    def flaky(model, *args, **kwargs):
        if not model.config.ablation.skip_main:
            raise RuntimeError("boom")
        return real_train(model, *args, **kwargs)

    monkeypatch.setattr(harness, "train", flaky)
    cfg = SuiteConfig(n_normal=200, n_point=10, n_contextual=10, seeds=(0,), rows=("full", "wo-skip"),
                      train=replace(harness.SUITE_TRAIN, max_epochs=1))
    summary = run_experiment_suite(spec, rb, cfg, tmp_path, data=data)
    assert [r.name for r in summary.rows] == ["full", "wo-skip"]
    assert not summary.row("full").failed
    assert "boom" in summary.row("wo-skip").failure
    assert (tmp_path / "summary.json").exists() and "FAILED" in (tmp_path / "table.txt").read_text()
    assert (tmp_path / "full-seed0.ckpt").exists()


def test_suite_config_validation():
    assert len(SUITE_ROWS) == 9
    with pytest.raises(ConfigurationError):
        SuiteConfig(rows=("full", "bogus"))
    with pytest.raises(ConfigurationError):
        SuiteConfig(seeds=())


def _row(name, rec, pt, ctx, fpr=0.0):
    return EvalRow(name, rec, pt, ctx, fpr, fpr)


def test_ordering_criteria_on_a_hand_built_table():
    good = EvalSummary([
        _row("full", 0.01, 91, 87), _row("autoencoder", 0.01, 90, 21), _row("wo-gps-time", 0.01, 90, 37),
        _row("wo-time", 0.01, 90, 54), _row("wo-gps", 0.01, 90, 64), _row("wo-frame", 0.01, 90, 79),
        _row("wo-skip", 0.17, 38, 30), _row("wo-skip-m", 0.1, 60, 50), _row("wo-skip-c", 0.01, 88, 77),
    ])
    crit = ordering_criteria(good)
    assert len(crit) == 12 and all(c.passed for c in crit), [c for c in crit if not c.passed]
    bad = EvalSummary([_row("full", 0.01, 91, 87), _row("wo-frame", 0.01, 90, 88),
                       _row("wo-time", 0.01, 90, 54), _row("wo-gps", 0.01, 90, 64)])
    placement = [c for c in ordering_criteria(bad) if c.name == "wo-frame placement"]
    assert placement and not placement[0].passed
    # rows that were not run produce no verdicts
    assert [c.name for c in ordering_criteria(EvalSummary([_row("wo-time", 0, 0, 0)]))] == []


def test_timing_probe():
    model = CADNet(SMALL)
    t = timing_probe(model, n_runs=5)
    assert t.n_runs == 5 and t.mean_ms >= t.min_ms > 0
    with pytest.raises(UsageError):
        timing_probe(model, n_runs=0)
