#!/usr/bin/env python3
"""
Tests for tier handling, the block calibration step, elastic configuration,
evaluation and ablation plumbing.
"""

from dataclasses import replace

import numpy as np
import pytest

import mb_clora as clora
import model_zoo as zoo
import recon_engine as engine
import tensor_core as tc
from config import Settings
from conftest import TINY
from errors import ArgumentError, ConfigError, DataError, UnsupportedBitError


def _one_block_setup(steps=3, **overrides):
    model = zoo.init_model(seed=1, blocks=1, dim=16, heads=2, mlp_ratio=2, tokens=4)
    calib = zoo.gen_calib(seed=1, n=12, t=4, d=16)
    config = engine.CalibConfig(
        steps=steps, batch_size=6, ranks=clora.RankPartition(2, 2, 2), progress=False, **overrides
    )
    return model, calib, engine.parse_tiers("4/5,6/7,8"), config


def _artifact_bytes(artifact, path):
    zoo.save(artifact, str(path))
    with open(path, "rb") as f:
        return f.read()


# ----------------------------------------------------------------------------
# Tiers
# ----------------------------------------------------------------------------


def test_parse_tiers():
    partition = engine.parse_tiers("4/5,6/7,8")
    assert partition.low == (4,)
    assert partition.mid == (5, 6)
    assert partition.high == (7, 8)
    assert partition.bits == (4, 5, 6, 7, 8)
    assert partition.tier_of(6) is clora.Tier.MID
    assert engine.TierPartition.from_dict(partition.to_dict()) == partition


@pytest.mark.parametrize("text", ["5/4/8", "4//8", "4/5", "4/5/9", "4/x/8", "4,5/5/8"])
def test_invalid_tiers(text):
    with pytest.raises(ArgumentError):
        engine.parse_tiers(text)


def test_default_partition_splits():
    assert engine.default_partition(range(4, 9)) == engine.parse_tiers("4/5,6/7,8")
    assert engine.default_partition(range(2, 9)).describe() == "2,3/4,5/6,7,8"
    with pytest.raises(ArgumentError):
        engine.default_partition([4, 8])


def test_parse_bits():
    assert engine.parse_bits("2-8") == (2, 3, 4, 5, 6, 7, 8)
    assert engine.parse_bits("8,4,6") == (4, 6, 8)
    for bad in ("a,b", "1-4"):
        with pytest.raises(ArgumentError):
            engine.parse_bits(bad)


def test_sample_bits_singleton_tiers_are_fixed():
    rng = np.random.default_rng(0)
    partition = engine.parse_tiers("4/6/8")
    assert {engine.sample_bits(partition, rng) for _ in range(50)} == {(4, 6, 8)}


def test_sample_bits_is_uniform_within_tiers():
    rng = np.random.default_rng(0)
    partition = engine.parse_tiers("4/5,6/7,8")
    draws = [engine.sample_bits(partition, rng) for _ in range(10_000)]
    assert all(l < m < h for l, m, h in draws)
    share_of_5 = np.mean([m == 5 for _, m, _ in draws])
    assert abs(share_of_5 - 0.5) <= 0.02


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


def test_calib_config_round_trip(quick_config):
    data = quick_config.to_dict()
    assert "progress" not in data
    assert engine.CalibConfig.from_dict(data).to_dict() == data


def test_calib_config_from_settings(monkeypatch):
    monkeypatch.setenv("ELASTIQ_STEPS", "7")
    monkeypatch.setenv("ELASTIQ_SEED", "3")
    config = engine.CalibConfig.from_settings(Settings(), batch_size=4, steps=None)
    assert config.steps == 7
    assert config.seed == 3
    assert config.batch_size == 4


def test_calib_config_validation():
    with pytest.raises(ConfigError):
        engine.CalibConfig(loss="huber")
    with pytest.raises(ConfigError):
        engine.CalibConfig(batch_size=0)


def test_slice_adam_updates_only_the_leading_slice():
    var = tc.Variable(np.ones((4, 3)))
    var.grad_array[...] = 1.0
    steps_before = engine.OPTIMIZER_STEPS
    engine.SliceAdam().step([([(var, 0, 2)], 0.1)])
    assert engine.OPTIMIZER_STEPS == steps_before + 1
    np.testing.assert_allclose(var.data[:2], 0.9, rtol=1e-5)
    np.testing.assert_array_equal(var.data[2:], 1.0)


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------


def test_passthrough_block_step_has_zero_loss():
    model, calib, partition, config = _one_block_setup(passthrough=True)
    state = engine.init_quant_state(model, calib, partition, config)
    x = calib.data[:4]
    steps_before = engine.OPTIMIZER_STEPS
    losses = engine.block_step(state, 0, x, x, (4, 5, 7), engine.SliceAdam())
    assert losses == (0.0, 0.0, 0.0)
    assert engine.OPTIMIZER_STEPS == steps_before


def test_block_step_rejects_bits_outside_the_set():
    model, calib, partition, config = _one_block_setup()
    state = engine.init_quant_state(model, calib, partition, config)
    x = calib.data[:4]
    with pytest.raises(ArgumentError):
        engine.block_step(state, 0, x, x, (3, 5, 7), engine.SliceAdam())


def test_block_step_trains_three_tiers():
    model, calib, partition, config = _one_block_setup()
    state = engine.init_quant_state(model, calib, partition, config)
    x = calib.data[:4]
    steps_before = engine.OPTIMIZER_STEPS
    losses = engine.block_step(state, 0, x, x, (4, 5, 8), engine.SliceAdam())
    assert engine.OPTIMIZER_STEPS == steps_before + 3
    assert all(v > 0 for v in losses)
    # the low-bit reconstruction is the hardest
    assert losses[0] > losses[2]


def test_empty_calibration_set_is_rejected(tiny_model, partition, quick_config):
    empty = zoo.CalibSet(data=np.zeros((0, TINY["tokens"], TINY["dim"]), dtype=np.float32), seed=0)
    with pytest.raises(ArgumentError):
        engine.calibrate_model(tiny_model, empty, partition, quick_config)


def test_calibration_history(calibrated_tiny, quick_config):
    history = calibrated_tiny.history
    assert len(history) == quick_config.steps * TINY["blocks"]
    assert set(history[0]) == {"block", "step", "b_L", "b_M", "b_H", "loss_L", "loss_M", "loss_H"}
    assert {r["block"] for r in history} == {0, 1}


def test_calibration_leaves_weights_and_act_scales_frozen(calibrated_tiny, tiny_calib, partition, quick_config):
    fresh = zoo.init_model(seed=0, **TINY)
    assert zoo.model_artifact(calibrated_tiny.model) == zoo.model_artifact(fresh)
    baseline = engine.init_quant_state(fresh, tiny_calib, partition, quick_config)
    assert calibrated_tiny.act_scales == baseline.act_scales


def test_calibration_improves_low_bit_error(calibrated_tiny, tiny_model, tiny_calib, partition, quick_config):
    baseline = engine.init_quant_state(tiny_model, tiny_calib, partition, quick_config)
    before = engine.end_to_end_mae(engine.configure(baseline, engine.uniform_config(baseline, 4)), tiny_calib.data)
    after = engine.end_to_end_mae(
        engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, 4)), tiny_calib.data
    )
    assert after < before


def test_calibration_is_deterministic(tmp_path):
    model, calib, partition, config = _one_block_setup(steps=4)
    first = engine.calibrate_model(model, calib, partition, config).to_artifact()
    second = engine.calibrate_model(model, calib, partition, config).to_artifact()
    assert _artifact_bytes(first, tmp_path / "a.qpt") == _artifact_bytes(second, tmp_path / "b.qpt")


def test_write_history(tmp_path, calibrated_tiny):
    path = engine.write_history(calibrated_tiny.history[:5], str(tmp_path / "log" / "calib_log.jsonl"))
    with open(path) as f:
        lines = f.read().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("{")


# ----------------------------------------------------------------------------
# Elastic configuration
# ----------------------------------------------------------------------------


def test_configure_takes_no_optimizer_steps_or_writes(calibrated_tiny):
    steps_before, writes_before = engine.OPTIMIZER_STEPS, tc.PARAMETER_WRITES
    for b in calibrated_tiny.bits:
        engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, b))
    assert engine.OPTIMIZER_STEPS == steps_before
    assert tc.PARAMETER_WRITES == writes_before


def test_switching_back_is_byte_identical(tmp_path, calibrated_tiny):
    blobs = []
    for i, b in enumerate((8, 4, 8)):
        deployable = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, b))
        blobs.append(_artifact_bytes(deployable.to_artifact(), tmp_path / f"d{i}.qpt"))
    assert blobs[0] == blobs[2]
    assert blobs[0] != blobs[1]


def test_configure_rejects_unsupported_bits(calibrated_tiny):
    with pytest.raises(UnsupportedBitError) as info:
        engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, 3))
    assert "block0.qkv" in str(info.value)

    with pytest.raises(ArgumentError):
        engine.configure(calibrated_tiny, engine.BitConfig.from_mapping({"block9.qkv": (4, 4)}))


def test_mixed_configuration_runs(calibrated_tiny, tiny_calib):
    mapping = {name: (4 + i % 5, 8) for i, name in enumerate(calibrated_tiny.layer_names())}
    deployable = engine.configure(calibrated_tiny, engine.BitConfig.from_mapping(mapping))
    out = deployable.run(tiny_calib.data[:4])
    assert out.shape == tiny_calib.data[:4].shape
    assert np.all(np.isfinite(out))


def test_calibrated_artifact_reload_reproduces_outputs(tmp_path, calibrated_tiny, tiny_calib):
    path = zoo.save(calibrated_tiny.to_artifact(), str(tmp_path / "calibrated.qpt"))
    reloaded = engine.CalibratedModel.from_artifact(zoo.load(path))
    assert reloaded.bits == calibrated_tiny.bits
    for b in (4, 6, 8):
        original = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, b))
        again = engine.configure(reloaded, engine.uniform_config(reloaded, b))
        np.testing.assert_array_equal(original.run(tiny_calib.data[:8]), again.run(tiny_calib.data[:8]))


def test_deployable_artifact_round_trip(tmp_path, calibrated_tiny, tiny_calib):
    deployable = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, 6))
    path = zoo.save(deployable.to_artifact(), str(tmp_path / "w6a6.qpt"))
    loaded = engine.DeployableModel.from_artifact(zoo.load(path))
    assert loaded.bit_config.as_mapping() == deployable.bit_config.as_mapping()
    np.testing.assert_array_equal(loaded.run(tiny_calib.data[:4]), deployable.run(tiny_calib.data[:4]))


def test_bit_config_file_round_trip(tmp_path, calibrated_tiny):
    cfg = engine.uniform_config(calibrated_tiny, 5)
    path = cfg.save(str(tmp_path / "cfg.json"))
    assert engine.BitConfig.load(path).as_mapping() == cfg.as_mapping()
    assert cfg.average_weight_bits() == 5.0
    with pytest.raises(ConfigError):
        engine.BitConfig.from_dict({"layers": ["block0.qkv"]})


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------


def test_full_precision_deployable_has_zero_error(calibrated_tiny, tiny_calib):
    deployable = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, None))
    report = engine.evaluate(deployable, tiny_calib.data[:8])
    assert report.mae == 0.0
    assert report.per_block_mae == [0.0, 0.0]
    assert all(s == 0.0 for _, s in report.token_ks)


def test_evaluate_rejects_mismatched_data(calibrated_tiny):
    deployable = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, 8))
    with pytest.raises(DataError):
        engine.evaluate(deployable, np.zeros((2, 4, TINY["dim"] + 1), dtype=np.float32))


def test_more_bits_give_lower_error(calibrated_tiny, tiny_calib):
    maes = engine.uniform_mae_table(calibrated_tiny, tiny_calib.data)
    assert sorted(maes) == list(calibrated_tiny.bits)
    assert maes[8] <= maes[4]


def test_eval_report_files(tmp_path, calibrated_tiny, tiny_calib):
    deployable = engine.configure(calibrated_tiny, engine.uniform_config(calibrated_tiny, 4))
    report = engine.evaluate(deployable, tiny_calib.data[:8])
    assert len(report.token_ks) == 8 * TINY["tokens"]
    paths = report.save(str(tmp_path / "eval"))
    with open(paths["summary"]) as f:
        assert f.read().startswith("End-to-end MAE vs full precision")
    frame = report.metrics_frame()
    assert set(frame["metric"]) == {"mae", "ks_mean", "ks_max"}


# ----------------------------------------------------------------------------
# Ablations
# ----------------------------------------------------------------------------


def test_ablation_arms(quick_config):
    lora = engine.ablation_arms("lora", quick_config)
    assert [name for name, _ in lora] == ["fully_shared", "independent", "cascaded"]
    assert all(c.seed == quick_config.seed for _, c in lora)

    tome_arms = engine.ablation_arms("tome", quick_config)
    assert [c.merge_policy.case.value for _, c in tome_arms] == ["random", "uniform", "selective"]

    modules = engine.ablation_arms("modules", quick_config)
    assert len(modules) == 6
    name, baseline = modules[0]
    assert name == "baseline"
    assert not baseline.learn_clips and not baseline.use_tome and baseline.loss == "mse"
    assert modules[-1][0] == "clip+clora+tome+mae"

    with pytest.raises(ArgumentError):
        engine.ablation_arms("pruning", quick_config)


def test_run_ablation_table():
    model, calib, partition, config = _one_block_setup(steps=2)
    frame = engine.run_ablation(model, calib, partition, config, "lora")
    assert list(frame["arm"]) == ["fully_shared", "independent", "cascaded"]
    assert list(frame.columns) == ["arm", "W4A4", "W5A5", "W6A6", "W7A7", "W8A8"]
    assert np.all(frame.drop(columns="arm").to_numpy() >= 0)


def test_weight_only_calibration_keeps_activations_full_precision():
    model, calib, _, config = _one_block_setup(steps=2)
    config = replace(config, weight_only=True)
    calibrated = engine.calibrate_model(model, calib, engine.default_partition(range(2, 9)), config)
    assert calibrated.act_scales == {}
    cfg = engine.uniform_config(calibrated, 2)
    assert all(a is None for _, _, a in cfg.layers)
    out = engine.configure(calibrated, cfg).run(calib.data)
    assert np.all(np.isfinite(out))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
