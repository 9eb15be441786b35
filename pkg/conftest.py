"""Shared fixtures: tiny seeded models and calibration sets that keep tests fast."""

import os

import numpy as np
import pytest

import model_zoo as zoo
import recon_engine as engine

RUN_SLOW = os.getenv("ELASTIQ_RUN_SLOW") == "1"

slow = pytest.mark.skipif(not RUN_SLOW, reason="set ELASTIQ_RUN_SLOW=1 to run desk-scale acceptance checks")

TINY = dict(blocks=2, dim=16, heads=2, mlp_ratio=2, tokens=8)


@pytest.fixture(scope="session")
def tiny_model():
    return zoo.init_model(seed=0, **TINY)


@pytest.fixture(scope="session")
def tiny_calib():
    return zoo.gen_calib(seed=0, n=48, t=TINY["tokens"], d=TINY["dim"])


@pytest.fixture(scope="session")
def partition():
    return engine.parse_tiers("4/5,6/7,8")


@pytest.fixture(scope="session")
def quick_config():
    return engine.CalibConfig(
        steps=40,
        batch_size=16,
        lr_adapter=5e-3,
        lr_clip=1e-3,
        ranks=engine.clora.RankPartition(2, 2, 2),
        progress=False,
    )


@pytest.fixture(scope="session")
def calibrated_tiny(tiny_model, tiny_calib, partition, quick_config):
    """Calibrated once per session; tests must treat it as read-only."""
    return engine.calibrate_model(tiny_model, tiny_calib, partition, quick_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
