from __future__ import annotations

import pytest

from promptevolver.backends import Backends, SimScorer, SimT2I, SimVlm, SimWorld
from promptevolver.core import TargetImage, validate_config


def sim_config(seed: int = 0, **engine):
    """Run config wired to the simulation backends."""
    raw = {"engine": {"rng_seed": seed, "guidance_scorer": "sim", **engine}, "backends": {"kind": "sim"}}
    return validate_config(raw)


def sim_setup(seed: int = 0, *, dropout: float = 0.1, n_features: int = 12):
    world = SimWorld.generate(seed, n_features, dropout)
    target = TargetImage(world.target_image(), f"world-{seed}")
    backends = Backends(SimVlm(world), SimT2I(world), SimScorer(world))
    return world, target, backends


@pytest.fixture
def world():
    return SimWorld.generate(3, 12, 0.1)


@pytest.fixture
def target(world):
    return TargetImage(world.target_image(), "world-3")


@pytest.fixture
def cfg():
    return sim_config(3)
