from __future__ import annotations

import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from promptfuse.scenes import SceneSpec, generate_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def spec() -> SceneSpec:
    return SceneSpec()


@pytest.fixture(scope="session")
def tiny_train(spec):
    return generate_dataset(spec, 8, "train")


@pytest.fixture(scope="session")
def tiny_val(spec):
    return generate_dataset(spec, 6, "val")
