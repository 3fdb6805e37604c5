import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowrl import diffnet, envsuite, trainer

settings.register_profile(
    "suite",
    max_examples=60,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def two_mode_1d():
    """Pretrained 1-D two-mode model shared by the sampler tests."""
    task = envsuite.mode_preference_task(
        num_modes=2, radius=1.5, mode_var=0.09, context_count=2, state_dim=1
    )
    arch = diffnet.for_task(1, 2)
    params = trainer.pretrain(arch, task, steps=4000, seed=11, batch_size=128)
    return task, arch, params


@pytest.fixture()
def small_arch():
    return diffnet.Architecture(input_dim=7, hidden_dims=(8,), output_dim=2)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
