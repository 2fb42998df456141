from pathlib import Path

import pytest
import torch

from src.core.models import MethodConfig
from src.core.netblocks import ConvEncoderSpec
from src.sim.worlds import load_suite, load_suite_config

REPO_ROOT = Path(__file__).resolve().parent.parent
SUITE_PATH = REPO_ROOT / "config" / "suite.json"


@pytest.fixture(autouse=True)
def float64_default():
    """Oracle tests compare against finite differences, so compute in 64-bit"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def suite():
    return load_suite(SUITE_PATH)


@pytest.fixture
def suite_config():
    return load_suite_config(SUITE_PATH)


@pytest.fixture
def small_encoder():
    return ConvEncoderSpec(channels=(4, 4, 4, 4), latent_dim=8)


@pytest.fixture
def small_config():
    def make(method, **overrides):
        values = dict(method=method, latent_dim=8, hidden_dim=8, attenuator_hidden=4)
        values.update(overrides)
        return MethodConfig(**values)
    return make


class ShiftModel(torch.nn.Module):
    """x_{t+1} = x_t + a with identity encoder; the planner's hand-computable toy"""

    def __init__(self, action_dim: int = 1, goal_conditioned: bool = False):
        super().__init__()
        self.action_dim = action_dim
        self.goal_conditioned = goal_conditioned
        self.vector_goals = False
        self.gain = torch.nn.Parameter(torch.ones(1))

    def encode(self, observation):
        return observation

    def goal_latent(self, goal):
        return goal

    def step(self, x_t, x_g, action=None):
        a_hat = torch.zeros_like(x_t[..., :self.action_dim])
        return a_hat, x_t + self.gain * (a_hat if action is None else action)


@pytest.fixture
def shift_model():
    return ShiftModel()


class VectorShiftModel(ShiftModel):
    """ShiftModel whose goals are vectors in the latent space itself"""

    def __init__(self, dim: int = 3):
        super().__init__(action_dim=dim)
        self.vector_goals = True

    def project_goal(self, goal):
        return goal

    def decode_goal(self, latent):
        return latent


@pytest.fixture
def vector_shift_model():
    return VectorShiftModel()
