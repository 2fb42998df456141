"""Full-size training runs; deselected by default, run with `pytest -m slow`"""
import pytest
import torch

from config import settings
from src.core.imitation import TrainConfig, Trainer
from src.core.models import Method, MethodConfig
from src.core.netblocks import ConvEncoderSpec
from src.harness.evaluation import EvalConfig, evaluate
from src.harness.extrapolation import extrapolation_study, parse_grid
from src.sim.worlds import generate_demos


@pytest.fixture
def float32_training():
    torch.set_default_dtype(torch.float32)


@pytest.mark.slow
class TestAcceptance:
    def test_bc_solves_reach(self, suite, float32_training):
        task = suite["reach"]
        demos = generate_demos(task, settings.DEMOS_PER_TASK, seed=0)
        trainer = Trainer(MethodConfig.from_settings(Method.BC, settings), TrainConfig.from_settings(settings),
                          encoder_spec=ConvEncoderSpec.from_settings(settings))
        trainer.fit(demos)
        cell = evaluate(trainer.model, Method.BC, task, EvalConfig.from_settings(settings))
        assert cell.trials == settings.TRIALS
        assert cell.rate >= 0.9

    def test_extrapolation_halves_offset_deviation(self, suite, float32_training):
        task = suite["reach3d"]
        demos = generate_demos(task, settings.get('extrapolation.trajectories', 21), seed=0)
        method_config = MethodConfig.from_settings(Method.CPN, settings, goal_mode="vector")
        report = extrapolation_study(demos, task, parse_grid(settings.get('extrapolation.grid')),
                                     TrainConfig.from_settings(settings), method_config,
                                     ConvEncoderSpec.from_settings(settings),
                                     z_offsets=settings.get('extrapolation.z_offsets'),
                                     test_goals=settings.get('extrapolation.test_goals'))
        assert report.reduction >= 0.5
