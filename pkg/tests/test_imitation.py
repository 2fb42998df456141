import numpy as np
import pytest
import torch

from src.core.diffcore import backward, finite_difference_grad, max_relative_error
from src.core.errors import ContractViolation
from src.core.events import EventType, TrainingEvents
from src.core.imitation import (DemoSteps, DemoWindows, TrainConfig, Trainer, load_checkpoint, outer_loss_planning,
                                outer_loss_reactive, save_checkpoint, sidecar_path, train)
from src.core.models import Method, build_model
from src.core.netblocks import bundle_checksum, parameter_bundle
from src.core.planner import PlannerConfig
from src.data.datastore import Trajectory

ORIGIN = torch.tensor([0.0])
GOAL = torch.tensor([1.0])


def make_trajectory(steps=4, seed=0, task_id="reach"):
    rng = np.random.default_rng(seed)
    images = rng.random((steps, 84, 84, 3)).astype(np.float32)
    actions = rng.uniform(-1.0, 1.0, (steps, 4)).astype(np.float32)
    actions[-1] = 0.0
    return Trajectory(task_id=task_id, seed=seed, images=images, actions=actions)


class TestOuterLoss:
    def test_zero_when_demo_matches_plan(self, shift_model):
        batch = (ORIGIN, GOAL, torch.tensor([[0.1], [0.1]]))
        loss, plan = outer_loss_planning(shift_model, batch, PlannerConfig(horizon=2))
        assert loss.item() < 1e-12
        assert plan.loss_trace == pytest.approx([0.5, 0.32])

    def test_second_order_gradient_matches_finite_differences(self, shift_model):
        cfg = PlannerConfig(horizon=2, inner_updates=2, step_size=0.1)
        batch = (ORIGIN, GOAL, torch.tensor([[0.3], [0.0]]))
        loss, _ = outer_loss_planning(shift_model, batch, cfg, second_order=True)
        analytic = backward(loss, [shift_model.gain])[shift_model.gain]

        def loss_at(gain):
            original = shift_model.gain.detach().clone()
            with torch.no_grad():
                shift_model.gain.copy_(gain)
            try:
                return outer_loss_planning(shift_model, batch, cfg)[0]
            finally:
                with torch.no_grad():
                    shift_model.gain.copy_(original)

        numeric = finite_difference_grad(loss_at, shift_model.gain)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_first_order_with_zero_init_gives_no_parameter_gradient(self, shift_model):
        batch = (ORIGIN, GOAL, torch.tensor([[0.3], [0.0]]))
        loss, _ = outer_loss_planning(shift_model, batch, PlannerConfig(horizon=2), second_order=False)
        assert shift_model.gain not in backward(loss, [shift_model.gain])

    def test_orders_agree_without_inner_updates(self, small_config, small_encoder):
        model = build_model(small_config(Method.CPN), small_encoder)
        cfg = PlannerConfig(horizon=2, inner_updates=0, init="policy")
        generator = torch.Generator().manual_seed(4)
        batch = (torch.rand(2, 84, 84, 3, generator=generator), torch.rand(2, 84, 84, 3, generator=generator),
                 torch.rand(2, 2, 4, generator=generator))
        params = list(model.parameters())
        first = backward(outer_loss_planning(model, batch, cfg, second_order=False)[0], params)
        second = backward(outer_loss_planning(model, batch, cfg, second_order=True)[0], params)
        for param in params:
            assert torch.allclose(first.get(param), second.get(param))

    def test_window_must_match_horizon(self, shift_model):
        with pytest.raises(ContractViolation):
            outer_loss_planning(shift_model, (ORIGIN, GOAL, torch.zeros(3, 1)), PlannerConfig(horizon=2))

    def test_reactive_zero_policy_against_unit_actions(self, small_config, small_encoder):
        policy = build_model(small_config(Method.BC), small_encoder)
        with torch.no_grad():
            for param in policy.parameters():
                param.zero_()
        batch = (torch.rand(3, 84, 84, 3), torch.rand(3, 84, 84, 3), torch.ones(3, 4))
        assert outer_loss_reactive(policy, batch).item() == pytest.approx(1.0)


class TestDatasets:
    def test_windows_cover_every_full_start(self):
        windows = DemoWindows([make_trajectory(steps=6)], horizon=3)
        assert len(windows) == 4
        image, goal, actions = windows[3]
        assert actions.shape == (3, 4)
        assert np.array_equal(goal, windows.trajectories[0].images[-1])

    def test_short_trajectory_gives_one_padded_window(self):
        traj = make_trajectory(steps=2)
        windows = DemoWindows([traj], horizon=5)
        assert len(windows) == 1
        _, _, actions = windows[0]
        assert np.array_equal(actions[:2], traj.actions)
        assert not actions[2:].any()

    def test_steps_yield_one_sample_per_action(self):
        steps = DemoSteps([make_trajectory(steps=3), make_trajectory(steps=5, seed=1)])
        assert len(steps) == 8
        assert steps[0][2].shape == (4,)


class TestTrainer:
    def fit(self, method, small_config, small_encoder, seed=0, epochs=2):
        config = small_config(method, horizon=2) if method.planning else small_config(method)
        trainer = Trainer(config, TrainConfig(epochs=epochs, batch_size=4, seed=seed), encoder_spec=small_encoder)
        record = trainer.fit([make_trajectory(steps=4, seed=i) for i in range(2)])
        return trainer, record

    def test_same_seed_same_result(self, small_config, small_encoder):
        _, first = self.fit(Method.CPN, small_config, small_encoder)
        _, second = self.fit(Method.CPN, small_config, small_encoder)
        assert first.checksum == second.checksum
        assert first.epoch_losses == second.epoch_losses

    def test_different_seed_different_result(self, small_config, small_encoder):
        _, first = self.fit(Method.BC, small_config, small_encoder, seed=0)
        _, second = self.fit(Method.BC, small_config, small_encoder, seed=1)
        assert first.checksum != second.checksum

    def test_record_has_one_entry_per_epoch(self, small_config, small_encoder):
        _, record = self.fit(Method.UPN, small_config, small_encoder, epochs=3)
        assert [entry["epoch"] for entry in record.epochs] == [1, 2, 3]
        assert all("inner_loss_first" in entry for entry in record.epochs)
        assert record.wall_time > 0

    def test_training_changes_parameters(self, small_config, small_encoder):
        trainer, record = self.fit(Method.TEBC, small_config, small_encoder)
        fresh = build_model(trainer.method_config, small_encoder, torch.Generator().manual_seed(0))
        assert bundle_checksum(parameter_bundle(fresh)) != record.checksum

    def test_first_order_training_starts_plans_from_policy(self, small_config, small_encoder):
        config = small_config(Method.UPN, horizon=2)
        trainer = Trainer(config, TrainConfig(epochs=3, batch_size=4, second_order=False),
                          encoder_spec=small_encoder)
        assert trainer.planner_config.init == "policy"
        before = bundle_checksum(parameter_bundle(trainer.model))
        record = trainer.fit([make_trajectory(steps=4)])
        assert record.checksum != before
        assert len(set(record.epoch_losses)) > 1

    def test_second_order_keeps_zero_plan_init(self, small_config, small_encoder):
        trainer = Trainer(small_config(Method.CPN, horizon=2), TrainConfig(epochs=1), encoder_spec=small_encoder)
        assert trainer.planner_config.init == "zeros"

    def test_parameter_free_loss_skips_update(self, small_config, small_encoder):
        config = small_config(Method.UPN, horizon=2, inner_updates=0)
        trainer = Trainer(config, TrainConfig(epochs=1, batch_size=4), encoder_spec=small_encoder)
        before = bundle_checksum(parameter_bundle(trainer.model))
        record = trainer.fit([make_trajectory(steps=4)])
        assert record.checksum == before

    def test_outer_loss_halves_on_five_demo_toy(self, small_config, small_encoder):
        demos = [make_trajectory(steps=6, seed=i) for i in range(5)]
        for demo in demos:
            demo.actions[:] = [0.5, -0.5, 0.25, 0.0]
        trainer = Trainer(small_config(Method.BC), TrainConfig(epochs=50, batch_size=8, learning_rate=1e-2),
                          encoder_spec=small_encoder)
        record = trainer.fit(demos)
        assert record.epoch_losses[-1] <= 0.5 * record.epoch_losses[0]

    def test_epoch_events(self, small_config, small_encoder):
        events = TrainingEvents()
        seen = []
        events.subscribe(EventType.EPOCH_COMPLETED, lambda **entry: seen.append(entry["epoch"]))
        config = small_config(Method.BC)
        trainer = Trainer(config, TrainConfig(epochs=2, batch_size=4), encoder_spec=small_encoder, events=events)
        trainer.fit([make_trajectory(steps=3)])
        assert seen == [1, 2]

    def test_empty_split_rejected(self, small_config, small_encoder):
        trainer = Trainer(small_config(Method.BC), TrainConfig(epochs=1), encoder_spec=small_encoder)
        with pytest.raises(ContractViolation):
            trainer.fit([])

    def test_train_accepts_trajectory_list(self, small_config, small_encoder):
        bundle, record = train(small_config(Method.BC), [make_trajectory(steps=3)],
                               TrainConfig(epochs=1, batch_size=2), encoder_spec=small_encoder)
        assert bundle_checksum(bundle) == record.checksum


class TestCheckpoint:
    def test_round_trip_restores_parameters(self, small_config, small_encoder, tmp_path):
        config = small_config(Method.CPN, horizon=2)
        train_config = TrainConfig(epochs=1)
        model = build_model(config, small_encoder, torch.Generator().manual_seed(3))
        path = save_checkpoint(tmp_path / "cpn.cpnp", model, config, train_config, PlannerConfig(horizon=2),
                               small_encoder, holdout="push")
        assert sidecar_path(path).is_file()

        checkpoint = load_checkpoint(path)
        assert checkpoint.method_config == config
        assert checkpoint.planner_config.horizon == 2
        assert checkpoint.meta["holdout"] == "push"
        assert bundle_checksum(parameter_bundle(checkpoint.model)) == bundle_checksum(parameter_bundle(model))

    def test_tampered_parameters_detected(self, small_config, small_encoder, tmp_path):
        from src.core.errors import DatasetIOError
        from src.core.netblocks import save_parameters
        config = small_config(Method.BC)
        model = build_model(config, small_encoder)
        path = save_checkpoint(tmp_path / "bc.cpnp", model, config, TrainConfig(epochs=1))
        bundle = parameter_bundle(model)
        bundle = {name: tensor + 1.0 for name, tensor in bundle.items()}
        save_parameters(bundle, path)
        with pytest.raises(DatasetIOError):
            load_checkpoint(path)
