import pytest
import torch

from src.core.diffcore import backward
from src.core.errors import ContractViolation
from src.core.models import (LADDER, Method, MethodConfig, PlanningNetwork, PolicyDynamicsModel, ReactivePolicy,
                             build_model, clamp_action, count_parameters, policy_dynamics_step, reactive_action,
                             vector_goal_step, with_method)
from src.core.netblocks import NeuromodLinearLayer, model_checksum


class TestMethod:
    def test_parse_accepts_label_spellings(self):
        assert Method.parse("TE-BC") is Method.TEBC
        assert Method.parse("te_bc") is Method.TEBC
        assert Method.parse("CPN") is Method.CPN

    def test_unknown_method_rejected(self):
        with pytest.raises(ContractViolation):
            Method.parse("dagger")

    def test_ladder_order_and_flags(self):
        assert [m.label for m in LADDER] == ["BC", "TE-BC", "UPN", "CPN"]
        assert [m.planning for m in LADDER] == [False, False, True, True]
        assert [m.goal_conditioned for m in LADDER] == [False, True, False, True]
        assert [m.neuromodulated for m in LADDER] == [False, False, False, True]


class TestMethodConfig:
    def test_reactive_methods_drop_planner_fields(self):
        config = MethodConfig(method="bc")
        assert config.horizon is None and config.inner_updates is None and config.step_size is None

    def test_planning_defaults(self):
        config = MethodConfig(method="cpn")
        assert (config.horizon, config.inner_updates, config.step_size) == (5, 1, 0.1)
        assert config.hidden_dim == 32 and config.action_dim == 4

    def test_reactive_vector_goals_rejected(self):
        with pytest.raises(ContractViolation):
            MethodConfig(method="tebc", goal_mode="vector")

    def test_dict_round_trip(self):
        config = MethodConfig(method="upn", horizon=3, inner_updates=2)
        assert MethodConfig.from_dict(config.to_dict()) == config

    def test_with_method_restores_planner_fields(self):
        bc = MethodConfig(method="bc", latent_dim=8)
        upn = with_method(bc, Method.UPN)
        assert upn.horizon == 5 and upn.latent_dim == 8


class TestPolicyDynamics:
    def test_output_shapes_and_action_bounds(self):
        model = PolicyDynamicsModel(latent_dim=8, hidden_dim=8)
        a_hat, x_next = model(torch.randn(6, 8) * 50)
        assert a_hat.shape == (6, 4) and x_next.shape == (6, 8)
        assert bool((a_hat.abs() <= 1.0).all())

    def test_parameter_count_plain(self):
        assert count_parameters(PolicyDynamicsModel(latent_dim=8, hidden_dim=8)) == 356
        assert count_parameters(PolicyDynamicsModel(latent_dim=8, hidden_dim=8, goal_conditioned=True)) == 420

    def test_parameter_count_neuromodulated_layer(self):
        assert count_parameters(NeuromodLinearLayer(2, 3, attenuator_hidden=4)) == 78

    def test_neuromodulation_adds_parameters(self):
        plain = PolicyDynamicsModel(latent_dim=8, hidden_dim=8)
        modulated = PolicyDynamicsModel(latent_dim=8, hidden_dim=8, neuromodulated=True)
        assert count_parameters(modulated) > count_parameters(plain)

    def test_pinned_modulated_model_reproduces_plain_model(self):
        plain = PolicyDynamicsModel(latent_dim=4, hidden_dim=4)
        modulated = PolicyDynamicsModel(latent_dim=4, hidden_dim=4, neuromodulated=True)
        with torch.no_grad():
            for name in ("trunk", "policy_hidden", "policy_out", "dynamics_hidden", "dynamics_out"):
                getattr(modulated, name).base.weight.copy_(getattr(plain, name).weight)
                getattr(modulated, name).base.bias.copy_(getattr(plain, name).bias)
        modulated.pin_attenuators(1.0)
        x = torch.randn(3, 4)
        for expected, actual in zip(plain(x), modulated(x)):
            assert torch.allclose(expected, actual)

    def test_goal_conditioned_requires_goal(self):
        model = PolicyDynamicsModel(latent_dim=4, hidden_dim=4, goal_conditioned=True)
        with pytest.raises(ContractViolation):
            model(torch.randn(4))

    def test_plain_model_rejects_goal(self):
        model = PolicyDynamicsModel(latent_dim=4, hidden_dim=4)
        with pytest.raises(ContractViolation):
            model(torch.randn(4), torch.randn(4))

    def test_explicit_action_overrides_policy(self):
        model = PolicyDynamicsModel(latent_dim=4, hidden_dim=4)
        x = torch.randn(4)
        a_hat, with_policy = model(x)
        _, with_override = model(x, action=a_hat)
        assert torch.equal(with_policy, with_override)

    def test_clamp_gradient_is_zero_outside_bounds(self):
        a = torch.tensor([0.5, 2.0, -3.0], requires_grad=True)
        grads = backward(clamp_action(a).sum(), [a])
        assert grads[a].tolist() == [1.0, 0.0, 0.0]


class TestPlanningNetwork:
    def test_goal_swap_only_matters_when_goal_is_an_input(self, small_config, small_encoder):
        x = torch.randn(8)
        g1, g2 = torch.randn(8), torch.randn(8)
        action = torch.zeros(4)

        upn = build_model(small_config(Method.UPN), small_encoder)
        assert torch.equal(upn.step(x, g1, action)[1], upn.step(x, g2, action)[1])

        cpn = build_model(small_config(Method.CPN), small_encoder)
        assert not torch.equal(cpn.step(x, g1, action)[1], cpn.step(x, g2, action)[1])

    def test_policy_dynamics_step_enforces_goal_rule(self, small_config, small_encoder):
        upn = build_model(small_config(Method.UPN), small_encoder)
        with pytest.raises(ContractViolation):
            policy_dynamics_step(upn, torch.randn(8), torch.randn(8))
        a_hat, x_next = policy_dynamics_step(upn, torch.randn(8))
        assert a_hat.shape == (4,) and x_next.shape == (8,)

    def test_vector_goal_projection_inverts(self, small_config, small_encoder):
        model = build_model(small_config(Method.CPN, goal_mode="vector"), small_encoder)
        goal = torch.tensor([0.4, 0.6, 0.65])
        assert torch.allclose(model.decode_goal(model.project_goal(goal)), goal, atol=1e-8)

    def test_vector_goal_step_uses_projected_goal(self, small_config, small_encoder):
        model = build_model(small_config(Method.CPN, goal_mode="vector"), small_encoder)
        x_t = torch.randn(8)
        goal = torch.tensor([0.4, 0.6, 0.5])
        a_hat, x_next = vector_goal_step(model, x_t, goal)
        expected_a, expected_next = model.step(x_t, model.project_goal(goal))
        assert torch.equal(a_hat, expected_a) and torch.equal(x_next, expected_next)

    def test_image_mode_has_no_projection(self, small_config, small_encoder):
        model = build_model(small_config(Method.UPN), small_encoder)
        with pytest.raises(ContractViolation):
            model.project_goal(torch.zeros(3))

    def test_reactive_model_rejected_as_planner(self, small_config, small_encoder):
        with pytest.raises(ContractViolation):
            PlanningNetwork(small_config(Method.BC), None)


class TestReactivePolicy:
    def test_tebc_requires_goal_image(self, small_config, small_encoder):
        policy = build_model(small_config(Method.TEBC), small_encoder)
        assert isinstance(policy, ReactivePolicy)
        with pytest.raises(ContractViolation):
            policy(torch.rand(84, 84, 3))
        assert policy(torch.rand(84, 84, 3), torch.rand(84, 84, 3)).shape == (4,)

    def test_reactive_action_accepts_arrays(self, small_config, small_encoder):
        policy = build_model(small_config(Method.TEBC), small_encoder)
        image, goal = torch.rand(84, 84, 3), torch.rand(84, 84, 3)
        action = reactive_action(policy, image.numpy(), goal.numpy())
        assert torch.allclose(action, policy(image, goal))
        assert bool((action.abs() <= 1.0).all())

    def test_bc_ignores_goal(self, small_config, small_encoder):
        policy = build_model(small_config(Method.BC), small_encoder)
        image = torch.rand(2, 84, 84, 3)
        assert torch.equal(policy(image), policy(image, torch.rand(2, 84, 84, 3)))


class TestBuildModel:
    def test_same_generator_seed_same_parameters(self, small_config, small_encoder):
        config = small_config(Method.CPN)
        first = build_model(config, small_encoder, torch.Generator().manual_seed(11))
        second = build_model(config, small_encoder, torch.Generator().manual_seed(11))
        third = build_model(config, small_encoder, torch.Generator().manual_seed(12))
        assert model_checksum(first) == model_checksum(second)
        assert model_checksum(first) != model_checksum(third)

    def test_encoder_width_must_match(self, small_config, small_encoder):
        with pytest.raises(ContractViolation):
            build_model(small_config(Method.BC, latent_dim=16), small_encoder)
