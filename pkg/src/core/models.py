"""
The four methods of the ablation ladder, built from the image encoder f_phi
and the combined policy+dynamics model g_theta:

    BC    reactive policy p(a | s)
    TE-BC reactive policy p(a | s, x_g)
    UPN   planning network; the goal enters only through the planning loss
    CPN   planning network with neuromodulated layers and x_g fed into the trunk
"""
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.core.errors import ensure
from src.core.netblocks import (ConvEncoder, ConvEncoderSpec, NeuromodLinearLayer, init_parameters,
                                make_linear)

logger = logging.getLogger(__name__)

ACTION_LOW = -1.0
ACTION_HIGH = 1.0


class Method(str, Enum):
    BC = "bc"
    TEBC = "tebc"
    UPN = "upn"
    CPN = "cpn"

    @property
    def planning(self) -> bool:
        return self in (Method.UPN, Method.CPN)

    @property
    def goal_conditioned(self) -> bool:
        return self in (Method.TEBC, Method.CPN)

    @property
    def neuromodulated(self) -> bool:
        return self is Method.CPN

    @property
    def label(self) -> str:
        return {"bc": "BC", "tebc": "TE-BC", "upn": "UPN", "cpn": "CPN"}[self.value]

    @classmethod
    def parse(cls, name: Union[str, "Method"]) -> "Method":
        if isinstance(name, Method):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        for method in cls:
            if method.value == key:
                return method
        ensure(False, f"unknown method {name!r}")


LADDER = (Method.BC, Method.TEBC, Method.UPN, Method.CPN)


@dataclass
class MethodConfig:
    method: Method
    horizon: Optional[int] = 5
    inner_updates: Optional[int] = 1
    step_size: Optional[float] = 0.1
    latent_dim: int = 32
    hidden_dim: int = 32
    action_dim: int = 4
    attenuator_hidden: int = 16
    second_order: bool = True
    goal_mode: str = "image"
    goal_dim: int = 3

    def __post_init__(self):
        self.method = Method.parse(self.method)
        ensure(self.goal_mode in ("image", "vector"), f"unknown goal mode {self.goal_mode!r}")
        ensure(min(self.latent_dim, self.hidden_dim, self.action_dim) >= 1, "layer widths must be positive")
        if self.method.planning:
            ensure(self.horizon is not None and self.horizon >= 1, "planning methods need horizon >= 1")
            ensure(self.inner_updates is not None and self.inner_updates >= 0,
                   "planning methods need inner_updates >= 0")
            ensure(self.step_size is not None and self.step_size > 0, "planning methods need step_size > 0")
        else:
            ensure(self.goal_mode == "image", "reactive methods only support image goals")
            self.horizon = None
            self.inner_updates = None
            self.step_size = None

    @classmethod
    def from_settings(cls, method, settings, **overrides) -> "MethodConfig":
        values = dict(
            method=Method.parse(method),
            horizon=settings.get('planner.horizon', 5),
            inner_updates=settings.get('planner.inner_updates', 1),
            step_size=settings.get('planner.step_size', 0.1),
            latent_dim=settings.get('model.latent_dim', 32),
            hidden_dim=settings.get('model.hidden_dim', 32),
            action_dim=settings.get('model.action_dim', 4),
            attenuator_hidden=settings.get('model.attenuator_hidden', 16),
            second_order=settings.get('training.second_order', True),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["method"] = self.method.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MethodConfig":
        return cls(**data)


def clamp_action(action: torch.Tensor) -> torch.Tensor:
    """Hard clamp: gradient passes unchanged inside the bounds and is zero outside"""
    return torch.clamp(action, ACTION_LOW, ACTION_HIGH)


class PolicyDynamicsModel(nn.Module):
    """g_theta: shared trunk, policy branch -> a_t, dynamics branch (trunk, a_t) -> x_{t+1}"""

    def __init__(self, latent_dim: int = 32, hidden_dim: int = 32, action_dim: int = 4,
                 neuromodulated: bool = False, goal_conditioned: bool = False, attenuator_hidden: int = 16):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.action_dim = action_dim
        self.neuromodulated = neuromodulated
        self.goal_conditioned = goal_conditioned

        def layer(n_in, n_out):
            return make_linear(n_in, n_out, neuromodulated, attenuator_hidden)

        trunk_in = latent_dim * (2 if goal_conditioned else 1)
        self.trunk = layer(trunk_in, hidden_dim)
        self.policy_hidden = layer(hidden_dim, hidden_dim)
        self.policy_out = layer(hidden_dim, action_dim)
        self.dynamics_hidden = layer(hidden_dim + action_dim, hidden_dim)
        self.dynamics_out = layer(hidden_dim, latent_dim)

    def neuromod_layers(self):
        return [m for m in self.modules() if isinstance(m, NeuromodLinearLayer)]

    def pin_attenuators(self, value: float) -> None:
        for layer in self.neuromod_layers():
            layer.pin(value)

    def unpin_attenuators(self) -> None:
        for layer in self.neuromod_layers():
            layer.unpin()

    def features(self, x_t: torch.Tensor, x_g: Optional[torch.Tensor] = None) -> torch.Tensor:
        ensure(x_t.shape[-1] == self.latent_dim, f"latent width {x_t.shape[-1]} != {self.latent_dim}")
        if self.goal_conditioned:
            ensure(x_g is not None, "goal-conditioned model requires a goal latent")
            ensure(x_g.shape == x_t.shape, f"goal latent shape {tuple(x_g.shape)} != {tuple(x_t.shape)}")
            trunk_input = torch.cat([x_t, x_g], dim=-1)
        else:
            ensure(x_g is None, "this model takes the goal only through the planning loss")
            trunk_input = x_t
        return F.relu(self.trunk(trunk_input))

    def policy(self, features: torch.Tensor) -> torch.Tensor:
        return clamp_action(self.policy_out(F.relu(self.policy_hidden(features))))

    def dynamics(self, features: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        ensure(action.shape[-1] == self.action_dim, f"action width {action.shape[-1]} != {self.action_dim}")
        return self.dynamics_out(F.relu(self.dynamics_hidden(torch.cat([features, action], dim=-1))))

    def forward(self, x_t: torch.Tensor, x_g: Optional[torch.Tensor] = None,
                action: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (a_hat, x_next); an explicit action overrides a_hat for the state prediction"""
        features = self.features(x_t, x_g)
        a_hat = self.policy(features)
        x_next = self.dynamics(features, a_hat if action is None else action)
        return a_hat, x_next


class PlanningNetwork(nn.Module):
    """Encoder + g_theta (+ goal projection in vector-goal mode) for UPN and CPN"""

    def __init__(self, config: MethodConfig, encoder: Optional[nn.Module]):
        super().__init__()
        ensure(config.method.planning, f"{config.method.label} is not a planning method")
        self.config = config
        self.encoder = encoder
        self.dynamics_model = PolicyDynamicsModel(
            latent_dim=config.latent_dim,
            hidden_dim=config.hidden_dim,
            action_dim=config.action_dim,
            neuromodulated=config.method.neuromodulated,
            goal_conditioned=config.method.goal_conditioned,
            attenuator_hidden=config.attenuator_hidden,
        )
        self.goal_projection = nn.Linear(config.goal_dim, config.latent_dim) if config.goal_mode == "vector" else None

    @property
    def goal_conditioned(self) -> bool:
        return self.dynamics_model.goal_conditioned

    @property
    def vector_goals(self) -> bool:
        return self.goal_projection is not None

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    def encode(self, observation: torch.Tensor) -> torch.Tensor:
        return self.encoder(observation)

    def project_goal(self, goal: torch.Tensor) -> torch.Tensor:
        ensure(self.vector_goals, "goal projection requires a model built in vector-goal mode")
        ensure(goal.shape[-1] == self.config.goal_dim, f"goal vector width {goal.shape[-1]} != {self.config.goal_dim}")
        return self.goal_projection(goal)

    def goal_latent(self, goal: torch.Tensor) -> torch.Tensor:
        """x_g from a goal image, or from a goal vector in vector-goal mode"""
        return self.project_goal(goal) if self.vector_goals else self.encode(goal)

    def decode_goal(self, latent: torch.Tensor) -> torch.Tensor:
        """Least-squares inverse of the goal projection: latent -> goal-space point"""
        ensure(self.vector_goals, "decoding endpoints requires vector-goal mode")
        pinv = torch.linalg.pinv(self.goal_projection.weight)
        return (latent - self.goal_projection.bias) @ pinv.transpose(-1, -2)

    def step(self, x_t: torch.Tensor, x_g: Optional[torch.Tensor],
             action: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.dynamics_model(x_t, x_g if self.goal_conditioned else None, action)


class ReactivePolicy(nn.Module):
    """BC / TE-BC: encoder + two-layer head over x_t or concat(x_t, x_g)"""

    def __init__(self, config: MethodConfig, encoder: nn.Module):
        super().__init__()
        ensure(not config.method.planning, f"{config.method.label} is not a reactive method")
        self.config = config
        self.encoder = encoder
        head_in = config.latent_dim * (2 if config.method.goal_conditioned else 1)
        self.head_hidden = nn.Linear(head_in, config.hidden_dim)
        self.head_out = nn.Linear(config.hidden_dim, config.action_dim)

    @property
    def goal_conditioned(self) -> bool:
        return self.config.method.goal_conditioned

    def forward(self, o_t: torch.Tensor, o_g: Optional[torch.Tensor] = None) -> torch.Tensor:
        x_t = self.encoder(o_t)
        if self.goal_conditioned:
            ensure(o_g is not None, "TE-BC requires a goal image")
            features = torch.cat([x_t, self.encoder(o_g)], dim=-1)
        else:
            features = x_t
        return clamp_action(self.head_out(F.relu(self.head_hidden(features))))


def build_model(config: MethodConfig, encoder_spec: Optional[ConvEncoderSpec] = None,
                generator: Optional[torch.Generator] = None) -> nn.Module:
    """Instantiate the method's network with deterministic initialization"""
    encoder_spec = encoder_spec or ConvEncoderSpec(latent_dim=config.latent_dim)
    ensure(encoder_spec.latent_dim == config.latent_dim,
           f"encoder latent width {encoder_spec.latent_dim} != model latent width {config.latent_dim}")
    encoder = ConvEncoder(encoder_spec)
    model = PlanningNetwork(config, encoder) if config.method.planning else ReactivePolicy(config, encoder)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    init_parameters(model, generator)
    logger.debug(f"Built {config.method.label} with {count_parameters(model)} parameters")
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def as_tensor(value: Union[np.ndarray, torch.Tensor, list]) -> torch.Tensor:
    """Observations and goals from the worlds arrive as numpy arrays"""
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value), dtype=torch.get_default_dtype())


def encode(model: nn.Module, observation) -> torch.Tensor:
    return model.encoder(as_tensor(observation))


def policy_dynamics_step(model: PlanningNetwork, x_t: torch.Tensor,
                         x_g: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    ensure((x_g is not None) == model.goal_conditioned,
           "a goal latent is passed to g_theta iff the model is goal-conditioned")
    return model.step(x_t, x_g)


def reactive_action(policy: ReactivePolicy, o_t, o_g=None) -> torch.Tensor:
    return policy(as_tensor(o_t), None if o_g is None else as_tensor(o_g))


def vector_goal_step(model: PlanningNetwork, x_t: torch.Tensor, goal) -> Tuple[torch.Tensor, torch.Tensor]:
    x_g = model.project_goal(as_tensor(goal))
    return model.step(x_t, x_g)


def with_method(config: MethodConfig, method: Method) -> MethodConfig:
    """Same widths, different rung of the ladder"""
    values = config.to_dict()
    values["method"] = method
    if method.planning and config.horizon is None:
        values.update(horizon=5, inner_updates=1, step_size=0.1)
    return MethodConfig(**values)
