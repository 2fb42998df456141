"""
Planning by backpropagation: the inner loop refines an action plan by
gradient descent on the Huber distance between the predicted final latent and
the goal latent; MPC executes only the first planned action and replans.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
import torch

from src.core.diffcore import Tape, backward, backward_differentiable, check_finite, huber_rows
from src.core.errors import DatasetIOError, ensure
from src.core.models import as_tensor, clamp_action

logger = logging.getLogger(__name__)

PLAN_INITS = ("zeros", "policy")


@dataclass
class PlannerConfig:
    horizon: int = 5
    inner_updates: int = 1
    step_size: float = 0.1
    huber_delta: float = 1.0
    init: str = "zeros"
    open_loop: bool = False

    def __post_init__(self):
        ensure(self.horizon >= 1, "planner horizon must be >= 1")
        ensure(self.inner_updates >= 0, "planner inner_updates must be >= 0")
        ensure(self.step_size > 0, "planner step_size must be > 0")
        ensure(self.huber_delta > 0, "planner huber_delta must be > 0")
        ensure(self.init in PLAN_INITS, f"plan init must be one of {PLAN_INITS}")

    @classmethod
    def from_settings(cls, settings, **overrides) -> "PlannerConfig":
        values = dict(
            horizon=settings.get('planner.horizon', 5),
            inner_updates=settings.get('planner.inner_updates', 1),
            step_size=settings.get('planner.step_size', 0.1),
            huber_delta=settings.get('planner.huber_delta', 1.0),
            init=settings.get('planner.init', 'zeros'),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_method(cls, method_config, settings=None, **overrides) -> "PlannerConfig":
        values = dict(horizon=method_config.horizon,
                      inner_updates=method_config.inner_updates,
                      step_size=method_config.step_size)
        values.update(overrides)
        if settings is not None:
            return cls.from_settings(settings, **values)
        return cls(**{k: v for k, v in values.items() if v is not None})


@dataclass
class Plan:
    actions: torch.Tensor
    predicted_latents: torch.Tensor
    loss_trace: List[float] = field(default_factory=list)
    policy_actions: Optional[torch.Tensor] = None

    @property
    def horizon(self) -> int:
        return self.actions.shape[-2]

    @property
    def first_action(self) -> torch.Tensor:
        return self.actions[..., 0, :]


def rollout(model, x_t: torch.Tensor, x_g: Optional[torch.Tensor], actions: torch.Tensor,
            policy_trace: Optional[list] = None) -> torch.Tensor:
    """Unroll g_theta under the given actions; latents[0] = x_t.

    The policy branch still runs at every step and its outputs are appended to
    policy_trace when one is supplied.
    """
    ensure(actions.dim() >= 2 and actions.shape[-2] >= 1, "actions must be shaped [..., H, A]")
    ensure(actions.shape[:-2] == x_t.shape[:-1],
           f"action batch {tuple(actions.shape[:-2])} != latent batch {tuple(x_t.shape[:-1])}")
    latents = [x_t]
    x = x_t
    for k in range(actions.shape[-2]):
        a_hat, x = model.step(x, x_g, actions[..., k, :])
        if policy_trace is not None:
            policy_trace.append(a_hat)
        latents.append(x)
    return torch.stack(latents, dim=-2)


def planning_loss(final_latent: torch.Tensor, x_g: torch.Tensor, delta: float) -> torch.Tensor:
    """Huber distance to the goal, averaged over latent dims and summed over a leading batch"""
    return huber_rows(final_latent, x_g, delta).sum()


def initial_plan(model, x_t: torch.Tensor, x_g: torch.Tensor, cfg: PlannerConfig) -> torch.Tensor:
    batch_shape = tuple(x_t.shape[:-1])
    if cfg.init == "zeros":
        return torch.zeros(batch_shape + (cfg.horizon, model.action_dim), dtype=x_t.dtype, device=x_t.device)
    actions = []
    x = x_t
    for _ in range(cfg.horizon):
        a_hat, x = model.step(x, x_g)
        actions.append(a_hat)
    return torch.stack(actions, dim=-2)


def refine_plan(model, o_t, o_g, cfg: PlannerConfig, differentiable: bool = False, second_order: bool = True,
                x_t: Optional[torch.Tensor] = None, x_g: Optional[torch.Tensor] = None,
                tape: Optional[Tape] = None) -> Plan:
    """Run cfg.inner_updates projected gradient steps on the action plan only.

    With differentiable=True the returned actions stay on the graph of the
    model parameters; second_order controls whether the inner gradient itself
    is differentiated (create_graph) or treated as a constant.
    """
    with torch.set_grad_enabled(differentiable):
        if x_t is None:
            x_t = model.encode(as_tensor(o_t))
        if x_g is None:
            x_g = model.goal_latent(as_tensor(o_g))
    if not differentiable:
        x_t, x_g = x_t.detach(), x_g.detach()

    batch = int(np.prod(x_t.shape[:-1])) if x_t.dim() > 1 else 1
    trace: List[float] = []
    with torch.enable_grad():
        actions = initial_plan(model, x_t, x_g, cfg)
        if not differentiable:
            actions = actions.detach()
        if not actions.requires_grad:
            actions = actions.requires_grad_(True)

        for _ in range(cfg.inner_updates):
            if not differentiable:
                actions = actions.detach().requires_grad_(True)
            latents = rollout(model, x_t, x_g, actions)
            loss = planning_loss(latents[..., -1, :], x_g, cfg.huber_delta)
            check_finite(loss, tape, "inner planning loss")
            trace.append(float(loss.detach()) / batch)
            if differentiable and second_order:
                grads = backward_differentiable(loss, [actions], tape)
            else:
                grads = backward(loss, [actions], tape)
            actions = clamp_action(actions - cfg.step_size * grads.get(actions))

        policy_trace: list = []
        latents = rollout(model, x_t, x_g, actions, policy_trace)
        loss = planning_loss(latents[..., -1, :], x_g, cfg.huber_delta)
        check_finite(loss, tape, "inner planning loss")
        trace.append(float(loss.detach()) / batch)

    if any(later > earlier for earlier, later in zip(trace, trace[1:])):
        logger.warning(f"Inner planning loss increased: {['%.6g' % value for value in trace]}")

    policy_actions = torch.stack(policy_trace, dim=-2)
    if not differentiable:
        actions, latents, policy_actions = actions.detach(), latents.detach(), policy_actions.detach()
    return Plan(actions=actions, predicted_latents=latents, loss_trace=trace, policy_actions=policy_actions)


class MPCAgent:
    """Replans the full horizon at every step and executes only the first action.

    The goal latent is computed once per episode. With cfg.open_loop the whole
    plan from a single refinement is executed before planning again.
    """

    def __init__(self, model, cfg: PlannerConfig):
        self.model = model
        self.cfg = cfg
        self.logger = logging.getLogger(__name__)
        self.goal_latent: Optional[torch.Tensor] = None
        self.plans_made = 0
        self.last_plan: Optional[Plan] = None
        self._pending: List[torch.Tensor] = []

    def reset(self, o_g) -> None:
        with torch.no_grad():
            self.goal_latent = self.model.goal_latent(as_tensor(o_g)).detach()
        self.plans_made = 0
        self.last_plan = None
        self._pending = []

    def act(self, o_t) -> torch.Tensor:
        ensure(self.goal_latent is not None, "MPC agent has no active episode; call reset(goal) first")
        if self.cfg.open_loop and self._pending:
            return self._pending.pop(0)
        plan = refine_plan(self.model, o_t, None, self.cfg, x_g=self.goal_latent)
        self.plans_made += 1
        self.last_plan = plan
        if self.cfg.open_loop:
            self._pending = [plan.actions[k] for k in range(1, plan.horizon)]
        return plan.actions[0]


def mpc_step(agent: MPCAgent, o_t, o_g, cfg: Optional[PlannerConfig] = None) -> torch.Tensor:
    """Plan from o_t towards o_g and return the plan's first action"""
    if cfg is not None:
        agent.cfg = cfg
    if agent.goal_latent is None:
        agent.reset(o_g)
    return agent.act(o_t)


def plan_endpoint(model, x_t: torch.Tensor, goal, cfg: PlannerConfig):
    """Plan towards a goal vector; returns (decoded endpoint, plan)"""
    ensure(getattr(model, "vector_goals", False), "endpoint deviation requires a vector-goal model")
    goal = as_tensor(goal)
    with torch.no_grad():
        x_g = model.project_goal(goal)
    plan = refine_plan(model, None, None, cfg, x_t=x_t.detach(), x_g=x_g)
    with torch.no_grad():
        endpoint = model.decode_goal(plan.predicted_latents[..., -1, :])
    return endpoint, plan


def plan_endpoint_deviation(model, x_t: torch.Tensor, goal, cfg: PlannerConfig) -> float:
    """Euclidean distance between the decoded predicted endpoint and the goal vector"""
    endpoint, _ = plan_endpoint(model, x_t, goal, cfg)
    return float(torch.linalg.vector_norm(endpoint - as_tensor(goal), dim=-1).mean())


def dump_plan(plan: Plan, path: Union[str, Path]) -> Path:
    """Tab-separated debug dump: step index, planned action components, the policy
    branch's proposal at each step, and the inner-loss trace value"""
    width = plan.actions.shape[-1]
    actions = plan.actions.detach().reshape(-1, plan.horizon, width)[0].cpu().numpy()
    rows = max(len(actions), len(plan.loss_trace))
    frame = pd.DataFrame({"step": range(rows)})
    for j in range(width):
        frame[f"a{j}"] = [actions[k, j] if k < len(actions) else np.nan for k in range(rows)]
    if plan.policy_actions is not None:
        proposals = plan.policy_actions.detach().reshape(-1, plan.horizon, width)[0].cpu().numpy()
        for j in range(width):
            frame[f"p{j}"] = [proposals[k, j] if k < len(proposals) else np.nan for k in range(rows)]
    frame["inner_loss"] = [plan.loss_trace[k] if k < len(plan.loss_trace) else np.nan for k in range(rows)]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, sep="\t", index=False, float_format="%.9g", na_rep="")
    except OSError as e:
        raise DatasetIOError(f"cannot write plan dump {path}: {e}")
    return path
