"""
Outer-loop training by behavior cloning. Planning methods are cloned through
the planner: the loss compares the refined plan with the demonstrated actions,
so with second_order the parameter gradient includes the path through the
inner update. Reactive methods regress the action directly.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from src.core.diffcore import Tape, backward, mse
from src.core.errors import DatasetIOError, NumericFault, ensure
from src.core.events import EventType, TrainingEvents
from src.core.models import MethodConfig, as_tensor, build_model
from src.core.netblocks import (ConvEncoderSpec, ParamBundle, assign_parameters, bundle_checksum,
                                load_parameters, parameter_bundle, save_parameters)
from src.core.planner import PlannerConfig, refine_plan

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    second_order: bool = True
    seed: int = 0
    goal_alignment_weight: float = 1.0

    def __post_init__(self):
        ensure(self.epochs >= 1, "epochs must be >= 1")
        ensure(self.batch_size >= 1, "batch size must be >= 1")
        ensure(self.learning_rate > 0, "learning rate must be > 0")

    @classmethod
    def from_settings(cls, settings, **overrides) -> "TrainConfig":
        values = dict(
            epochs=settings.get('training.epochs', 50),
            batch_size=settings.get('training.batch_size', 32),
            learning_rate=settings.get('training.learning_rate', 1e-3),
            second_order=settings.get('training.second_order', True),
            seed=settings.get('training.seed', 0),
            goal_alignment_weight=settings.get('training.goal_alignment_weight', 1.0),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainRecord:
    method: str
    epochs: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ""

    @property
    def epoch_losses(self) -> List[float]:
        return [entry["outer_loss"] for entry in self.epochs]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class DemoWindows(Dataset):
    """(o_t, o_g, a_{t:t+H}) samples for every window start of every trajectory.

    Window starts stop where the window would run off the end; trajectories
    shorter than H yield one window zero-padded to H actions.
    """

    def __init__(self, trajectories: Sequence, horizon: int):
        ensure(horizon >= 1, "window horizon must be >= 1")
        self.trajectories = list(trajectories)
        self.horizon = horizon
        self.index: List[Tuple[int, int]] = []
        for i, traj in enumerate(self.trajectories):
            starts = max(1, traj.steps - horizon + 1)
            self.index.extend((i, t) for t in range(starts))

    def __len__(self) -> int:
        return len(self.index)

    def window(self, traj, t: int) -> np.ndarray:
        actions = np.zeros((self.horizon, traj.action_dim), dtype=np.float32)
        chunk = traj.actions[t:t + self.horizon]
        actions[:len(chunk)] = chunk
        return actions

    def __getitem__(self, item: int):
        i, t = self.index[item]
        traj = self.trajectories[i]
        return traj.images[t], traj.goal_image, self.window(traj, t)


class DemoSteps(Dataset):
    """(o_t, o_g, a_t) single-step samples for the reactive methods"""

    def __init__(self, trajectories: Sequence):
        self.trajectories = list(trajectories)
        self.index = [(i, t) for i, traj in enumerate(self.trajectories) for t in range(traj.steps)]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, item: int):
        i, t = self.index[item]
        traj = self.trajectories[i]
        return traj.images[t], traj.goal_image, traj.actions[t]


class VectorGoalWindows(DemoWindows):
    """Windows whose goal is a 3-vector, plus the agent position at the window start"""

    def __init__(self, trajectories: Sequence, horizon: int, task):
        super().__init__(trajectories, horizon)
        from src.sim.worlds import goal_vector, replay_states
        self.positions = []
        self.goals = []
        for traj in self.trajectories:
            states = replay_states(task, traj.seed, traj.actions[:-1])
            self.positions.append(np.stack([np.pad(s.agent, (0, 3 - len(s.agent))) for s in states]).astype(np.float32))
            self.goals.append(goal_vector(task, states[0]).astype(np.float32))

    def __getitem__(self, item: int):
        i, t = self.index[item]
        traj = self.trajectories[i]
        return traj.images[t], self.goals[i], self.window(traj, t), self.positions[i][t]


def outer_loss_planning(model, batch, cfg: PlannerConfig, second_order: bool = True,
                        tape: Optional[Tape] = None):
    """mse(refined plan, demonstrated H-step actions); returns (loss, plan)"""
    o_t, o_g, demo_actions = batch[:3]
    demo_actions = as_tensor(demo_actions)
    ensure(demo_actions.shape[-2] == cfg.horizon,
           f"demo window has {demo_actions.shape[-2]} actions, planner horizon is {cfg.horizon}")
    plan = refine_plan(model, o_t, o_g, cfg, differentiable=True, second_order=second_order, tape=tape)
    return mse(plan.actions, demo_actions.to(plan.actions.dtype)), plan


def outer_loss_reactive(policy, batch) -> torch.Tensor:
    o_t, o_g, action = batch[:3]
    goal = as_tensor(o_g) if policy.goal_conditioned else None
    predicted = policy(as_tensor(o_t), goal)
    return mse(predicted, as_tensor(action).to(predicted.dtype))


def goal_alignment_loss(model, o_t, positions) -> torch.Tensor:
    """Regress the goal projection of the agent's true position onto the encoded frame"""
    return mse(model.project_goal(positions), model.encode(o_t))


class Trainer:
    """Adam on every parameter (phi, theta, beta, gamma) with seeded shuffling"""

    def __init__(self, method_config: MethodConfig, train_config: TrainConfig,
                 planner_config: Optional[PlannerConfig] = None, encoder_spec: Optional[ConvEncoderSpec] = None,
                 events: Optional[TrainingEvents] = None, model: Optional[torch.nn.Module] = None):
        self.logger = logging.getLogger(__name__)
        self.method_config = method_config
        self.train_config = train_config
        self.encoder_spec = encoder_spec or ConvEncoderSpec(latent_dim=method_config.latent_dim)
        self.planner_config = planner_config
        if method_config.method.planning and planner_config is None:
            self.planner_config = PlannerConfig.from_method(method_config)
        if self.planner_config is not None and not self.second_order and self.planner_config.init == "zeros":
            # a zero plan refined by a constant inner gradient has no path back to the parameters
            self.logger.info("First-order training: plans start from the policy branch")
            self.planner_config = replace(self.planner_config, init="policy")
        self.events = events
        generator = torch.Generator().manual_seed(train_config.seed)
        self.model = model if model is not None else build_model(method_config, self.encoder_spec, generator)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_config.learning_rate)
        self._warned_no_grad = False

    @property
    def second_order(self) -> bool:
        """Either the run or the method can switch the second-order path off"""
        return self.train_config.second_order and self.method_config.second_order

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def make_dataset(self, trajectories: Sequence, task=None) -> Dataset:
        if not self.method_config.method.planning:
            return DemoSteps(trajectories)
        if self.method_config.goal_mode == "vector":
            ensure(task is not None, "vector-goal training needs the task to replay agent positions")
            return VectorGoalWindows(trajectories, self.planner_config.horizon, task)
        return DemoWindows(trajectories, self.planner_config.horizon)

    def batch_loss(self, batch, tape: Optional[Tape] = None) -> Tuple[torch.Tensor, Optional[List[float]]]:
        batch = [value.to(self.dtype) for value in batch]
        if not self.method_config.method.planning:
            return outer_loss_reactive(self.model, batch), None
        loss, plan = outer_loss_planning(self.model, batch, self.planner_config,
                                         self.second_order, tape)
        if self.method_config.goal_mode == "vector" and self.train_config.goal_alignment_weight > 0:
            loss = loss + self.train_config.goal_alignment_weight * goal_alignment_loss(self.model, batch[0], batch[3])
        return loss, plan.loss_trace

    def _skip_update(self) -> None:
        if not self._warned_no_grad:
            self.logger.warning("Outer loss does not depend on the parameters; skipping update")
            self._warned_no_grad = True

    def apply_gradients(self, loss: torch.Tensor, tape: Optional[Tape] = None) -> bool:
        """One Adam step; returns False when no parameter received a gradient"""
        self.optimizer.zero_grad(set_to_none=True)
        params = [p for p in self.model.parameters() if p.requires_grad]
        grads = backward(loss, params, tape) if loss.requires_grad else {}
        if not grads:
            self._skip_update()
            return False
        for param in params:
            if param in grads:
                param.grad = grads[param].detach()
        self.optimizer.step()
        return True

    def fit(self, trajectories: Sequence, task=None) -> TrainRecord:
        ensure(len(trajectories) > 0, "training split is empty")
        dataset = self.make_dataset(trajectories, task)
        ensure(len(dataset) > 0, "training split has no samples")
        loader = DataLoader(dataset, batch_size=self.train_config.batch_size, shuffle=True,
                            generator=torch.Generator().manual_seed(self.train_config.seed + 1))
        record = TrainRecord(method=self.method_config.method.value)
        method = self.method_config.method.label
        start = time.perf_counter()
        self.model.train()

        for epoch in range(1, self.train_config.epochs + 1):
            total, samples = 0.0, 0
            inner_first, inner_last = [], []
            for batch_index, batch in enumerate(loader):
                tape = Tape()
                try:
                    with tape:
                        loss, trace = self.batch_loss(batch, tape)
                    self.apply_gradients(loss, tape)
                except NumericFault as e:
                    fault = e.with_provenance(epoch, batch_index)
                    self.logger.error(f"{method}: {fault}")
                    if self.events:
                        self.events.notify(EventType.NUMERIC_FAULT, fault)
                    raise fault
                size = len(batch[0])
                total += float(loss.detach()) * size
                samples += size
                if trace:
                    inner_first.append(trace[0])
                    inner_last.append(trace[-1])

            entry = {"epoch": epoch, "outer_loss": total / samples}
            if inner_first:
                entry["inner_loss_first"] = float(np.mean(inner_first))
                entry["inner_loss_last"] = float(np.mean(inner_last))
            record.epochs.append(entry)
            self.logger.info(f"{method} epoch {epoch}/{self.train_config.epochs}: outer loss {entry['outer_loss']:.6f}"
                             + (f", inner {entry['inner_loss_first']:.4f} -> {entry['inner_loss_last']:.4f}"
                                if inner_first else ""))
            if self.events:
                self.events.notify(EventType.EPOCH_COMPLETED, method=method, **entry)

        self.model.eval()
        record.wall_time = time.perf_counter() - start
        record.checksum = bundle_checksum(parameter_bundle(self.model))
        return record


def _trajectories_of(split) -> List:
    return split.load() if hasattr(split, "load") else list(split)


def train(method_config: MethodConfig, split, train_config: TrainConfig,
          planner_config: Optional[PlannerConfig] = None, encoder_spec: Optional[ConvEncoderSpec] = None,
          events: Optional[TrainingEvents] = None) -> Tuple[ParamBundle, TrainRecord]:
    """Train one method on a split (TrainSplit or list of trajectories)"""
    trainer = Trainer(method_config, train_config, planner_config, encoder_spec, events)
    record = trainer.fit(_trajectories_of(split))
    return parameter_bundle(trainer.model), record


def train_vector_goal(method_config: MethodConfig, trajectories: Sequence, task, train_config: TrainConfig,
                      planner_config: Optional[PlannerConfig] = None, encoder_spec: Optional[ConvEncoderSpec] = None,
                      events: Optional[TrainingEvents] = None) -> Tuple[Trainer, TrainRecord]:
    """Vector-goal planning network trained with the goal-alignment term; returns the trainer and its record"""
    ensure(method_config.method.planning and method_config.goal_mode == "vector",
           "vector-goal training needs a planning method in vector goal mode")
    trainer = Trainer(method_config, train_config, planner_config, encoder_spec, events)
    record = trainer.fit(list(trajectories), task)
    return trainer, record


@dataclass
class Checkpoint:
    model: torch.nn.Module
    method_config: MethodConfig
    planner_config: Optional[PlannerConfig]
    train_config: TrainConfig
    encoder_spec: ConvEncoderSpec
    meta: Dict[str, Any]


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: Union[str, Path], model: torch.nn.Module, method_config: MethodConfig,
                    train_config: TrainConfig, planner_config: Optional[PlannerConfig] = None,
                    encoder_spec: Optional[ConvEncoderSpec] = None, epoch: Optional[int] = None,
                    record: Optional[TrainRecord] = None, **extra) -> Path:
    """CPNP parameters plus a JSON sidecar describing how to rebuild the model"""
    bundle = parameter_bundle(model)
    path = save_parameters(bundle, path)
    encoder_spec = encoder_spec or model.encoder.spec
    meta = {
        "method": method_config.method.value,
        "model": method_config.to_dict(),
        "planner": asdict(planner_config) if planner_config else None,
        "train": asdict(train_config),
        "encoder": asdict(encoder_spec),
        "seed": train_config.seed,
        "epoch": epoch if epoch is not None else train_config.epochs,
        "checksum": bundle_checksum(bundle),
        "record": record.to_dict() if record else None,
    }
    meta.update(extra)
    try:
        with open(sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint sidecar for {path}: {e}")
    logger.info(f"✅ Saved {method_config.method.label} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        with open(sidecar_path(path), "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"cannot read checkpoint sidecar for {path}: {e}")
    bundle = load_parameters(path)
    if meta.get("checksum") and bundle_checksum(bundle) != meta["checksum"]:
        raise DatasetIOError(f"checkpoint {path} does not match its recorded checksum")
    method_config = MethodConfig.from_dict(meta["model"])
    encoder_spec = ConvEncoderSpec(**meta["encoder"])
    model = build_model(method_config, encoder_spec)
    assign_parameters(model, bundle)
    model.eval()
    planner_config = PlannerConfig(**meta["planner"]) if meta.get("planner") else None
    return Checkpoint(model=model, method_config=method_config, planner_config=planner_config,
                      train_config=TrainConfig(**meta["train"]), encoder_spec=encoder_spec, meta=meta)
