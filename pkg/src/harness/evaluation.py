"""
First-attempt evaluation: one episode per seeded trial, no adaptation and no
parameter updates. Results are gathered into a method x task report that is
emitted as tab-separated files.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.core.errors import DatasetIOError, NumericFault, ensure
from src.core.events import EventType, TrainingEvents
from src.core.models import LADDER, Method, reactive_action
from src.core.netblocks import model_checksum
from src.core.planner import MPCAgent, PlannerConfig
from src.sim.worlds import ACTION_DIM, TaskSpec, World

logger = logging.getLogger(__name__)

RANDOM = "random"
COLUMN_ORDER = tuple(method.label for method in LADDER) + (RANDOM,)


def column_label(method: Union[str, Method]) -> str:
    if str(method).lower() == RANDOM:
        return RANDOM
    return Method.parse(method).label


@dataclass
class EvalConfig:
    methods: List[str] = field(default_factory=lambda: [m.value for m in LADDER])
    tasks: List[str] = field(default_factory=lambda: ["reach", "push", "button", "lever", "reach3d"])
    trials: int = 20
    base_seed: int = 1000
    planner: Dict[str, PlannerConfig] = field(default_factory=dict)

    def __post_init__(self):
        ensure(self.trials >= 1, "trials must be >= 1")
        self.methods = [Method.parse(m).value for m in self.methods]

    @property
    def seeds(self) -> List[int]:
        return [self.base_seed + trial for trial in range(self.trials)]

    @classmethod
    def from_settings(cls, settings, **overrides) -> "EvalConfig":
        values = dict(trials=settings.get('evaluation.trials', 20),
                      base_seed=settings.get('evaluation.base_seed', 1000),
                      tasks=list(settings.get('suite.tasks', ["reach", "push", "button", "lever", "reach3d"])))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrialOutcome:
    seed: int
    success: bool
    steps: int
    fault: Optional[str] = None


@dataclass
class CellResult:
    method: str
    task: str
    outcomes: List[TrialOutcome] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.outcomes)

    @property
    def successes(self) -> int:
        return sum(1 for outcome in self.outcomes if outcome.success)

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def seeds(self) -> List[int]:
        return [outcome.seed for outcome in self.outcomes]

    @property
    def faults(self) -> int:
        return sum(1 for outcome in self.outcomes if outcome.fault)

    def formatted(self) -> str:
        return f"{self.successes}/{self.trials} ({self.rate:.3f})"

    def to_dict(self) -> Dict:
        return {"method": self.method, "task": self.task, "outcomes": [asdict(o) for o in self.outcomes]}

    @classmethod
    def from_dict(cls, data: Dict) -> "CellResult":
        return cls(method=data["method"], task=data["task"],
                   outcomes=[TrialOutcome(**o) for o in data["outcomes"]])


@dataclass
class EvalReport:
    cells: Dict[Tuple[str, str], CellResult] = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        self.cells[(column_label(cell.method), cell.task)] = cell

    def get(self, method, task: str) -> Optional[CellResult]:
        return self.cells.get((column_label(method), task))

    @property
    def tasks(self) -> List[str]:
        return sorted({task for _, task in self.cells})

    @property
    def methods(self) -> List[str]:
        present = {method for method, _ in self.cells}
        return [label for label in COLUMN_ORDER if label in present]

    def to_dict(self) -> Dict:
        return {"cells": [self.cells[key].to_dict() for key in sorted(self.cells)]}

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        report = cls()
        for cell in data.get("cells", []):
            report.add(CellResult.from_dict(cell))
        return report


def _to_action(action) -> np.ndarray:
    if isinstance(action, torch.Tensor):
        action = action.detach().cpu().numpy()
    return np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)


def run_trial(model, method: Method, task: TaskSpec, seed: int,
              planner_config: Optional[PlannerConfig] = None) -> Tuple[TrialOutcome, np.ndarray]:
    """One first-attempt episode; returns the outcome and the executed actions"""
    world = World(task)
    observation, goal = world.reset(seed)
    actions: List[np.ndarray] = []
    success = False
    try:
        if method.planning:
            agent = MPCAgent(model, planner_config or PlannerConfig.from_method(model.config))
            agent.reset(goal)
            while not world.done:
                action = _to_action(agent.act(observation))
                observation, success = world.step(action)
                actions.append(action)
        else:
            while not world.done:
                with torch.no_grad():
                    action = _to_action(reactive_action(model, observation, goal if model.goal_conditioned else None))
                observation, success = world.step(action)
                actions.append(action)
    except NumericFault as e:
        logger.warning(f"Trial seed {seed} on {task.task_id} failed with numeric fault at {e.op}")
        return TrialOutcome(seed=seed, success=False, steps=len(actions), fault=e.op or "numeric"), np.array(actions)
    return TrialOutcome(seed=seed, success=bool(success), steps=len(actions)), np.array(actions)


def evaluate(model, method, task: TaskSpec, cfg: EvalConfig, planner_config: Optional[PlannerConfig] = None,
             events: Optional[TrainingEvents] = None) -> CellResult:
    """First-attempt success over cfg.trials seeded trials; parameters are verified unchanged"""
    method = Method.parse(method)
    before = model_checksum(model)
    model.eval()
    cell = CellResult(method=method.value, task=task.task_id)
    for trial, seed in enumerate(cfg.seeds):
        outcome, _ = run_trial(model, method, task, seed, planner_config)
        cell.outcomes.append(outcome)
        if events:
            events.notify(EventType.TRIAL_COMPLETED, method=method.label, task=task.task_id, trial=trial, outcome=outcome)
    ensure(model_checksum(model) == before, "parameters changed during evaluation")
    logger.info(f"{method.label} on {task.task_id}: {cell.formatted()}")
    return cell


def run_random_trial(task: TaskSpec, seed: int) -> Tuple[TrialOutcome, np.ndarray]:
    rng = np.random.default_rng(seed)
    world = World(task)
    world.reset(seed)
    actions = []
    success = False
    while not world.done:
        action = rng.uniform(-1.0, 1.0, ACTION_DIM)
        _, success = world.step(action)
        actions.append(action)
    return TrialOutcome(seed=seed, success=bool(success), steps=len(actions)), np.array(actions)


def evaluate_random(task: TaskSpec, cfg: EvalConfig) -> CellResult:
    """Uniform random actions in [-1, 1]^4, seeded per trial"""
    cell = CellResult(method=RANDOM, task=task.task_id)
    for seed in cfg.seeds:
        outcome, _ = run_random_trial(task, seed)
        cell.outcomes.append(outcome)
    logger.info(f"random on {task.task_id}: {cell.formatted()}")
    return cell


def replay_trial(checkpoint_path: Union[str, Path], task: TaskSpec, seed: int) -> Tuple[TrialOutcome, np.ndarray]:
    """Re-run a single recorded trial from its checkpoint and seed"""
    from src.core.imitation import load_checkpoint
    checkpoint = load_checkpoint(checkpoint_path)
    return run_trial(checkpoint.model, checkpoint.method_config.method, task, seed, checkpoint.planner_config)


def matrix_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for task in report.tasks:
        row = {"task": task}
        for label in COLUMN_ORDER:
            cell = report.cells.get((label, task))
            row[label] = cell.formatted() if cell else ""
        rows.append(row)
    return pd.DataFrame(rows, columns=["task", *COLUMN_ORDER])


def trial_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for label in COLUMN_ORDER:
        for task in report.tasks:
            cell = report.cells.get((label, task))
            if cell is None:
                continue
            for trial, outcome in enumerate(cell.outcomes):
                rows.append({"method": label, "task": task, "trial": trial, "seed": outcome.seed,
                             "success": int(outcome.success), "steps": outcome.steps,
                             "fault": outcome.fault or ""})
    return pd.DataFrame(rows, columns=["method", "task", "trial", "seed", "success", "steps", "fault"])


def emit_report(report: EvalReport, path: Union[str, Path]) -> Dict[str, Path]:
    """Write matrix.tsv (tasks x methods, ladder column order), trials.tsv and report.json"""
    out = Path(path)
    files = {"matrix": out / "matrix.tsv", "trials": out / "trials.tsv", "json": out / "report.json"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        matrix_frame(report).to_csv(files["matrix"], sep="\t", index=False)
        trial_frame(report).to_csv(files["trials"], sep="\t", index=False)
        with open(files["json"], "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(f"cannot write report to {out}: {e}")
    logger.debug(f"Report with {len(report.cells)} cells written to {out}")
    return files


def load_report(path: Union[str, Path]) -> EvalReport:
    try:
        with open(Path(path) / "report.json", "r", encoding="utf-8") as f:
            return EvalReport.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"cannot read report from {path}: {e}")


def failed_cell(method, task: str, seeds: Sequence[int], fault: str) -> CellResult:
    """A cell whose training faulted: every trial is recorded as a failure carrying the fault"""
    return CellResult(method=Method.parse(method).value, task=task,
                      outcomes=[TrialOutcome(seed=seed, success=False, steps=0, fault=fault) for seed in seeds])
