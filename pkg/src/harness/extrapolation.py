"""
Goal extrapolation with vector goals: a vector-goal CPN is trained on reach3d
demonstrations whose targets never leave the z = 0.5 plane, (H, U) is chosen
on held-in goals, and the planned endpoint is then compared with targets
offset along z against the zero-initialised, unrefined plan.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.core.errors import ContractViolation, DatasetIOError, ensure
from src.core.imitation import TrainConfig, train_vector_goal
from src.core.models import Method, MethodConfig, as_tensor
from src.core.netblocks import ConvEncoderSpec
from src.core.planner import PlannerConfig, plan_endpoint_deviation
from src.sim.worlds import TaskSpec, goal_vector, reset

logger = logging.getLogger(__name__)


def parse_grid(text: str) -> Dict[str, List[int]]:
    """'H=3,5,8;U=1,2,5' -> {'H': [3, 5, 8], 'U': [1, 2, 5]}"""
    grid: Dict[str, List[int]] = {}
    try:
        for part in filter(None, (p.strip() for p in text.split(";"))):
            key, values = part.split("=", 1)
            grid[key.strip().upper()] = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ContractViolation(f"malformed grid {text!r}; expected e.g. 'H=3,5,8;U=1,2,5'")
    ensure(set(grid) == {"H", "U"}, f"grid needs exactly H and U entries, got {sorted(grid)}")
    ensure(all(grid["H"]) and min(grid["H"]) >= 1, "grid horizons must be >= 1")
    ensure(min(grid["U"]) >= 0, "grid update counts must be >= 0")
    return grid


@dataclass
class GridCell:
    horizon: int
    inner_updates: int
    held_in_deviation: float
    offset_deviation: float


@dataclass
class StudyReport:
    trajectories: int
    cells: List[GridCell] = field(default_factory=list)
    selected: Tuple[int, int] = (0, 0)
    selected_offset_deviation: float = float("nan")
    baseline_offset_deviation: float = float("nan")
    training_loss: List[float] = field(default_factory=list)

    @property
    def reduction(self) -> float:
        """Fractional reduction of offset-goal deviation versus the unrefined zero plan"""
        if not self.baseline_offset_deviation:
            return 0.0
        return 1.0 - self.selected_offset_deviation / self.baseline_offset_deviation

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(cell) for cell in self.cells],
                            columns=["horizon", "inner_updates", "held_in_deviation", "offset_deviation"])


def _start_states(model, task: TaskSpec, seeds: Sequence[int], offset=None) -> Tuple[torch.Tensor, torch.Tensor]:
    observations, goals = [], []
    for seed in seeds:
        state, observation, _ = reset(task, seed, offset)
        observations.append(observation)
        goals.append(goal_vector(task, state))
    with torch.no_grad():
        x_t = model.encode(as_tensor(np.stack(observations)))
    return x_t, as_tensor(np.stack(goals))


def extrapolation_study(trajectories: Sequence, task: TaskSpec, grid: Dict[str, List[int]],
                        train_config: TrainConfig, method_config: Optional[MethodConfig] = None,
                        encoder_spec: Optional[ConvEncoderSpec] = None, z_offsets: Sequence[float] = (-0.15, 0.15),
                        test_goals: int = 10, base_seed: int = 5000) -> StudyReport:
    ensure(task.task_id == "reach3d", "the extrapolation study runs on reach3d")
    ensure(len(trajectories) > 0, "extrapolation study needs training trajectories")
    method_config = method_config or MethodConfig(method=Method.CPN, goal_mode="vector")
    ensure(method_config.goal_mode == "vector", "extrapolation study needs a vector-goal model")

    trainer, record = train_vector_goal(method_config, trajectories, task, train_config,
                                        encoder_spec=encoder_spec)
    model = trainer.model
    report = StudyReport(trajectories=len(trajectories), training_loss=record.epoch_losses)

    held_in_seeds = [base_seed + i for i in range(test_goals)]
    x_in, goals_in = _start_states(model, task, held_in_seeds)
    offset_states = [_start_states(model, task, held_in_seeds, (0.0, 0.0, dz)) for dz in z_offsets]

    def offset_deviation(cfg: PlannerConfig) -> float:
        return float(np.mean([plan_endpoint_deviation(model, x, g, cfg) for x, g in offset_states]))

    for horizon in grid["H"]:
        for updates in grid["U"]:
            cfg = PlannerConfig(horizon=horizon, inner_updates=updates, step_size=method_config.step_size)
            cell = GridCell(horizon=horizon, inner_updates=updates,
                            held_in_deviation=plan_endpoint_deviation(model, x_in, goals_in, cfg),
                            offset_deviation=offset_deviation(cfg))
            report.cells.append(cell)
            logger.info(f"H={horizon} U={updates}: held-in {cell.held_in_deviation:.4f}, "
                        f"offset {cell.offset_deviation:.4f}")

    best = min(report.cells, key=lambda c: (c.held_in_deviation, c.horizon, c.inner_updates))
    report.selected = (best.horizon, best.inner_updates)
    report.selected_offset_deviation = best.offset_deviation
    report.baseline_offset_deviation = offset_deviation(
        PlannerConfig(horizon=best.horizon, inner_updates=0, step_size=method_config.step_size))
    logger.info(f"✅ Selected H={best.horizon} U={best.inner_updates}: offset deviation "
                f"{report.selected_offset_deviation:.4f} vs zero plan {report.baseline_offset_deviation:.4f}")
    return report


def emit_study(report: StudyReport, path: Union[str, Path]) -> Dict[str, Path]:
    out = Path(path)
    files = {"grid": out / "extrapolation_grid.tsv", "summary": out / "extrapolation.json"}
    summary = {
        "trajectories": report.trajectories,
        "selected": {"horizon": report.selected[0], "inner_updates": report.selected[1]},
        "selected_offset_deviation": report.selected_offset_deviation,
        "baseline_offset_deviation": report.baseline_offset_deviation,
        "reduction": report.reduction,
        "training_loss": report.training_loss,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.frame().to_csv(files["grid"], sep="\t", index=False, float_format="%.6f")
        with open(files["summary"], "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(f"cannot write extrapolation report to {out}: {e}")
    return files
