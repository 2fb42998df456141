"""
Leave-one-task-out evaluation matrix: for each holdout task every enabled
method is trained on the other tasks' demonstrations with the same budget,
then evaluated on the holdout; a random-policy row is added per task.
"""
import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import psutil

from config.settings_manager import settings
from src.core.errors import NumericFault, ensure
from src.core.events import EventType, TrainingEvents
from src.core.imitation import TrainConfig, Trainer, save_checkpoint
from src.core.models import Method
from src.core.netblocks import ConvEncoderSpec
from src.data.datastore import AccessAudit, TrajectoryStore, leave_one_out_split
from src.harness.evaluation import (CellResult, EvalConfig, EvalReport, emit_report, evaluate, evaluate_random,
                                    failed_cell)
from src.harness.method_registry import MethodRegistry
from src.sim.worlds import TaskSpec


def default_workers() -> int:
    configured = settings.WORKERS
    if configured and configured > 0:
        return configured
    return psutil.cpu_count(logical=False) or 1


@dataclass
class HoldoutResult:
    holdout: str
    cells: List[CellResult]
    audit_reads: int
    leaked_reads: int


class MatrixRunner:
    """Runs holdout jobs concurrently on a thread pool; report assembly stays on the event loop"""

    def __init__(self, eval_config: EvalConfig, store: TrajectoryStore, suite: Dict[str, TaskSpec],
                 train_config: TrainConfig, registry: MethodRegistry, report_dir: Optional[Path] = None,
                 encoder_spec: Optional[ConvEncoderSpec] = None, demos_per_task: Optional[int] = None,
                 workers: Optional[int] = None, events: Optional[TrainingEvents] = None):
        self.logger = logging.getLogger(__name__)
        self.eval_config = eval_config
        self.store = store
        self.suite = suite
        self.train_config = train_config
        self.registry = registry
        self.report_dir = Path(report_dir) if report_dir else None
        self.encoder_spec = encoder_spec
        self.demos_per_task = demos_per_task
        self.workers = workers or default_workers()
        self.events = events or TrainingEvents()
        self.report = EvalReport()
        self.audits: Dict[str, HoldoutResult] = {}
        if self.report_dir:
            self.events.subscribe(EventType.CELL_COMPLETED, self._persist_partial)

    @property
    def methods(self) -> List[Method]:
        enabled = self.registry.get_enabled_methods()
        return [m for m in enabled if m.value in self.eval_config.methods]

    async def _persist_partial(self, cell: CellResult) -> None:
        emit_report(self.report, self.report_dir)

    def _checkpoint_path(self, holdout: str, method: Method) -> Optional[Path]:
        if not self.report_dir:
            return None
        return self.report_dir / "checkpoints" / f"{holdout}_{method.value}.cpnp"

    def run_holdout(self, holdout: str) -> HoldoutResult:
        """Train every method without the holdout's demos, then evaluate each on the holdout"""
        split, task = leave_one_out_split(self.store.manifest, holdout, self.suite)
        audit = AccessAudit()
        trajectories = split.load(audit, limit_per_task=self.demos_per_task)
        held_out = self.store.manifest.paths(holdout)
        leaked = audit.touched(held_out)
        ensure(not leaked, f"holdout {holdout} demonstrations were read for training: {leaked[:3]}")

        cells = []
        for method in self.methods:
            method_config = self.registry.method_config(method)
            planner_config = self.registry.planner_config(method)
            try:
                trainer = Trainer(method_config, self.train_config, planner_config, self.encoder_spec)
                record = trainer.fit(trajectories)
            except NumericFault as e:
                self.logger.error(f"❌ {method.label} training faulted for holdout {holdout}: {e}")
                cells.append(failed_cell(method, holdout, self.eval_config.seeds, f"train:{e.op or 'numeric'}"))
                continue
            path = self._checkpoint_path(holdout, method)
            if path:
                save_checkpoint(path, trainer.model, method_config, self.train_config, trainer.planner_config,
                                trainer.encoder_spec, record=record, holdout=holdout)
            cells.append(evaluate(trainer.model, method, task, self.eval_config, trainer.planner_config))
        return HoldoutResult(holdout=holdout, cells=cells, audit_reads=len(audit.reads), leaked_reads=len(leaked))

    async def _run_job(self, semaphore: asyncio.Semaphore, executor: ThreadPoolExecutor, holdout: str) -> None:
        async with semaphore:
            loop = asyncio.get_running_loop()
            try:
                result = await loop.run_in_executor(executor, self.run_holdout, holdout)
            except Exception as e:
                self.logger.error(f"❌ Holdout {holdout} failed: {e}")
                for method in self.methods:
                    cell = failed_cell(method, holdout, self.eval_config.seeds, f"error:{type(e).__name__}")
                    self.report.add(cell)
                    await self.events.emit(EventType.CELL_COMPLETED, cell)
                return
            self.audits[holdout] = result
            for cell in result.cells:
                self.report.add(cell)
                await self.events.emit(EventType.CELL_COMPLETED, cell)

    async def run(self) -> EvalReport:
        for task_id in self.eval_config.tasks:
            ensure(task_id in self.suite, f"task {task_id!r} is not in the suite")
            cell = evaluate_random(self.suite[task_id], self.eval_config)
            self.report.add(cell)
            await self.events.emit(EventType.CELL_COMPLETED, cell)

        semaphore = asyncio.Semaphore(self.workers)
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            await asyncio.gather(*(self._run_job(semaphore, executor, task_id)
                                   for task_id in self.eval_config.tasks))
        self.logger.info(f"✅ Matrix complete: {len(self.report.cells)} cells")
        if self.report_dir:
            emit_report(self.report, self.report_dir)
        return self.report


async def run_matrix(eval_config: EvalConfig, store: TrajectoryStore, suite: Dict[str, TaskSpec],
                     train_config: TrainConfig, registry: Optional[MethodRegistry] = None,
                     report_dir: Optional[Path] = None, **kwargs) -> EvalReport:
    if registry is None:
        registry = MethodRegistry()
        await registry.load_config()
    runner = MatrixRunner(eval_config, store, suite, train_config, registry, report_dir, **kwargs)
    return await runner.run()
