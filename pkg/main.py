#!/usr/bin/env python3
"""
Planning-network imitation suite - command line entry point

    gen-demos    generate heuristic demonstrations into a dataset directory
    train        train one method with a task held out
    eval         evaluate a checkpoint on a task
    matrix       leave-one-task-out matrix over every enabled method
    extrapolate  vector-goal study on reach3d with z-offset targets
"""

import argparse
import asyncio
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from config import settings
from src.core.errors import ContractViolation, CPNError, DatasetIOError
from src.core.imitation import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from src.core.models import Method
from src.core.netblocks import ConvEncoderSpec
from src.data.datastore import AccessAudit, TrajectoryStore, leave_one_out_split
from src.harness.evaluation import EvalConfig, EvalReport, emit_report, evaluate
from src.harness.extrapolation import emit_study, extrapolation_study, parse_grid
from src.harness.matrix import MatrixRunner
from src.harness.method_registry import MethodRegistry
from src.sim.worlds import generate_demos, load_suite, load_suite_config, suite_hash
from src.utils.logger import setup_logging


def _switch(value: Optional[str]) -> Optional[bool]:
    if value is None:
        return None
    return str(value).lower() in ("on", "true", "1", "yes")


class CPNApp:
    def __init__(self, options: Dict[str, Any]):
        self.logger = setup_logging()
        self.options = options
        self.suite_config = None
        self.suite = None
        self.registry = None

    def option(self, key: str, default=None):
        value = self.options.get(key)
        return default if value is None else value

    async def initialize(self):
        """Load the task suite and the method registry"""
        self.suite_config = load_suite_config(self.option("suite"))
        self.suite = load_suite(self.option("suite"))
        self.registry = MethodRegistry()
        await self.registry.load_config()
        self.logger.info(f"Suite: {', '.join(self.suite)}; methods: "
                         f"{', '.join(m.label for m in self.registry.get_enabled_methods())}")

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_settings(settings, epochs=self.option("epochs"), seed=self.option("seed"),
                                         second_order=_switch(self.option("second_order")))

    def encoder_spec(self) -> ConvEncoderSpec:
        return ConvEncoderSpec.from_settings(settings)

    def open_store(self) -> TrajectoryStore:
        return TrajectoryStore.open(self.option("data", settings.DATA_DIR), suite_hash=suite_hash(self.suite_config))

    async def gen_demos(self):
        task_arg = self.option("task", "all")
        tasks = list(self.suite) if task_arg == "all" else [task_arg]
        n = int(self.option("n", settings.DEMOS_PER_TASK))
        seed = int(self.option("seed", 0))
        store = TrajectoryStore(self.option("out", settings.DATA_DIR), seed=seed, suite_hash=suite_hash(self.suite_config))
        task_seeds = np.random.SeedSequence(seed).spawn(len(self.suite))
        retries = settings.get('dataset.max_demo_retries', 20)
        for task_id in tasks:
            if task_id not in self.suite:
                raise ContractViolation(f"unknown task {task_id!r}")
            child = task_seeds[list(self.suite).index(task_id)]
            for demo in generate_demos(self.suite[task_id], n, int(child.generate_state(1)[0]), retries):
                store.add(demo)
        store.save_manifest()
        print(f"✓ Wrote {sum(store.manifest.counts.values())} demonstrations to {store.root}")

    async def train(self):
        method = Method.parse(self.option("method"))
        holdout = self.option("holdout")
        store = self.open_store()
        split, _ = leave_one_out_split(store.manifest, holdout, self.suite)
        audit = AccessAudit()
        trajectories = split.load(audit)
        train_config = self.train_config()
        method_config = self.registry.method_config(method, second_order=train_config.second_order)
        planner_config = self.registry.planner_config(method)
        trainer = Trainer(method_config, train_config, planner_config, self.encoder_spec())
        record = trainer.fit(trajectories)
        out = self.option("out", f"checkpoints/{holdout}_{method.value}.cpnp")
        save_checkpoint(out, trainer.model, method_config, train_config, trainer.planner_config,
                        trainer.encoder_spec, record=record, holdout=holdout, files_read=len(audit.reads))
        print(f"✓ {method.label} trained without {holdout}: final loss {record.epoch_losses[-1]:.6f} -> {out}")

    async def evaluate(self):
        checkpoint = load_checkpoint(self.option("ckpt"))
        task = self.suite[self.option("task")]
        eval_config = EvalConfig.from_settings(settings, trials=self.option("trials"), base_seed=self.option("seed"),
                                               methods=[checkpoint.method_config.method.value], tasks=[task.task_id])
        cell = evaluate(checkpoint.model, checkpoint.method_config.method, task, eval_config, checkpoint.planner_config)
        report = EvalReport()
        report.add(cell)
        emit_report(report, self.option("report", "reports/eval"))
        print(f"✓ {checkpoint.method_config.method.label} on {task.task_id}: {cell.formatted()}")

    async def matrix(self):
        store = self.open_store()
        eval_config = EvalConfig.from_settings(settings, trials=self.option("trials"),
                                               base_seed=self.option("seed"), tasks=self.option("tasks", list(self.suite)),
                                               methods=self.option("methods",
                                                                   [m.value for m in self.registry.get_enabled_methods()]))
        runner = MatrixRunner(eval_config, store, self.suite, self.train_config(), self.registry,
                              Path(self.option("report", "reports/matrix")), encoder_spec=self.encoder_spec(),
                              demos_per_task=self.option("n"), workers=self.option("workers"))
        report = await runner.run()
        print(f"✓ Matrix written to {runner.report_dir} ({len(report.cells)} cells)")

    async def extrapolate(self):
        store = self.open_store()
        count = int(self.option("n", settings.get('extrapolation.trajectories', 21)))
        trajectories = [store.read("reach3d", i) for i in range(min(count, store.manifest.counts.get("reach3d", 0)))]
        if len(trajectories) < count:
            raise DatasetIOError(f"dataset has {len(trajectories)} reach3d trajectories, need {count}")
        train_config = self.train_config()
        if self.option("epochs") is None:
            train_config.epochs = settings.get('extrapolation.epochs', 50)
        method_config = self.registry.method_config(Method.CPN, goal_mode="vector")
        report = extrapolation_study(trajectories, self.suite["reach3d"],
                                     parse_grid(self.option("grid", settings.get('extrapolation.grid'))),
                                     train_config, method_config, self.encoder_spec(),
                                     z_offsets=settings.get('extrapolation.z_offsets', [-0.15, 0.15]),
                                     test_goals=settings.get('extrapolation.test_goals', 10))
        emit_study(report, self.option("report", "reports/extrapolation"))
        print(f"✓ Selected H={report.selected[0]} U={report.selected[1]}: "
              f"deviation reduced by {100 * report.reduction:.1f}% versus the zero plan")

    async def run(self, command: str):
        await self.initialize()
        handlers = {"gen-demos": self.gen_demos, "train": self.train, "eval": self.evaluate,
                    "matrix": self.matrix, "extrapolate": self.extrapolate}
        await handlers[command]()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Planning-network imitation suite")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file whose keys mirror the flags; flags override it")
        p.add_argument("--suite", help="task suite configuration file")
        p.add_argument("--seed", type=int)
        return p

    p = command("gen-demos", "generate heuristic demonstrations")
    p.add_argument("--task")
    p.add_argument("--n", type=int)
    p.add_argument("--out")

    p = command("train", "train one method with a holdout task")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--holdout")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--second-order", dest="second_order", choices=["on", "off"])
    p.add_argument("--out")

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--task")
    p.add_argument("--trials", type=int)
    p.add_argument("--report")

    p = command("matrix", "leave-one-task-out evaluation matrix")
    p.add_argument("--data")
    p.add_argument("--report")
    p.add_argument("--epochs", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--n", type=int, help="demonstrations per training task")
    p.add_argument("--workers", type=int)
    p.add_argument("--second-order", dest="second_order", choices=["on", "off"])

    p = command("extrapolate", "vector-goal extrapolation study")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--report")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int, help="number of reach3d training trajectories")
    return parser


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Config file values first, then every flag given on the command line"""
    options: Dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                options.update({key.replace("-", "_"): value for key, value in json.load(f).items()})
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetIOError(f"cannot read config file {args.config}: {e}")
    options.update({key: value for key, value in vars(args).items() if value is not None})
    return options


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; exit codes 0 ok, 2 contract violation, 3 numeric fault, 4 I/O, 1 other"""
    args = build_parser().parse_args(argv)
    try:
        app = CPNApp(resolve_options(args))
        asyncio.run(app.run(args.command))
        return 0
    except KeyboardInterrupt:
        print("\nStopped by user.")
        return 1
    except CPNError as e:
        logging.getLogger("CPN").error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logging.getLogger("CPN").error(f"Fatal error: {e}")
        print(f"Check {settings.LOG_FILE} for details")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
