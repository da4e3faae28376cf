"""Command registry behind the CLI: one handler per experiment artifact."""

import asyncio
from typing import Any, Dict, List, Optional

import numpy as np
import structlog

from .beampattern import pattern_frame
from .config import ConfigManager, RunConfig
from .error_handler import ErrorHandler
from .fim import crb_frame, crb_matrices
from .pipeline import (
    PipelineContext,
    allocate_fixed,
    alternate,
    crb_heatmap,
    ici_frame,
    prepare_context,
    receiver_count_sweep,
    select_for,
    tradeoff_frame,
    tradeoff_sweep,
)
from .utils import format_bound, write_csv

logger = structlog.get_logger(__name__)


class DfrcCommands:
    """All experiment commands, dispatched by name."""

    def __init__(self, config_manager: ConfigManager, error_handler: ErrorHandler):
        self.config_manager = config_manager
        self.error_handler = error_handler
        self._context: Optional[PipelineContext] = None
        self._commands_registry = self._register_all_commands()

    def _register_all_commands(self) -> Dict[str, Dict[str, Any]]:
        """Register every command with its handler and artifact name."""
        commands = {}
        commands.update(self._register_design_commands())
        commands.update(self._register_optimization_commands())
        commands.update(self._register_experiment_commands())
        return commands

    def _register_design_commands(self) -> Dict[str, Dict[str, Any]]:
        return {
            "beampattern": {
                "description": "Design detection covariances and export their beampatterns",
                "handler": self.beampattern,
                "artifact": "beampattern.csv",
            },
            "verify-ici": {
                "description": "Noise-free demodulation residuals for CP-extension and random symbols",
                "handler": self.verify_ici,
                "artifact": "ici_residual.csv",
            },
            "crb": {
                "description": "CRBs of an equal-power round-robin detection frame",
                "handler": self.crb,
                "artifact": "crb.csv",
            },
        }

    def _register_optimization_commands(self) -> Dict[str, Dict[str, Any]]:
        return {
            "allocate": {
                "description": "Subcarrier and power allocation for the first receiver subset",
                "handler": self.allocate,
                "artifact": "allocation.csv",
            },
            "select": {
                "description": "Receiver selection by bisection for a fixed allocation",
                "handler": self.select,
                "artifact": "selection.csv",
            },
            "alternate": {
                "description": "Alternate allocation and receiver selection",
                "handler": self.alternate,
                "artifact": "alternate.csv",
            },
        }

    def _register_experiment_commands(self) -> Dict[str, Dict[str, Any]]:
        return {
            "tradeoff": {
                "description": "Rate against CRB bound over the configured sweep",
                "handler": self.tradeoff,
                "artifact": "tradeoff.csv",
            },
            "heatmap": {
                "description": "CRB around each target for the alternated allocation",
                "handler": self.heatmap,
                "artifact": "heatmap.csv",
            },
            "receivers": {
                "description": "Best achievable bound for every number of selected receivers",
                "handler": self.receivers,
                "artifact": "receivers.csv",
            },
        }

    def list_commands(self) -> List[str]:
        return list(self._commands_registry)

    def describe(self, name: str) -> str:
        return self._commands_registry[name]["description"]

    async def execute_command(self, name: str, arguments: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Execute a command by name."""
        if name not in self._commands_registry:
            raise ValueError(f"Unknown command: {name}")
        handler = self._commands_registry[name]["handler"]
        logger.info("Executing command", command=name)
        return await handler(**(arguments or {}))

    @property
    def config(self) -> RunConfig:
        return self.config_manager.config

    def _output(self, name: str) -> str:
        return self._commands_registry[name]["artifact"]

    async def _get_context(self) -> PipelineContext:
        if self._context is None:
            scenario = self.config_manager.build_scenario()
            self._context = await asyncio.to_thread(prepare_context, self.config, scenario)
        return self._context

    def _write(self, name: str, frame) -> str:
        return str(write_csv(frame, self.config.experiment.output_dir, self._output(name)))

    # Design commands

    async def beampattern(self) -> Dict[str, Any]:
        context = await self._get_context()
        frame = pattern_frame(
            context.scenario, context.covariances, self.config.solver.pattern_samples
        )
        return {
            "success": True,
            "path": self._write("beampattern", frame),
            "converged": bool(np.all(context.covariances.converged)),
            "rows": len(frame),
        }

    async def verify_ici(self) -> Dict[str, Any]:
        context = await self._get_context()
        rng = np.random.default_rng(self.config.experiment.seed)
        frame = await asyncio.to_thread(ici_frame, context, rng)
        worst = frame.groupby("mode")["relative"].max()
        return {
            "success": True,
            "path": self._write("verify-ici", frame),
            "max_relative": {mode: float(value) for mode, value in worst.items()},
        }

    async def crb(self) -> Dict[str, Any]:
        context = await self._get_context()
        crbs = crb_matrices(
            context.blocks, context.baseline_pbar_r, np.ones(context.scenario.num_receivers)
        )
        frame = crb_frame(crbs)
        return {
            "success": True,
            "path": self._write("crb", frame),
            "worst_location": max(pair.worst_location for pair in crbs),
            "worst_velocity": max(pair.worst_velocity for pair in crbs),
        }

    # Optimization commands

    async def allocate(self) -> Dict[str, Any]:
        context = await self._get_context()
        result = await asyncio.to_thread(allocate_fixed, context)
        return {
            "success": True,
            "path": self._write("allocate", tradeoff_frame([result.point])),
            "rate_bits_s": result.point.rate_bits_per_s,
            "mask": result.point.mask,
            "eta_d": format_bound(context.eta_d),
            "eta_v": format_bound(context.eta_v),
        }

    async def select(self) -> Dict[str, Any]:
        context = await self._get_context()
        result = await asyncio.to_thread(allocate_fixed, context)
        frame = select_for(context, result.allocation)
        row = frame.iloc[0]
        return {
            "success": True,
            "path": self._write("select", frame),
            "eta_star": float(row["eta_star"]),
            "mask": row["mask_bits"],
        }

    async def alternate(self) -> Dict[str, Any]:
        context = await self._get_context()
        result = await asyncio.to_thread(alternate, context)
        return {
            "success": True,
            "path": self._write("alternate", tradeoff_frame([result.point])),
            "rate_bits_s": result.point.rate_bits_per_s,
            "mask": result.point.mask,
            "rounds": result.rounds,
        }

    # Experiment commands

    async def tradeoff(self) -> Dict[str, Any]:
        context = await self._get_context()
        points = await tradeoff_sweep(context)
        failed = [
            point.eta_in
            for point in points
            if point.status in ("infeasible", "numerical_failure")
        ]
        return {
            "success": True,
            "path": self._write("tradeoff", tradeoff_frame(points)),
            "points": len(points),
            "failed": failed,
        }

    async def heatmap(self) -> Dict[str, Any]:
        context = await self._get_context()
        result = await asyncio.to_thread(alternate, context)
        frame = await asyncio.to_thread(
            crb_heatmap, context, result.allocation, result.mask.s
        )
        return {
            "success": True,
            "path": self._write("heatmap", frame),
            "rows": len(frame),
            "singular": int(frame["singular"].sum()),
        }

    async def receivers(self) -> Dict[str, Any]:
        context = await self._get_context()
        result = await asyncio.to_thread(allocate_fixed, context)
        frame = receiver_count_sweep(context, result.allocation)
        return {
            "success": True,
            "path": self._write("receivers", frame),
            "eta_star": [float(v) for v in frame["eta_star"]],
        }
