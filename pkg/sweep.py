#!/usr/bin/env python3
"""
Experiment sweep: fine reference per Forchheimer scale C, NLMC per (coarse grid, S, C),
per-run error series and one summary table per C
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from coarse_solver import CoarseSolver
from config import ConfigError
from fine_solver import FineRun, FineSolver
from logger import log_run_event, run_log
from metrics import (ErrorRecord, error_series, percent_frame, read_error_series, summary_frame, write_error_series,
                     write_summary)
from nlmc_basis import BasisBuilder, BasisSet
from solution_io import write_diagnostics, write_snapshots
from testcase import CaseSetup

logger = logging.getLogger(__name__)

DEFAULT_LAYERS = [3, 4, 5, 6, 7]
DEFAULT_FORCHHEIMER_SCALES = [0.0, 10.0, 1e2, 1e3, 1e4]
ERRORS_FILE = 'errors.csv'


@dataclass
class SweepCell:
    """Result of one NLMC run in the sweep"""
    grid: str
    layers: int
    forchheimer_c: float
    series: List[ErrorRecord]
    skipped: bool = False
    mean_step_seconds: float = float('nan')

    @property
    def final(self) -> ErrorRecord:
        return self.series[-1]

    @property
    def run_id(self) -> str:
        return f"{self.grid}/S{self.layers}/C{self.forchheimer_c:g}"


@dataclass
class SweepResult:
    layers: List[int]
    forchheimer_scales: List[float]
    grids: List[str]
    cells: List[SweepCell] = field(default_factory=list)
    summaries: Dict[float, pd.DataFrame] = field(default_factory=dict)
    fine_runs: int = 0
    multiscale_runs: int = 0

    def final_errors(self, forchheimer_c: float) -> Dict[Tuple[str, int], ErrorRecord]:
        return {(c.grid, c.layers): c.final for c in self.cells if c.forchheimer_c == forchheimer_c}

    def cell(self, grid: str, layers: int, forchheimer_c: float) -> SweepCell:
        for c in self.cells:
            if (c.grid, c.layers, c.forchheimer_c) == (grid, layers, forchheimer_c):
                return c
        raise KeyError(f"No sweep cell {grid}/S{layers}/C{forchheimer_c:g}")


class ExperimentSweep:
    """Resumable (grid, S, C) matrix; bases are built once per (grid, S) and reused for every C"""

    def __init__(self, setup: CaseSetup, output_dir=None, force: bool = False,
                 workers: Optional[int] = None):
        self.setup = setup
        self.output_dir = Path(output_dir or setup.run_config.output_dir)
        self.force = force
        self.workers = workers or setup.run_config.workers
        self._bases: Dict[Tuple[str, int], BasisSet] = {}
        self._builders: Dict[str, BasisBuilder] = {}

    def scale_dir(self, forchheimer_c: float) -> Path:
        return self.output_dir / f"C_{forchheimer_c:g}"

    def cell_dir(self, forchheimer_c: float, grid: str, layers: int) -> Path:
        return self.scale_dir(forchheimer_c) / grid / f"S{layers}"

    def summary_path(self, forchheimer_c: float) -> Path:
        return self.output_dir / f"summary_C_{forchheimer_c:g}.csv"

    def percent_path(self, forchheimer_c: float) -> Path:
        return self.output_dir / f"summary_C_{forchheimer_c:g}_pct.csv"

    def _is_done(self, forchheimer_c: float, grid: str, layers: int) -> bool:
        return not self.force and (self.cell_dir(forchheimer_c, grid, layers) / ERRORS_FILE).is_file()

    def basis_set(self, grid: str, layers: int) -> BasisSet:
        """Offline stage; independent of C because local problems use the Darcy operator"""
        key = (grid, layers)
        if key not in self._bases:
            if grid not in self._builders:
                self._builders[grid] = BasisBuilder(self.setup.mesh, self.setup.coarse_grids[grid],
                                                    self.setup.medium(0.0), self.setup.fluid)
            self._bases[key] = self._builders[grid].build(layers, self.workers)
        return self._bases[key]

    def run_fine(self, forchheimer_c: float) -> FineRun:
        rc = self.setup.run_config
        run_id = f"fine/C{forchheimer_c:g}"
        directory = self.scale_dir(forchheimer_c) / 'fine'
        with run_log(directory):
            log_run_event('RUN_STARTED', run_id, {'forchheimer_c': forchheimer_c})
            try:
                solver = FineSolver(self.setup.mesh, self.setup.medium(forchheimer_c), self.setup.fluid,
                                    self.setup.sources)
                run = solver.run(rc.initial_pressure, self.setup.time_grid, keep_history=True)
            except Exception as e:
                log_run_event('RUN_FAILED', run_id, {'error': str(e)})
                raise

        write_snapshots({n: run.history[n] for n in rc.resolved_snapshot_layers()}, self.setup.mesh, directory)
        write_diagnostics(run.diagnostics, directory / 'diagnostics.csv')
        log_run_event('RUN_COMPLETED', run_id, {'max_mass_defect': run.max_mass_defect,
                                                'mean_step_seconds': run.mean_step_seconds})
        return run

    def run_cell(self, forchheimer_c: float, grid: str, layers: int, fine_run: FineRun) -> SweepCell:
        rc = self.setup.run_config
        run_id = f"{grid}/S{layers}/C{forchheimer_c:g}"
        directory = self.cell_dir(forchheimer_c, grid, layers)
        with run_log(directory):
            log_run_event('RUN_STARTED', run_id, {'grid': grid, 'layers': layers, 'forchheimer_c': forchheimer_c})
            try:
                solver = CoarseSolver(self.setup.mesh, self.setup.medium(forchheimer_c), self.setup.fluid,
                                      self.setup.sources, self.basis_set(grid, layers))
                p_bar0 = np.full(solver.basis_set.n_coarse_dofs, rc.initial_pressure)
                ms_run = solver.run_ms(self.setup.time_grid, p_bar0, keep_history=True)
                series = error_series(fine_run.history, ms_run.history, self.setup.coarse_grids[grid],
                                      include_fractures=rc.include_fractures_in_error)
            except Exception as e:
                log_run_event('RUN_FAILED', run_id, {'error': str(e)})
                raise

        write_snapshots({n: ms_run.history[n] for n in rc.resolved_snapshot_layers()}, self.setup.mesh, directory,
                        name='p_ms')
        write_diagnostics(ms_run.diagnostics, directory / 'diagnostics.csv')
        write_error_series(series, directory / ERRORS_FILE)

        cell = SweepCell(grid, layers, forchheimer_c, series, mean_step_seconds=ms_run.mean_step_seconds)
        log_run_event('RUN_COMPLETED', run_id, {'e_l2': cell.final.e_l2, 'ebar_l2': cell.final.ebar_l2,
                                                'max_mass_defect': ms_run.max_fine_mass_defect,
                                                'mean_step_seconds': ms_run.mean_step_seconds})
        return cell

    def _resume_cell(self, forchheimer_c: float, grid: str, layers: int) -> SweepCell:
        cell = SweepCell(grid, layers, forchheimer_c,
                         read_error_series(self.cell_dir(forchheimer_c, grid, layers) / ERRORS_FILE),
                         skipped=True)
        log_run_event('RUN_SKIPPED', cell.run_id, {'reason': 'outputs exist'})
        return cell

    def run_sweep(self, layers: Sequence[int] = None,
                  forchheimer_scales: Sequence[float] = None) -> SweepResult:
        layers = list(DEFAULT_LAYERS if layers is None else layers)
        scales = list(DEFAULT_FORCHHEIMER_SCALES if forchheimer_scales is None else forchheimer_scales)
        if not layers:
            raise ConfigError("Sweep needs at least one oversampling layer count")
        if not scales:
            raise ConfigError("Sweep needs at least one Forchheimer scale")
        if any(s < 1 for s in layers):
            raise ConfigError(f"Oversampling layer counts must be at least 1, got {layers}")
        if not all(0 <= c < math.inf for c in scales):
            raise ConfigError(f"Forchheimer scales must be finite and non-negative, got {scales}")

        grids = list(self.setup.coarse_grids)
        result = SweepResult(layers, scales, grids)
        logger.info(f"Sweep over {len(grids)} grids x S={layers} x C={scales} into {self.output_dir}")

        for forchheimer_c in scales:
            pending = [(g, s) for g in grids for s in layers if not self._is_done(forchheimer_c, g, s)]
            fine_run = None
            if pending:
                fine_run = self.run_fine(forchheimer_c)
                result.fine_runs += 1

            for grid in grids:
                for s in layers:
                    if (grid, s) in pending:
                        result.cells.append(self.run_cell(forchheimer_c, grid, s, fine_run))
                        result.multiscale_runs += 1
                    else:
                        result.cells.append(self._resume_cell(forchheimer_c, grid, s))

            summary = summary_frame(result.final_errors(forchheimer_c), layers, grids)
            write_summary(summary, self.summary_path(forchheimer_c))
            write_summary(percent_frame(summary), self.percent_path(forchheimer_c))
            result.summaries[forchheimer_c] = summary

        logger.info(f"Sweep finished: {result.fine_runs} fine runs, {result.multiscale_runs} multiscale runs, "
                    f"{len(result.cells) - result.multiscale_runs} resumed")
        return result
