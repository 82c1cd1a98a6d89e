"""
Fine-grid reference solver: backward Euler in time, Forchheimer factors lagged one layer
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from fvm_assembly import (FaceVelocities, FluidParams, MediumParams, SourceTerms,
                          SystemAssembler, SystemBlocks)
from geometry import FracturedMesh
from sparse_linalg import Factorization, LinearSolveReport, match_total, warn_backward_accepted

logger = logging.getLogger(__name__)

MASS_BALANCE_TOL = 1e-10
# multiples of the tolerance at which a step counts as failed
MASS_FAILURE_FACTOR = 1e6


class MassBalanceError(ValueError):
    """Raised when a step violates discrete conservation by orders of magnitude"""


@dataclass
class PressureState:
    """p at time layer n, stacked as (p_m, p_f)"""
    layer: int
    time: float
    values: np.ndarray
    n_matrix: int

    @property
    def matrix(self) -> np.ndarray:
        return self.values[:self.n_matrix]

    @property
    def fracture(self) -> np.ndarray:
        return self.values[self.n_matrix:]

    def validate(self, n_dofs: int) -> None:
        if self.values.shape != (n_dofs,):
            raise ValueError(f"Pressure vector has shape {self.values.shape}, expected ({n_dofs},)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"Pressure at layer {self.layer} has non-finite entries")


@dataclass(frozen=True)
class TimeGrid:
    tau: float
    n_steps: int

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"Time step must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ValueError(f"Number of time layers must be at least 1, got {self.n_steps}")

    @property
    def t_max(self) -> float:
        return self.n_steps * self.tau

    def time(self, layer: int) -> float:
        return layer * self.tau


@dataclass
class StepDiagnostics:
    """Per-layer record: conservation defect, solve report and wall times"""
    layer: int
    mass_defect: float
    mass_tolerance: float
    mass_shift: float
    solve: LinearSolveReport
    assembly_seconds: float
    solve_seconds: float

    @property
    def mass_balanced(self) -> bool:
        return abs(self.mass_defect) <= self.mass_tolerance


def mass_tolerance(blocks: SystemBlocks) -> float:
    """1e-10 * max(1, |1^T F|)"""
    return MASS_BALANCE_TOL * max(1.0, abs(float(np.sum(blocks.F))))


def check_mass_balance(layer: int, defect: float, tolerance: float, context: str = 'Layer') -> None:
    """Warn on a defect above tolerance, raise MassBalanceError far above it"""
    if not abs(defect) <= MASS_FAILURE_FACTOR * tolerance:
        raise MassBalanceError(f"{context} {layer}: mass balance defect {defect:.3e} exceeds "
                               f"tolerance {tolerance:.1e} by more than {MASS_FAILURE_FACTOR:.0e}x")
    if abs(defect) > tolerance:
        logger.warning(f"{context} {layer}: mass balance defect {defect:.3e} exceeds {tolerance:.1e}")


@dataclass
class FineRun:
    """Output of a fine run: requested snapshots, final state and per-layer diagnostics"""
    time_grid: TimeGrid
    final: PressureState
    snapshots: Dict[int, PressureState] = field(default_factory=dict)
    diagnostics: List[StepDiagnostics] = field(default_factory=list)
    history: List[np.ndarray] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def max_mass_defect(self) -> float:
        return max((abs(d.mass_defect) for d in self.diagnostics), default=0.0)

    @property
    def mean_solve_seconds(self) -> float:
        return float(np.mean([d.solve_seconds for d in self.diagnostics]))

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean([d.assembly_seconds + d.solve_seconds for d in self.diagnostics]))

    def layer_values(self, layer: int) -> np.ndarray:
        """Pressure at a layer, from the full history when kept, otherwise from the snapshots"""
        if self.history:
            return self.history[layer]
        if layer in self.snapshots:
            return self.snapshots[layer].values
        raise KeyError(f"Layer {layer} was neither snapshotted nor kept in history")


class FineSolver:
    """Time stepper for M (p^{n+1} - p^n)/tau + (A^n + Q^n) p^{n+1} = F"""

    def __init__(self, mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                 sources: SourceTerms, nonlinear: bool = True):
        self.mesh = mesh
        self.assembler = SystemAssembler(mesh, medium, fluid, sources, nonlinear=nonlinear)
        self.last_step: Optional[StepDiagnostics] = None
        self._linear_factorization: Optional[Tuple[float, Factorization]] = None

    @property
    def nonlinear(self) -> bool:
        return self.assembler.nonlinear

    def _factorize(self, blocks: SystemBlocks, tau: float) -> Factorization:
        # entries span storage terms near 1e-9 up to fracture transmissibilities near 1e10
        if self.nonlinear:
            return Factorization(blocks.system_matrix(tau), equilibrate=True)
        # Darcy blocks never change, so one factorization serves every layer
        if self._linear_factorization is None or self._linear_factorization[0] != tau:
            self._linear_factorization = (tau, Factorization(blocks.system_matrix(tau), equilibrate=True))
        return self._linear_factorization[1]

    def step(self, state: PressureState, velocities: FaceVelocities,
             tau: float) -> Tuple[PressureState, FaceVelocities]:
        """Advance one layer; velocities of the new state use the factors of ``velocities``"""
        if tau <= 0:
            raise ValueError(f"Time step must be positive, got {tau}")
        state.validate(self.mesh.n_dofs)

        started = time.perf_counter()
        blocks = self.assembler.blocks(velocities)
        assembled = time.perf_counter()
        p_new, report = self._factorize(blocks, tau).solve(blocks.rhs(state.values, tau))
        # constants span the kernel of A + Q, so the stored mass fixes their component exactly
        p_new, shift = match_total(p_new, blocks.storage(), np.ones_like(p_new),
                                   blocks.conserved_total(state.values, tau))
        solved = time.perf_counter()

        new_state = PressureState(state.layer + 1, state.time + tau, p_new, self.mesh.n_matrix)
        new_velocities = self.assembler.velocities(p_new, velocities)

        self.last_step = StepDiagnostics(
            layer=new_state.layer,
            mass_defect=blocks.mass_balance_defect(p_new, state.values, tau),
            mass_tolerance=mass_tolerance(blocks),
            mass_shift=shift,
            solve=report,
            assembly_seconds=assembled - started,
            solve_seconds=solved - assembled,
        )
        check_mass_balance(new_state.layer, self.last_step.mass_defect, self.last_step.mass_tolerance)
        logger.debug(f"Layer {new_state.layer}: defect {self.last_step.mass_defect:.2e}, shift {shift:.2e}, "
                     f"residual {report.relative_residual:.2e}, max |u| {new_velocities.max_magnitude():.3e}")
        return new_state, new_velocities

    def run(self, p0, time_grid: TimeGrid, snapshot_layers: Iterable[int] = (),
            keep_history: bool = False) -> FineRun:
        """Run all layers from p0 with zero initial velocities (first layer is pure Darcy)"""
        p0 = np.broadcast_to(np.asarray(p0, dtype=float), (self.mesh.n_dofs,)).copy()
        state = PressureState(0, 0.0, p0, self.mesh.n_matrix)
        state.validate(self.mesh.n_dofs)
        velocities = self.assembler.zero_velocities()
        wanted = set(snapshot_layers)

        run = FineRun(time_grid=time_grid, final=state)
        if 0 in wanted:
            run.snapshots[0] = state
        if keep_history:
            run.history.append(state.values)

        started = time.perf_counter()
        logger.info(f"Fine run: {self.mesh.n_dofs} DOFs, {time_grid.n_steps} layers, tau={time_grid.tau}, "
                    f"nonlinear={self.nonlinear}")
        for _ in range(time_grid.n_steps):
            state, velocities = self.step(state, velocities, time_grid.tau)
            run.diagnostics.append(self.last_step)
            if state.layer in wanted:
                run.snapshots[state.layer] = state
            if keep_history:
                run.history.append(state.values)

        run.final = state
        run.wall_seconds = time.perf_counter() - started
        warn_backward_accepted([d.solve for d in run.diagnostics], "Fine run")
        logger.info(f"Fine run finished in {run.wall_seconds:.2f}s, max mass defect {run.max_mass_defect:.2e}")
        return run
