"""
NLMC coarse time stepping: fine blocks from the downscaled previous layer,
Galerkin projection with R, a small coarse solve, and downscaling p_ms = R^T p_bar.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from fine_solver import TimeGrid, check_mass_balance, mass_tolerance
from fvm_assembly import FaceVelocities, FluidParams, MediumParams, SourceTerms, SystemAssembler, SystemBlocks
from geometry import FracturedMesh
from nlmc_basis import BasisSet
from sparse_linalg import (Factorization, LinearSolveError, LinearSolveReport, match_total, triple_product,
                           warn_backward_accepted)

logger = logging.getLogger(__name__)


@dataclass
class CoarseBlocks:
    """M_bar = R M R^T, A_bar = R A R^T, Q_bar = R Q R^T, F_bar = R F"""
    M: sp.csr_matrix
    A: sp.csr_matrix
    Q: sp.csr_matrix
    F: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.M.shape[0]

    def system_matrix(self, tau: float) -> sp.csr_matrix:
        return sp.csr_matrix(self.M / tau + self.A + self.Q)

    def rhs(self, p_prev: np.ndarray, tau: float) -> np.ndarray:
        return self.F + self.M @ p_prev / tau

    def mass_balance_defect(self, p_new: np.ndarray, p_old: np.ndarray, tau: float) -> float:
        return float(np.sum(self.M @ (p_new - p_old)) / tau - np.sum(self.F))


def project_blocks(R: sp.spmatrix, blocks: SystemBlocks) -> CoarseBlocks:
    """Galerkin projection of the fine blocks"""
    if R.shape[1] != blocks.n_dofs:
        raise LinearSolveError(f"Projection has {R.shape[1]} columns, fine system has {blocks.n_dofs} DOFs")
    if blocks.F.shape != (blocks.n_dofs,):
        raise LinearSolveError(f"Source vector has shape {blocks.F.shape}, expected ({blocks.n_dofs},)")
    return CoarseBlocks(
        M=triple_product(R, blocks.M, symmetrize=True),
        A=triple_product(R, blocks.A, symmetrize=True),
        Q=triple_product(R, blocks.Q, symmetrize=True),
        F=np.asarray(R @ blocks.F),
    )


@dataclass
class CoarseState:
    """p_bar at layer n with the downscaled field and the velocities derived from it"""
    layer: int
    time: float
    coarse: np.ndarray
    fine: np.ndarray
    velocities: FaceVelocities


@dataclass
class CoarseStepDiagnostics:
    """Defect of the projected balance (reported only) and of the downscaled field (checked)"""
    layer: int
    coarse_mass_defect: float
    fine_mass_defect: float
    mass_tolerance: float
    mass_shift: float
    solve: LinearSolveReport
    assembly_seconds: float
    solve_seconds: float

    @property
    def mass_balanced(self) -> bool:
        return abs(self.fine_mass_defect) <= self.mass_tolerance


@dataclass
class MultiscaleRun:
    time_grid: TimeGrid
    layers: int
    final: CoarseState
    snapshots: Dict[int, CoarseState] = field(default_factory=dict)
    diagnostics: List[CoarseStepDiagnostics] = field(default_factory=list)
    history: List[np.ndarray] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def mean_solve_seconds(self) -> float:
        return float(np.mean([d.solve_seconds for d in self.diagnostics]))

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean([d.assembly_seconds + d.solve_seconds for d in self.diagnostics]))

    @property
    def max_coarse_mass_defect(self) -> float:
        return max((abs(d.coarse_mass_defect) for d in self.diagnostics), default=0.0)

    @property
    def max_fine_mass_defect(self) -> float:
        return max((abs(d.fine_mass_defect) for d in self.diagnostics), default=0.0)

    def layer_values(self, layer: int) -> np.ndarray:
        """Downscaled pressure p_ms at a layer"""
        if self.history:
            return self.history[layer]
        if layer in self.snapshots:
            return self.snapshots[layer].fine
        raise KeyError(f"Layer {layer} was neither snapshotted nor kept in history")


class CoarseSolver:
    """Time stepper for M_bar (p_bar^{n+1} - p_bar^n)/tau + (A_bar^n + Q_bar^n) p_bar^{n+1} = F_bar.

    R^T 1 is only close to 1, so the projected operator has no exact constant mode and the
    coarse balance alone leaves the mean pressure to a spurious small eigenvalue. Each step
    shifts p_bar along v = M_bar^{-1} R M 1, the coarse field closest to a uniform pressure,
    until the downscaled field meets 1^T M p_ms^{n+1} = 1^T M p_ms^n + tau 1^T F.
    """

    def __init__(self, mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                 sources: SourceTerms, basis_set: BasisSet, nonlinear: bool = True):
        if basis_set.n_fine_dofs != mesh.n_dofs:
            raise LinearSolveError(f"Basis set spans {basis_set.n_fine_dofs} fine DOFs, mesh has {mesh.n_dofs}")
        self.mesh = mesh
        self.basis_set = basis_set
        self.R = basis_set.projection
        self.assembler = SystemAssembler(mesh, medium, fluid, sources, nonlinear=nonlinear)
        self.last_step: Optional[CoarseStepDiagnostics] = None
        self._linear_blocks: Optional[Tuple[SystemBlocks, CoarseBlocks]] = None
        self._linear_factorization: Optional[Tuple[float, Factorization]] = None
        self._uniform: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def nonlinear(self) -> bool:
        return self.assembler.nonlinear

    def blocks(self, velocities: FaceVelocities) -> Tuple[SystemBlocks, CoarseBlocks]:
        """Fine blocks and their projection; projected once when the factors are all 1"""
        if self.nonlinear:
            fine = self.assembler.blocks(velocities)
            return fine, project_blocks(self.R, fine)
        if self._linear_blocks is None:
            fine = self.assembler.linear_blocks()
            self._linear_blocks = (fine, project_blocks(self.R, fine))
        return self._linear_blocks

    def _factorize(self, coarse: CoarseBlocks, tau: float) -> Factorization:
        if self.nonlinear:
            return Factorization(coarse.system_matrix(tau), equilibrate=True)
        if self._linear_factorization is None or self._linear_factorization[0] != tau:
            self._linear_factorization = (tau, Factorization(coarse.system_matrix(tau), equilibrate=True))
        return self._linear_factorization[1]

    def uniform_shift(self, fine: SystemBlocks, coarse: CoarseBlocks) -> Tuple[np.ndarray, np.ndarray]:
        """Weights R M 1 of the downscaled stored mass and the direction v = M_bar^{-1} R M 1.

        M does not depend on velocities, so both are computed once.
        """
        if self._uniform is None:
            weights = np.asarray(self.R @ fine.storage())
            direction, _ = Factorization(coarse.M).solve(weights)
            self._uniform = (weights, direction)
        return self._uniform

    def initial_state(self, p_bar0=0.0) -> CoarseState:
        coarse = np.broadcast_to(np.asarray(p_bar0, dtype=float), (self.basis_set.n_coarse_dofs,)).copy()
        return CoarseState(0, 0.0, coarse, self.basis_set.downscale(coarse), self.assembler.zero_velocities())

    def coarse_step(self, state: CoarseState, tau: float) -> CoarseState:
        """Advance one layer with factors lagged from the cached downscaled field"""
        if tau <= 0:
            raise ValueError(f"Time step must be positive, got {tau}")
        started = time.perf_counter()
        fine_blocks, coarse_blocks = self.blocks(state.velocities)
        assembled = time.perf_counter()
        p_bar, report = self._factorize(coarse_blocks, tau).solve(coarse_blocks.rhs(state.coarse, tau))
        weights, direction = self.uniform_shift(fine_blocks, coarse_blocks)
        p_bar, shift = match_total(p_bar, weights, direction, fine_blocks.conserved_total(state.fine, tau))
        solved = time.perf_counter()

        p_ms = self.basis_set.downscale(p_bar)
        velocities = self.assembler.velocities(p_ms, state.velocities)
        new_state = CoarseState(state.layer + 1, state.time + tau, p_bar, p_ms, velocities)

        self.last_step = CoarseStepDiagnostics(
            layer=new_state.layer,
            coarse_mass_defect=coarse_blocks.mass_balance_defect(p_bar, state.coarse, tau),
            fine_mass_defect=fine_blocks.mass_balance_defect(p_ms, state.fine, tau),
            mass_tolerance=mass_tolerance(fine_blocks),
            mass_shift=shift,
            solve=report,
            assembly_seconds=assembled - started,
            solve_seconds=solved - assembled,
        )
        check_mass_balance(new_state.layer, self.last_step.fine_mass_defect, self.last_step.mass_tolerance,
                           'Coarse layer')
        logger.debug(f"Coarse layer {new_state.layer}: coarse defect {self.last_step.coarse_mass_defect:.2e}, "
                     f"downscaled defect {self.last_step.fine_mass_defect:.2e}, shift {shift:.2e}, "
                     f"residual {report.relative_residual:.2e}")
        return new_state

    def run_ms(self, time_grid: TimeGrid, p_bar0=0.0, snapshot_layers: Iterable[int] = (),
               keep_history: bool = False) -> MultiscaleRun:
        state = self.initial_state(p_bar0)
        wanted = set(snapshot_layers)
        run = MultiscaleRun(time_grid=time_grid, layers=self.basis_set.layers, final=state)
        if 0 in wanted:
            run.snapshots[0] = state
        if keep_history:
            run.history.append(state.fine)

        started = time.perf_counter()
        logger.info(f"Multiscale run: {self.basis_set.n_coarse_dofs} coarse DOFs "
                    f"({self.basis_set.coarse_grid.label}, S={self.basis_set.layers}), "
                    f"{time_grid.n_steps} layers, nonlinear={self.nonlinear}")
        for _ in range(time_grid.n_steps):
            state = self.coarse_step(state, time_grid.tau)
            run.diagnostics.append(self.last_step)
            if state.layer in wanted:
                run.snapshots[state.layer] = state
            if keep_history:
                run.history.append(state.fine)

        run.final = state
        run.wall_seconds = time.perf_counter() - started
        warn_backward_accepted([d.solve for d in run.diagnostics], "Multiscale run")
        logger.info(f"Multiscale run finished in {run.wall_seconds:.2f}s, "
                    f"max downscaled mass defect {run.max_fine_mass_defect:.2e}")
        return run
