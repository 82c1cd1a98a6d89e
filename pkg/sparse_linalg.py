"""
Sparse matrix helpers: triplet assembly, Galerkin triple products and pivoted direct solves
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from config import Config

logger = logging.getLogger(__name__)

RUIZ_ITERATIONS = 20
RUIZ_TOL = 1e-3


class LinearSolveError(ValueError):
    """Raised when a system is singular, mis-dimensioned or not solved to tolerance"""


@dataclass
class LinearSolveReport:
    """Diagnostics of one accepted solve, recomputed from the returned solution"""
    relative_residual: float
    backward_error: float
    refinement_steps: int
    accepted_by: str
    size: int
    factor_nnz: int

    @property
    def on_backward_error(self) -> bool:
        return self.accepted_by == 'backward_error'


def assemble_triplets(rows, cols, values, shape) -> sp.csr_matrix:
    """Coordinate triplets -> compressed rows, duplicates summed"""
    matrix = sp.coo_matrix((np.asarray(values, dtype=float),
                            (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))),
                           shape=shape).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def is_symmetric(matrix: sp.spmatrix, rtol: float = 1e-13) -> bool:
    """Entrywise symmetry relative to the largest entry"""
    matrix = sp.csr_matrix(matrix)
    scale = abs(matrix).max() if matrix.nnz else 0.0
    if scale == 0.0:
        return True
    diff = abs(matrix - matrix.T)
    return (diff.max() if diff.nnz else 0.0) <= rtol * scale


def ruiz_scaling(matrix: sp.spmatrix) -> np.ndarray:
    """Symmetric scaling d such that diag(d) A diag(d) has row maxima close to 1"""
    matrix = sp.csr_matrix(abs(matrix))
    d = np.ones(matrix.shape[0])
    for _ in range(RUIZ_ITERATIONS):
        scaled = sp.diags(d) @ matrix @ sp.diags(d)
        row_max = scaled.max(axis=1).toarray().ravel()
        row_max[row_max == 0.0] = 1.0
        if np.all(np.abs(row_max - 1.0) <= RUIZ_TOL):
            break
        d = d / np.sqrt(row_max)
    return d


class Factorization:
    """Sparse LU with partial pivoting (SuperLU); handles symmetric indefinite systems.

    With ``equilibrate`` the factorization acts on the Ruiz-scaled matrix D A D,
    which keeps constraint rows of a saddle-point system and the storage rows of a
    time-step system from being swamped by large fracture transmissibilities.
    Residuals are always measured on the original system.

    A solve is accepted when its relative residual meets ``rtol``, or when the
    normwise backward error meets ``backward_tol`` and the relative residual is
    still below ``residual_cap``. Anything else raises LinearSolveError.
    """

    def __init__(self, matrix: sp.spmatrix, rtol: Optional[float] = None,
                 backward_tol: Optional[float] = None, refinement_steps: Optional[int] = None,
                 residual_cap: Optional[float] = None, equilibrate: bool = False):
        params = Config.get_solver_params()
        self.rtol = params['rtol'] if rtol is None else rtol
        self.backward_tol = params['backward_tol'] if backward_tol is None else backward_tol
        self.refinement_steps = params['refinement_steps'] if refinement_steps is None else refinement_steps
        self.residual_cap = params['residual_cap'] if residual_cap is None else residual_cap

        if matrix.shape[0] != matrix.shape[1]:
            raise LinearSolveError(f"Matrix must be square, got {matrix.shape}")
        self.matrix = sp.csc_matrix(matrix, dtype=float)
        self.size = self.matrix.shape[0]
        if self.size == 0:
            raise LinearSolveError("Matrix is empty")
        self.norm_inf = float(abs(self.matrix).sum(axis=1).max())

        self.scaling = ruiz_scaling(self.matrix) if equilibrate else None
        factored = self.matrix
        if self.scaling is not None:
            D = sp.diags(self.scaling)
            factored = sp.csc_matrix(D @ self.matrix @ D)

        try:
            self._lu = splu(factored)
        except RuntimeError as e:
            raise LinearSolveError(f"Matrix is singular: {e}") from e

    @property
    def factor_nnz(self) -> int:
        return int(self._lu.L.nnz + self._lu.U.nnz)

    def _apply_inverse(self, b: np.ndarray) -> np.ndarray:
        if self.scaling is None:
            return self._lu.solve(b)
        return self.scaling * self._lu.solve(self.scaling * b)

    def _relative(self, r: np.ndarray, b_norm: float) -> float:
        r_norm = float(np.linalg.norm(r))
        return r_norm / b_norm if b_norm > 0 else r_norm

    def solve(self, b) -> Tuple[np.ndarray, LinearSolveReport]:
        """Solve A x = b; residual recomputed after the solve and checked against tolerance"""
        b = np.asarray(b, dtype=float)
        if b.shape != (self.size,):
            raise LinearSolveError(f"Right-hand side has shape {b.shape}, expected ({self.size},)")

        b_norm = float(np.linalg.norm(b))
        x = self._apply_inverse(b)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("Solve produced non-finite values (numerically singular matrix)")
        r = b - self.matrix @ x
        relative = self._relative(r, b_norm)

        # Iterative refinement with the same factors
        steps = 0
        while relative > self.rtol and steps < self.refinement_steps:
            x = x + self._apply_inverse(r)
            r = b - self.matrix @ x
            relative = self._relative(r, b_norm)
            steps += 1

        denominator = self.norm_inf * float(np.abs(x).max()) + float(np.abs(b).max())
        backward = float(np.abs(r).max()) / denominator if denominator > 0 else 0.0

        if relative <= self.rtol:
            accepted_by = 'residual'
        elif backward <= self.backward_tol and relative <= self.residual_cap:
            accepted_by = 'backward_error'
        else:
            raise LinearSolveError(f"Residual tolerance not met: relative residual {relative:.3e} "
                                   f"(tolerance {self.rtol:.1e}, cap {self.residual_cap:.1e}), "
                                   f"backward error {backward:.3e}")

        logger.debug(f"Solved size {self.size}: residual {relative:.2e}, backward error {backward:.2e}, "
                     f"refinement {steps}, accepted on {accepted_by}")
        report = LinearSolveReport(
            relative_residual=relative,
            backward_error=backward,
            refinement_steps=steps,
            accepted_by=accepted_by,
            size=self.size,
            factor_nnz=self.factor_nnz,
        )
        return x, report


def solve(matrix: sp.spmatrix, b, equilibrate: bool = False) -> Tuple[np.ndarray, LinearSolveReport]:
    """One-shot direct solve"""
    return Factorization(matrix, equilibrate=equilibrate).solve(b)


def match_total(x: np.ndarray, weights: np.ndarray, direction: np.ndarray,
                target: float) -> Tuple[np.ndarray, float]:
    """Shift x along ``direction`` until weights . x equals ``target``; returns the vector and the shift"""
    pivot = float(weights @ direction)
    if not np.isfinite(pivot) or pivot == 0.0:
        raise LinearSolveError(f"Shift direction carries total weight {pivot}, cannot match {target:.3e}")
    shift = (target - float(weights @ x)) / pivot
    return x + shift * direction, shift


def warn_backward_accepted(reports, context: str) -> int:
    """Log one warning for solves that met only the backward-error criterion; returns their count"""
    flagged = [r for r in reports if r.on_backward_error]
    if flagged:
        worst = max(r.relative_residual for r in flagged)
        logger.warning(f"{context}: {len(flagged)} of {len(reports)} solves accepted on backward error "
                       f"(largest relative residual {worst:.2e})")
    return len(flagged)


def triple_product(R: sp.spmatrix, A: sp.spmatrix, symmetrize: bool = False) -> sp.csr_matrix:
    """R A R^T; ``symmetrize`` averages out rounding asymmetry for symmetric A"""
    if A.shape[0] != A.shape[1]:
        raise LinearSolveError(f"Operator must be square, got {A.shape}")
    if R.shape[1] != A.shape[0]:
        raise LinearSolveError(f"Projection with {R.shape[1]} columns cannot act on a "
                               f"{A.shape[0]}x{A.shape[1]} operator")
    R = sp.csr_matrix(R)
    product = sp.csr_matrix(R @ sp.csr_matrix(A) @ R.T)
    if symmetrize:
        product = sp.csr_matrix(0.5 * (product + product.T))
    product.sort_indices()
    return product


def dump_matrix(matrix: sp.spmatrix, path) -> None:
    """Write ``row col value`` lines, 0-based, full precision"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    table = np.column_stack([coo.row[order], coo.col[order], coo.data[order]])
    np.savetxt(path, table, fmt=['%d', '%d', '%.17g'],
               header=f"{matrix.shape[0]} {matrix.shape[1]}")


def load_matrix(path) -> sp.csr_matrix:
    """Read a matrix written by ``dump_matrix``"""
    with open(path) as handle:
        header = handle.readline().lstrip('#').split()
    shape = (int(header[0]), int(header[1]))
    table = np.loadtxt(path, comments='#', ndmin=2)
    if table.size == 0:
        return sp.csr_matrix(shape)
    return assemble_triplets(table[:, 0].astype(int), table[:, 1].astype(int), table[:, 2], shape)
