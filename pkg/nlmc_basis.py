"""
Multiscale basis functions by constrained energy minimization on oversampled regions.

For coarse cell K_i and continuum l (0 = matrix, 1..L_i = local fracture networks)
the basis minimizes the Darcy energy over K_i+ subject to unit mean on its own
coarse DOF and zero mean on every other coarse DOF of the region. The resulting
saddle-point systems are solved directly; the multipliers are discarded.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from fvm_assembly import FluidParams, MediumParams, Transmissibilities, linear_operator, linear_transmissibilities
from geometry import CoarseGrid, FracturedMesh, OversampledRegion, oversample
from sparse_linalg import (Factorization, LinearSolveError, LinearSolveReport, assemble_triplets,
                           warn_backward_accepted)

logger = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-8


class BasisError(ValueError):
    """Raised for ill-posed local problems, failed constraint checks or incomplete basis sets"""


@dataclass(frozen=True)
class ConstraintSet:
    """Mean-value rows of a region: one per coarse cell, then one per local network"""
    region: OversampledRegion
    matrix: sp.csr_matrix
    row_dofs: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.row_dofs)

    def rhs(self, target_dof: int) -> np.ndarray:
        """Kronecker delta on the row of ``target_dof``"""
        return (self.row_dofs == target_dof).astype(float)

    def residual(self, values: np.ndarray, target_dof: int) -> float:
        """max |B psi - delta|"""
        return float(np.abs(self.matrix @ values - self.rhs(target_dof)).max())


def build_constraints(region: OversampledRegion, cg: CoarseGrid) -> ConstraintSet:
    """Rows of the coarse averaging operator for the coarse DOFs inside the region"""
    fracture_dofs = [cg.dof(j, m) for j in region.coarse_cells
                     for m in range(1, len(cg.networks[j]) + 1)]
    row_dofs = np.concatenate([region.coarse_cells, np.asarray(fracture_dofs, dtype=int)]).astype(int)
    B = sp.csr_matrix(cg.averaging[row_dofs][:, region.dofs])

    empty = np.flatnonzero(np.diff(B.indptr) == 0)
    if len(empty):
        raise BasisError(f"Constraint rows without support in region of cell {region.center}: "
                         f"coarse DOFs {row_dofs[empty].tolist()}")
    return ConstraintSet(region, B, row_dofs)


@dataclass
class LocalSystem:
    """Saddle-point system [[A_loc, B^T], [B, 0]] of one oversampled region"""
    region: OversampledRegion
    constraints: ConstraintSet
    stiffness: sp.csr_matrix
    saddle: sp.csc_matrix
    target_dofs: List[int]
    _factorization: Optional[Factorization] = field(default=None, repr=False)

    @property
    def n_primal(self) -> int:
        return self.stiffness.shape[0]

    @property
    def factorization(self) -> Factorization:
        if self._factorization is None:
            try:
                self._factorization = Factorization(self.saddle, equilibrate=True)
            except LinearSolveError as e:
                raise BasisError(f"Singular local system for coarse cell {self.region.center}: {e}") from e
        return self._factorization


def assemble_local_system(region: OversampledRegion, cg: CoarseGrid, mesh: FracturedMesh,
                          medium: MediumParams, fluid: FluidParams,
                          operator: Optional[sp.csr_matrix] = None,
                          trans: Optional[Transmissibilities] = None) -> LocalSystem:
    """Restrict the Darcy operator to K_i+ with psi = 0 half a cell beyond its interior boundary.

    Restriction alone keeps the full face coefficient towards outside neighbours
    (Dirichlet at the neighbour centroid); adding it once more gives the
    half-distance coefficient 2Z (2X for fracture adjacencies). The domain
    boundary stays no-flux.
    """
    if region.n_dofs == 0:
        raise BasisError(f"Empty oversampled region around coarse cell {region.center}")
    if trans is None:
        trans = linear_transmissibilities(mesh, medium, fluid)
    if operator is None:
        operator = linear_operator(mesh, medium, fluid, trans)

    dofs = region.dofs
    stiffness = sp.csr_matrix(operator[dofs][:, dofs])

    inside = np.zeros(mesh.n_matrix, dtype=bool)
    inside[region.matrix_cells] = True
    local_index = np.full(mesh.n_dofs, -1, dtype=int)
    local_index[dofs] = np.arange(len(dofs))

    faces = mesh.fine.face_cells
    crossing = inside[faces[:, 0]] != inside[faces[:, 1]]
    interior_cell = np.where(inside[faces[crossing, 0]], faces[crossing, 0], faces[crossing, 1])
    extra_rows = [local_index[interior_cell]]
    extra_vals = [trans.matrix[crossing]]

    if mesh.n_fracture:
        inside_f = np.zeros(mesh.n_fracture, dtype=bool)
        inside_f[region.fracture_cells] = True
        pairs = mesh.fractures.adjacency
        crossing_f = inside_f[pairs[:, 0]] != inside_f[pairs[:, 1]]
        interior_f = np.where(inside_f[pairs[crossing_f, 0]], pairs[crossing_f, 0], pairs[crossing_f, 1])
        extra_rows.append(local_index[mesh.n_matrix + interior_f])
        extra_vals.append(trans.fracture[crossing_f])

    rows = np.concatenate(extra_rows)
    boundary = assemble_triplets(rows, rows, np.concatenate(extra_vals), stiffness.shape)
    stiffness = sp.csr_matrix(stiffness + boundary)

    constraints = build_constraints(region, cg)
    saddle = sp.csc_matrix(sp.bmat([[stiffness, constraints.matrix.T],
                                    [constraints.matrix, None]]))
    target_dofs = [cg.dof(region.center, l) for l in range(len(cg.networks[region.center]) + 1)]
    return LocalSystem(region, constraints, stiffness, saddle, target_dofs)


@dataclass
class BasisFunction:
    """psi^{i,l} on the fine DOFs of K_i+ (zero elsewhere)"""
    cell: int
    continuum: int
    coarse_dof: int
    layers: int
    dofs: np.ndarray
    values: np.ndarray
    constraint_residual: float
    report: LinearSolveReport

    def matrix_values(self, n_matrix: int) -> np.ndarray:
        return self.values[self.dofs < n_matrix]

    def fracture_values(self, n_matrix: int) -> np.ndarray:
        return self.values[self.dofs >= n_matrix]


def solve_basis(local: LocalSystem, continuum: int) -> BasisFunction:
    """Solve the saddle-point problem for continuum ``continuum`` of the region's center cell"""
    if not (0 <= continuum < len(local.target_dofs)):
        raise BasisError(f"Coarse cell {local.region.center} has no continuum {continuum} "
                         f"(0..{len(local.target_dofs) - 1})")
    target = local.target_dofs[continuum]
    rhs = np.concatenate([np.zeros(local.n_primal), local.constraints.rhs(target)])
    try:
        solution, report = local.factorization.solve(rhs)
    except LinearSolveError as e:
        raise BasisError(f"Basis ({local.region.center}, {continuum}) failed: {e}") from e

    values = solution[:local.n_primal]
    residual = local.constraints.residual(values, target)
    if residual > CONSTRAINT_TOL:
        raise BasisError(f"Basis ({local.region.center}, {continuum}) violates its constraints "
                         f"by {residual:.3e}")
    return BasisFunction(
        cell=local.region.center,
        continuum=continuum,
        coarse_dof=target,
        layers=local.region.layers,
        dofs=local.region.dofs,
        values=values,
        constraint_residual=residual,
        report=report,
    )


def build_projection(bases: Sequence[BasisFunction], cg: CoarseGrid, n_fine_dofs: int) -> sp.csr_matrix:
    """R with one row per coarse DOF (matrix DOFs first, then local networks)"""
    seen = np.zeros(cg.n_dofs, dtype=int)
    for basis in bases:
        seen[basis.coarse_dof] += 1
    missing = np.flatnonzero(seen == 0)
    if len(missing):
        owners = [cg.dof_owner(int(d)) for d in missing[:5]]
        raise BasisError(f"Missing basis for {len(missing)} coarse DOFs, e.g. (cell, continuum) {owners}")
    duplicated = np.flatnonzero(seen > 1)
    if len(duplicated):
        raise BasisError(f"Duplicate basis for coarse DOFs {duplicated[:5].tolist()}")

    rows = np.concatenate([np.full(len(b.dofs), b.coarse_dof) for b in bases])
    cols = np.concatenate([b.dofs for b in bases])
    vals = np.concatenate([b.values for b in bases])
    return assemble_triplets(rows, cols, vals, (cg.n_dofs, n_fine_dofs))


@dataclass
class BasisSet:
    """Offline product: every basis of one (coarse grid, S) pair and the projection R"""
    coarse_grid: CoarseGrid
    layers: int
    bases: List[BasisFunction]
    projection: sp.csr_matrix
    build_seconds: float = 0.0

    @property
    def n_coarse_dofs(self) -> int:
        return self.projection.shape[0]

    @property
    def n_fine_dofs(self) -> int:
        return self.projection.shape[1]

    @property
    def max_constraint_residual(self) -> float:
        return max((b.constraint_residual for b in self.bases), default=0.0)

    def downscale(self, p_coarse: np.ndarray) -> np.ndarray:
        """p_ms = R^T p_bar"""
        return self.projection.T @ p_coarse

    def basis(self, cell: int, continuum: int) -> BasisFunction:
        return self.bases[self.coarse_grid.dof(cell, continuum)]


class BasisBuilder:
    """Shared read-only data for the local problems of one geometry and permeability field"""

    def __init__(self, mesh: FracturedMesh, cg: CoarseGrid, medium: MediumParams, fluid: FluidParams):
        self.mesh = mesh
        self.cg = cg
        self.medium = medium
        self.fluid = fluid
        self.trans = linear_transmissibilities(mesh, medium, fluid)
        self.operator = linear_operator(mesh, medium, fluid, self.trans)

    def local_system(self, cell: int, layers: int) -> LocalSystem:
        region = oversample(self.cg, cell, layers)
        return assemble_local_system(region, self.cg, self.mesh, self.medium, self.fluid,
                                     self.operator, self.trans)

    def cell_bases(self, cell: int, layers: int) -> List[BasisFunction]:
        """All L_i + 1 bases of one coarse cell from a single factorization"""
        local = self.local_system(cell, layers)
        return [solve_basis(local, l) for l in range(len(local.target_dofs))]

    def build(self, layers: int, workers: int = 1) -> BasisSet:
        started = time.perf_counter()
        cells = range(self.cg.n_cells)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_cell = list(pool.map(lambda c: self.cell_bases(c, layers), cells))
        else:
            per_cell = [self.cell_bases(c, layers) for c in cells]

        bases = sorted((b for cell_bases in per_cell for b in cell_bases), key=lambda b: b.coarse_dof)
        projection = build_projection(bases, self.cg, self.mesh.n_dofs)
        elapsed = time.perf_counter() - started

        basis_set = BasisSet(self.cg, layers, bases, projection, elapsed)
        warn_backward_accepted([b.report for b in bases], f"Bases {self.cg.label} S={layers}")
        logger.info(f"Built {len(bases)} bases on {self.cg.label}, S={layers} in {elapsed:.2f}s "
                    f"(max constraint residual {basis_set.max_constraint_residual:.1e})")
        return basis_set


def build_basis_set(mesh: FracturedMesh, cg: CoarseGrid, medium: MediumParams, fluid: FluidParams,
                    layers: int, workers: int = 1) -> BasisSet:
    return BasisBuilder(mesh, cg, medium, fluid).build(layers, workers)


def export_basis(basis: BasisFunction, path) -> Path:
    """Plain text ``dof_index value`` pairs under a header naming (i, l, S)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([basis.dofs, basis.values])
    np.savetxt(path, table, fmt=['%d', '%.17g'],
               header=f"cell {basis.cell} continuum {basis.continuum} layers {basis.layers}")
    return path


def read_basis(path):
    """Header (cell, continuum, layers) and the (dofs, values) of an exported basis"""
    with open(path) as handle:
        tokens = handle.readline().lstrip('#').split()
    header = {tokens[k]: int(tokens[k + 1]) for k in range(0, len(tokens) - 1, 2)}
    table = np.loadtxt(path, comments='#', ndmin=2)
    return header, table[:, 0].astype(int), table[:, 1]
