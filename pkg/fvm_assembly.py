"""
Finite-volume / embedded-fracture assembly of the two-continuum pressure system.

The fine system at layer n reads

    M (p^{n+1} - p^n) / tau + (A^n + Q^n) p^{n+1} = F

with A^n the matrix and fracture flow Laplacians and Q^n the matrix-fracture
transfer. Forchheimer damping enters through per-face factors evaluated from the
velocity magnitudes of the previous layer.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from geometry import FracturedMesh
from sparse_linalg import assemble_triplets

logger = logging.getLogger(__name__)


class AssemblyError(ValueError):
    """Raised for invalid parameters or arrays not dimensioned to the geometry"""


def _check_length(name: str, values: np.ndarray, expected: int) -> None:
    if values.shape != (expected,):
        raise AssemblyError(f"{name} has shape {values.shape}, expected ({expected},)")


@dataclass(frozen=True)
class MediumParams:
    """Permeability and Forchheimer coefficient per matrix and fracture cell"""
    k_matrix: np.ndarray
    k_fracture: np.ndarray
    beta_matrix: np.ndarray
    beta_fracture: np.ndarray
    c_m: float = 1.0
    c_f: float = 1.0

    @classmethod
    def from_forchheimer_scale(cls, k_matrix, k_fracture, forchheimer_c: float,
                               c_m: float = 1.0, c_f: float = 1.0) -> 'MediumParams':
        """beta = C / k in both continua"""
        if forchheimer_c < 0:
            raise AssemblyError(f"Forchheimer scale must be non-negative, got {forchheimer_c}")
        k_matrix = np.asarray(k_matrix, dtype=float)
        k_fracture = np.asarray(k_fracture, dtype=float)
        if np.any(k_matrix <= 0) or np.any(k_fracture <= 0):
            raise AssemblyError("Permeability must be positive everywhere")
        return cls(k_matrix, k_fracture, forchheimer_c / k_matrix, forchheimer_c / k_fracture, c_m, c_f)

    def with_forchheimer_scale(self, forchheimer_c: float) -> 'MediumParams':
        return MediumParams.from_forchheimer_scale(self.k_matrix, self.k_fracture, forchheimer_c,
                                                   self.c_m, self.c_f)

    @property
    def is_linear(self) -> bool:
        """True when every Forchheimer coefficient vanishes"""
        return not (np.any(self.beta_matrix) or np.any(self.beta_fracture))

    def validate(self, mesh: FracturedMesh) -> None:
        _check_length('k_matrix', self.k_matrix, mesh.n_matrix)
        _check_length('beta_matrix', self.beta_matrix, mesh.n_matrix)
        _check_length('k_fracture', self.k_fracture, mesh.n_fracture)
        _check_length('beta_fracture', self.beta_fracture, mesh.n_fracture)
        if np.any(self.k_matrix <= 0) or np.any(self.k_fracture <= 0):
            raise AssemblyError("Permeability must be positive everywhere")
        if np.any(self.beta_matrix < 0) or np.any(self.beta_fracture < 0):
            raise AssemblyError("Forchheimer coefficients must be non-negative")
        if self.c_m <= 0 or self.c_f <= 0:
            raise AssemblyError(f"Compressibilities must be positive, got c_m={self.c_m}, c_f={self.c_f}")


@dataclass(frozen=True)
class FluidParams:
    mu: float = 8.0
    rho: float = 1.0

    def __post_init__(self):
        if self.mu <= 0:
            raise AssemblyError(f"Viscosity must be positive, got {self.mu}")
        if self.rho <= 0:
            raise AssemblyError(f"Density must be positive, got {self.rho}")


@dataclass(frozen=True)
class SourceTerms:
    """Cell-wise source densities f; F = f * |cell|"""
    matrix: np.ndarray
    fracture: np.ndarray

    @classmethod
    def zeros(cls, mesh: FracturedMesh) -> 'SourceTerms':
        return cls(np.zeros(mesh.n_matrix), np.zeros(mesh.n_fracture))

    def vector(self, mesh: FracturedMesh) -> np.ndarray:
        _check_length('matrix sources', self.matrix, mesh.n_matrix)
        _check_length('fracture sources', self.fracture, mesh.n_fracture)
        return np.concatenate([self.matrix * mesh.fine.areas, self.fracture * mesh.fractures.lengths])


@dataclass(frozen=True)
class FaceVelocities:
    """|u| per matrix face, per fracture adjacency and per coupling pair"""
    matrix: np.ndarray
    fracture: np.ndarray
    coupling: np.ndarray

    @classmethod
    def zeros(cls, mesh: FracturedMesh) -> 'FaceVelocities':
        return cls(np.zeros(mesh.fine.n_faces),
                   np.zeros(len(mesh.fractures.adjacency)),
                   np.zeros(mesh.coupling.n_pairs))

    def validate(self, mesh: FracturedMesh) -> None:
        _check_length('matrix face velocities', self.matrix, mesh.fine.n_faces)
        _check_length('fracture face velocities', self.fracture, len(mesh.fractures.adjacency))
        _check_length('coupling velocities', self.coupling, mesh.coupling.n_pairs)
        if np.any(self.matrix < 0) or np.any(self.fracture < 0) or np.any(self.coupling < 0):
            raise AssemblyError("Velocity magnitudes must be non-negative")

    def max_magnitude(self) -> float:
        parts = [v.max() for v in (self.matrix, self.fracture, self.coupling) if len(v)]
        return float(max(parts)) if parts else 0.0


def harmonic_pair(a: float, b: float) -> float:
    """2 / (1/a + 1/b)"""
    if a <= 0 or b <= 0:
        raise AssemblyError(f"Harmonic mean needs positive arguments, got ({a}, {b})")
    return 2.0 / (1.0 / a + 1.0 / b)


def harmonic_average(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise 2ab / (a + b); zero where both vanish (non-negative inputs)"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    total = a + b
    out = np.zeros(np.broadcast(a, b).shape)
    np.divide(2.0 * a * b, total, out=out, where=total > 0)
    return out


def forchheimer_factor(rho, beta, k, u_abs, mu):
    """1 / (1 + rho beta k |u| / mu), elementwise"""
    rho, beta, k, u_abs = (np.asarray(v, dtype=float) for v in (rho, beta, k, u_abs))
    if mu <= 0:
        raise AssemblyError(f"Viscosity must be positive, got {mu}")
    if np.any(k <= 0):
        raise AssemblyError("Permeability must be positive")
    if np.any(rho < 0) or np.any(beta < 0) or np.any(u_abs < 0):
        raise AssemblyError("Forchheimer factor inputs must be non-negative")
    factor = 1.0 / (1.0 + rho * beta * k * u_abs / mu)
    return float(factor) if factor.ndim == 0 else factor


@dataclass(frozen=True)
class Transmissibilities:
    """Linear (Darcy) face coefficients with the averaged k and beta behind them"""
    matrix: np.ndarray
    fracture: np.ndarray
    coupling: np.ndarray
    k_matrix: np.ndarray
    k_fracture: np.ndarray
    k_coupling: np.ndarray
    beta_matrix: np.ndarray
    beta_fracture: np.ndarray
    beta_coupling: np.ndarray


def linear_transmissibilities(mesh: FracturedMesh, medium: MediumParams,
                              fluid: FluidParams) -> Transmissibilities:
    """Z = k|E|/(mu d) per matrix face, X = k_f/(mu d_f) per adjacency, Y = k*|gamma|/(mu theta)"""
    medium.validate(mesh)
    faces = mesh.fine.face_cells
    pairs = mesh.fractures.adjacency
    coupling = mesh.coupling

    k_m = harmonic_average(medium.k_matrix[faces[:, 0]], medium.k_matrix[faces[:, 1]])
    k_f = harmonic_average(medium.k_fracture[pairs[:, 0]], medium.k_fracture[pairs[:, 1]])
    k_star = harmonic_average(medium.k_matrix[coupling.matrix_cells],
                              medium.k_fracture[coupling.fracture_cells])

    return Transmissibilities(
        matrix=k_m * mesh.fine.face_lengths / (fluid.mu * mesh.fine.face_distances),
        fracture=k_f / (fluid.mu * mesh.fractures.adjacency_distances),
        coupling=k_star * coupling.lengths / (fluid.mu * coupling.distances),
        k_matrix=k_m,
        k_fracture=k_f,
        k_coupling=k_star,
        beta_matrix=harmonic_average(medium.beta_matrix[faces[:, 0]], medium.beta_matrix[faces[:, 1]]),
        beta_fracture=harmonic_average(medium.beta_fracture[pairs[:, 0]], medium.beta_fracture[pairs[:, 1]]),
        beta_coupling=harmonic_average(medium.beta_matrix[coupling.matrix_cells],
                                       medium.beta_fracture[coupling.fracture_cells]),
    )


def damping_factors(trans: Transmissibilities, fluid: FluidParams,
                    velocities: FaceVelocities):
    """(rho, w, eth) per matrix face, fracture adjacency and coupling pair"""
    return (forchheimer_factor(fluid.rho, trans.beta_matrix, trans.k_matrix, velocities.matrix, fluid.mu),
            forchheimer_factor(fluid.rho, trans.beta_fracture, trans.k_fracture, velocities.fracture, fluid.mu),
            forchheimer_factor(fluid.rho, trans.beta_coupling, trans.k_coupling, velocities.coupling, fluid.mu))


def _laplacian(pairs: np.ndarray, weights: np.ndarray, offset: int):
    """Triplets of the weighted graph Laplacian over index pairs shifted by offset"""
    a = pairs[:, 0] + offset
    b = pairs[:, 1] + offset
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([weights, weights, -weights, -weights])
    return rows, cols, vals


@dataclass
class SystemBlocks:
    """M, A^n, Q^n and F over the stacked vector (p_m, p_f)"""
    M: sp.csr_matrix
    A: sp.csr_matrix
    Q: sp.csr_matrix
    F: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.M.shape[0]

    def system_matrix(self, tau: float) -> sp.csr_matrix:
        """M / tau + A + Q"""
        return sp.csr_matrix(self.M / tau + self.A + self.Q)

    def rhs(self, p_prev: np.ndarray, tau: float) -> np.ndarray:
        """F + M p^n / tau"""
        return self.F + self.M @ p_prev / tau

    def mass_balance_defect(self, p_new: np.ndarray, p_old: np.ndarray, tau: float) -> float:
        """1^T M (p^{n+1} - p^n) / tau - 1^T F"""
        return float(np.sum(self.M @ (p_new - p_old)) / tau - np.sum(self.F))

    def storage(self) -> np.ndarray:
        """M 1; storage . p is the total stored mass 1^T M p"""
        return np.asarray(self.M.sum(axis=1)).ravel()

    def conserved_total(self, p_old: np.ndarray, tau: float) -> float:
        """1^T M p^n + tau 1^T F, the stored mass a conservative step reaches"""
        return float(self.storage() @ p_old + tau * np.sum(self.F))


def assemble_blocks(mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                    velocities: FaceVelocities, sources: SourceTerms,
                    trans: Optional[Transmissibilities] = None) -> SystemBlocks:
    """Fine blocks with face coefficients T = Z rho, W = X w, sigma = Y eth"""
    velocities.validate(mesh)
    if trans is None:
        trans = linear_transmissibilities(mesh, medium, fluid)
    rho_m, w_f, eth = damping_factors(trans, fluid, velocities)
    return _blocks_from_coefficients(mesh, medium, sources,
                                     trans.matrix * rho_m, trans.fracture * w_f, trans.coupling * eth)


def _blocks_from_coefficients(mesh: FracturedMesh, medium: MediumParams, sources: SourceTerms,
                              t_matrix: np.ndarray, t_fracture: np.ndarray,
                              t_coupling: np.ndarray) -> SystemBlocks:
    n_m, n = mesh.n_matrix, mesh.n_dofs
    shape = (n, n)

    m_rows, m_cols, m_vals = _laplacian(mesh.fine.face_cells, t_matrix, 0)
    f_rows, f_cols, f_vals = _laplacian(mesh.fractures.adjacency, t_fracture, n_m)
    A = assemble_triplets(np.concatenate([m_rows, f_rows]), np.concatenate([m_cols, f_cols]),
                          np.concatenate([m_vals, f_vals]), shape)

    couples = np.column_stack([mesh.coupling.matrix_cells, n_m + mesh.coupling.fracture_cells])
    Q = assemble_triplets(*_laplacian(couples, t_coupling, 0), shape)

    mass = np.concatenate([medium.c_m * mesh.fine.areas, medium.c_f * mesh.fractures.lengths])
    M = sp.csr_matrix(sp.diags(mass, format='csr'))

    return SystemBlocks(M=M, A=A, Q=Q, F=sources.vector(mesh))


def linear_operator(mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                    trans: Optional[Transmissibilities] = None) -> sp.csr_matrix:
    """A + Q with Darcy coefficients only (Z, X, Y)"""
    if trans is None:
        trans = linear_transmissibilities(mesh, medium, fluid)
    blocks = _blocks_from_coefficients(mesh, medium, SourceTerms.zeros(mesh),
                                       trans.matrix, trans.fracture, trans.coupling)
    return sp.csr_matrix(blocks.A + blocks.Q)


def compute_face_velocities(mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                            p: np.ndarray, velocities_prev: FaceVelocities,
                            trans: Optional[Transmissibilities] = None) -> FaceVelocities:
    """|u| = factor(prev) * (k / mu) * |dp| / d on every face, adjacency and coupling pair"""
    p = np.asarray(p, dtype=float)
    _check_length('pressure', p, mesh.n_dofs)
    velocities_prev.validate(mesh)
    if trans is None:
        trans = linear_transmissibilities(mesh, medium, fluid)
    rho_m, w_f, eth = damping_factors(trans, fluid, velocities_prev)

    n_m = mesh.n_matrix
    p_m, p_f = p[:n_m], p[n_m:]
    faces = mesh.fine.face_cells
    pairs = mesh.fractures.adjacency
    coupling = mesh.coupling

    u_m = rho_m * trans.k_matrix / fluid.mu * np.abs(p_m[faces[:, 0]] - p_m[faces[:, 1]]) \
        / mesh.fine.face_distances
    u_f = w_f * trans.k_fracture / fluid.mu * np.abs(p_f[pairs[:, 0]] - p_f[pairs[:, 1]]) \
        / mesh.fractures.adjacency_distances
    u_mf = eth * trans.k_coupling / fluid.mu * np.abs(p_m[coupling.matrix_cells] - p_f[coupling.fracture_cells]) \
        / coupling.distances
    return FaceVelocities(u_m, u_f, u_mf)


class SystemAssembler:
    """Assembly bound to one geometry and parameter set.

    Linear transmissibilities are computed once. With ``nonlinear=False`` (or a
    medium with beta = 0 everywhere) the Forchheimer factors are skipped and the
    Darcy blocks are cached.
    """

    def __init__(self, mesh: FracturedMesh, medium: MediumParams, fluid: FluidParams,
                 sources: SourceTerms, nonlinear: bool = True):
        medium.validate(mesh)
        self.mesh = mesh
        self.medium = medium
        self.fluid = fluid
        self.sources = sources
        self.nonlinear = nonlinear and not medium.is_linear
        self.trans = linear_transmissibilities(mesh, medium, fluid)
        self._linear_blocks: Optional[SystemBlocks] = None
        logger.debug(f"Assembler for {mesh.n_dofs} DOFs, nonlinear={self.nonlinear}")

    def linear_blocks(self) -> SystemBlocks:
        """Darcy blocks (all factors 1)"""
        if self._linear_blocks is None:
            self._linear_blocks = _blocks_from_coefficients(
                self.mesh, self.medium, self.sources,
                self.trans.matrix, self.trans.fracture, self.trans.coupling)
        return self._linear_blocks

    def blocks(self, velocities: FaceVelocities) -> SystemBlocks:
        if not self.nonlinear:
            return self.linear_blocks()
        return assemble_blocks(self.mesh, self.medium, self.fluid, velocities, self.sources, self.trans)

    def velocities(self, p: np.ndarray, velocities_prev: FaceVelocities) -> FaceVelocities:
        return compute_face_velocities(self.mesh, self.medium, self.fluid, p, velocities_prev, self.trans)

    def zero_velocities(self) -> FaceVelocities:
        return FaceVelocities.zeros(self.mesh)
