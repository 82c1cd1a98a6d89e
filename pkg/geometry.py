"""
Discrete geometry for the two-continuum model: uniform matrix mesh, embedded
fracture mesh, their coupling, and the coarse grid with oversampled regions
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Relative tolerance (in units of the fine cell diagonal) for coordinate matching
COORD_TOL = 1e-12


class GeometryError(ValueError):
    """Raised for invalid mesh dimensions or fracture input"""


@dataclass(frozen=True)
class FineMesh:
    """Uniform rectangular matrix mesh; cells numbered row-major (i = iy * nx + ix)"""
    nx: int
    ny: int
    lx: float
    ly: float
    centroids: np.ndarray
    areas: np.ndarray
    face_cells: np.ndarray
    face_lengths: np.ndarray
    face_distances: np.ndarray

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def h(self) -> float:
        """Smallest cell side"""
        return min(self.hx, self.hy)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.hx, self.hy)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def domain_area(self) -> float:
        return self.lx * self.ly

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of the cell containing each point (points on a shared edge go to the upper cell)"""
        points = np.atleast_2d(points)
        ix = np.clip(np.floor(points[:, 0] / self.hx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor(points[:, 1] / self.hy).astype(int), 0, self.ny - 1)
        return iy * self.nx + ix

    def cell_bounds(self, cell: int) -> Tuple[float, float, float, float]:
        """(x0, x1, y0, y1) of a cell"""
        ix, iy = cell % self.nx, cell // self.nx
        return (ix * self.hx, (ix + 1) * self.hx, iy * self.hy, (iy + 1) * self.hy)


@dataclass(frozen=True)
class FractureMesh:
    """Fracture cells (segments), each lying inside exactly one matrix cell"""
    endpoints: np.ndarray
    lengths: np.ndarray
    midpoints: np.ndarray
    matrix_cells: np.ndarray
    source_polylines: np.ndarray
    adjacency: np.ndarray
    adjacency_distances: np.ndarray
    network_ids: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.lengths)

    @property
    def n_networks(self) -> int:
        return int(self.network_ids.max()) + 1 if self.n_cells else 0

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    def neighbors(self, cell: int) -> List[int]:
        """Fracture cells sharing an endpoint with ``cell``"""
        pairs = self.adjacency
        left = pairs[pairs[:, 0] == cell, 1]
        right = pairs[pairs[:, 1] == cell, 0]
        return sorted(np.concatenate([left, right]).tolist())


@dataclass(frozen=True)
class CouplingMap:
    """Matrix-fracture intersections: one (i, l) pair per fracture cell"""
    matrix_cells: np.ndarray
    fracture_cells: np.ndarray
    lengths: np.ndarray
    distances: np.ndarray

    @property
    def connectivity(self) -> np.ndarray:
        """C_il = |gamma_il| / theta_il"""
        return self.lengths / self.distances

    @property
    def n_pairs(self) -> int:
        return len(self.lengths)


@dataclass(frozen=True)
class FracturedMesh:
    """Both continua and their coupling; the fine DOF vector is (p_m, p_f)"""
    fine: FineMesh
    fractures: FractureMesh
    coupling: CouplingMap

    @property
    def n_matrix(self) -> int:
        return self.fine.n_cells

    @property
    def n_fracture(self) -> int:
        return self.fractures.n_cells

    @property
    def n_dofs(self) -> int:
        return self.n_matrix + self.n_fracture

    @property
    def measures(self) -> np.ndarray:
        """|cell| for matrix cells followed by |segment| for fracture cells"""
        return np.concatenate([self.fine.areas, self.fractures.lengths])

    @property
    def positions(self) -> np.ndarray:
        """Matrix centroids followed by fracture midpoints"""
        return np.vstack([self.fine.centroids, self.fractures.midpoints])


def build_fine_mesh(nx: int, ny: int, extents: Sequence[float] = (1.0, 1.0)) -> FineMesh:
    """Uniform nx-by-ny mesh over [0, lx] x [0, ly]"""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise GeometryError(f"Mesh dimensions must be positive integers, got {nx}x{ny}")
    lx, ly = float(extents[0]), float(extents[1])
    if lx <= 0 or ly <= 0:
        raise GeometryError(f"Domain extents must be positive, got ({lx}, {ly})")
    nx, ny = int(nx), int(ny)

    hx, hy = lx / nx, ly / ny
    iy, ix = np.divmod(np.arange(nx * ny), nx)
    centroids = np.column_stack([(ix + 0.5) * hx, (iy + 0.5) * hy])
    areas = np.full(nx * ny, hx * hy)

    index = np.arange(nx * ny).reshape(ny, nx)
    horizontal = np.column_stack([index[:, :-1].ravel(), index[:, 1:].ravel()])
    vertical = np.column_stack([index[:-1, :].ravel(), index[1:, :].ravel()])
    face_cells = np.vstack([horizontal, vertical]).astype(int)
    face_lengths = np.concatenate([np.full(len(horizontal), hy), np.full(len(vertical), hx)])
    face_distances = np.concatenate([np.full(len(horizontal), hx), np.full(len(vertical), hy)])

    logger.debug(f"Fine mesh {nx}x{ny}: {nx * ny} cells, {len(face_cells)} interior faces")
    return FineMesh(nx, ny, lx, ly, centroids, areas, face_cells, face_lengths, face_distances)


def _split_points(a: np.ndarray, b: np.ndarray, mesh: FineMesh, tol: float) -> np.ndarray:
    """Points of segment a->b at every crossing with a matrix cell boundary"""
    direction = b - a
    length = float(np.hypot(*direction))
    params = [0.0, 1.0]
    for axis, step in ((0, mesh.hx), (1, mesh.hy)):
        if direction[axis] == 0.0:
            continue
        lo, hi = sorted((a[axis], b[axis]))
        lines = np.arange(math.ceil(lo / step), math.floor(hi / step) + 1) * step
        t = (lines - a[axis]) / direction[axis]
        params.extend(t[(t > 0.0) & (t < 1.0)].tolist())

    kept = [0.0]
    for t in sorted(params)[1:]:
        if (t - kept[-1]) * length > tol:
            kept.append(t)
    kept[-1] = 1.0

    points = a + np.outer(kept, direction)
    points[0], points[-1] = a, b
    return points


def build_fracture_mesh(polylines: Sequence, fine_mesh: FineMesh) -> FractureMesh:
    """Subdivide fracture polylines at matrix cell boundaries and label networks.

    Each polyline is a sequence of (x, y) points; a plain segment is a two-point
    polyline. Network connectivity is defined by shared endpoints only.
    """
    tol = COORD_TOL * fine_mesh.diagonal
    starts, ends, owners = [], [], []

    for p, polyline in enumerate(polylines):
        points = np.asarray(polyline, dtype=float).reshape(-1, 2)
        if len(points) < 2:
            raise GeometryError(f"Fracture {p} needs at least two points")
        outside = ((points[:, 0] < -tol) | (points[:, 0] > fine_mesh.lx + tol) |
                   (points[:, 1] < -tol) | (points[:, 1] > fine_mesh.ly + tol))
        if outside.any():
            raise GeometryError(f"Fracture {p} leaves the domain "
                                f"[0, {fine_mesh.lx}] x [0, {fine_mesh.ly}]")
        points = np.column_stack([np.clip(points[:, 0], 0.0, fine_mesh.lx),
                                  np.clip(points[:, 1], 0.0, fine_mesh.ly)])
        for a, b in zip(points[:-1], points[1:]):
            if np.hypot(*(b - a)) <= tol:
                raise GeometryError(f"Fracture {p} has a zero-length segment at {tuple(a)}")
            pieces = _split_points(a, b, fine_mesh, tol)
            starts.append(pieces[:-1])
            ends.append(pieces[1:])
            owners.append(np.full(len(pieces) - 1, p))

    if not starts:
        return FractureMesh(
            endpoints=np.zeros((0, 2, 2)), lengths=np.zeros(0), midpoints=np.zeros((0, 2)),
            matrix_cells=np.zeros(0, dtype=int), source_polylines=np.zeros(0, dtype=int),
            adjacency=np.zeros((0, 2), dtype=int), adjacency_distances=np.zeros(0),
            network_ids=np.zeros(0, dtype=int))

    start = np.vstack(starts)
    end = np.vstack(ends)
    endpoints = np.stack([start, end], axis=1)
    lengths = np.hypot(*(end - start).T)
    midpoints = 0.5 * (start + end)
    matrix_cells = fine_mesh.locate(midpoints)
    n_cells = len(lengths)

    # Adjacency from coincident endpoints
    tree = cKDTree(endpoints.reshape(-1, 2))
    pairs = tree.query_pairs(r=tol, output_type='ndarray')
    if len(pairs):
        pairs = np.sort(pairs // 2, axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.unique(pairs, axis=0)
    else:
        pairs = np.zeros((0, 2), dtype=int)
    distances = np.hypot(*(midpoints[pairs[:, 0]] - midpoints[pairs[:, 1]]).T)
    if np.any(distances <= 0):
        raise GeometryError("Adjacent fracture cells with coincident midpoints (overlapping segments)")

    graph = nx.Graph()
    graph.add_nodes_from(range(n_cells))
    graph.add_edges_from(map(tuple, pairs))
    network_ids = np.empty(n_cells, dtype=int)
    for k, component in enumerate(sorted(nx.connected_components(graph), key=min)):
        network_ids[list(component)] = k

    logger.info(f"Fracture mesh: {len(polylines)} polylines -> {n_cells} cells, "
                f"{len(pairs)} adjacencies, {network_ids.max() + 1} networks")
    return FractureMesh(endpoints, lengths, midpoints, matrix_cells.astype(int),
                        np.concatenate(owners).astype(int), pairs.astype(int),
                        distances, network_ids)


def compute_coupling(fine_mesh: FineMesh, fractures: FractureMesh) -> CouplingMap:
    """Embedded-fracture coupling data; theta is clamped below by h/4"""
    tol = COORD_TOL * fine_mesh.diagonal
    cells = fractures.matrix_cells
    for l, cell in enumerate(cells):
        x0, x1, y0, y1 = fine_mesh.cell_bounds(cell)
        pts = fractures.endpoints[l]
        inside = ((pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x1 + tol) &
                  (pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y1 + tol))
        if not inside.all():
            raise GeometryError(f"Fracture cell {l} straddles matrix cell {cell}")

    offsets = fine_mesh.centroids[cells] - fractures.midpoints
    distances = np.maximum(np.hypot(*offsets.T), fine_mesh.h / 4.0)
    return CouplingMap(matrix_cells=cells.copy(),
                       fracture_cells=np.arange(fractures.n_cells),
                       lengths=fractures.lengths.copy(),
                       distances=distances)


def build_fractured_mesh(nx: int, ny: int, extents: Sequence[float],
                         polylines: Sequence) -> FracturedMesh:
    """Convenience: fine mesh, fracture mesh and coupling in one call"""
    fine = build_fine_mesh(nx, ny, extents)
    fractures = build_fracture_mesh(polylines, fine)
    return FracturedMesh(fine, fractures, compute_coupling(fine, fractures))


@dataclass(frozen=True)
class CoarseGrid:
    """Coarse cells K_j, their local fracture networks and the coarse DOF enumeration.

    Matrix DOFs come first (row-major coarse cells), then one fracture DOF per
    local network ordered by (cell, local network id).
    """
    nx: int
    ny: int
    ratio_x: int
    ratio_y: int
    cell_of_matrix: np.ndarray
    members: List[np.ndarray]
    areas: np.ndarray
    fracture_cell: np.ndarray
    fracture_network: np.ndarray
    networks: List[List[np.ndarray]]
    network_lengths: List[np.ndarray]
    network_dof_offset: np.ndarray
    fracture_dof: np.ndarray
    averaging: sp.csr_matrix
    measures: np.ndarray
    fine_measures: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def num_networks(self) -> np.ndarray:
        """L_j per coarse cell"""
        return np.array([len(n) for n in self.networks], dtype=int)

    @property
    def n_dofs(self) -> int:
        return self.n_cells + int(self.num_networks.sum())

    @property
    def n_fine_matrix(self) -> int:
        return len(self.cell_of_matrix)

    @property
    def label(self) -> str:
        return f"{self.nx}x{self.ny}"

    def dof(self, cell: int, continuum: int) -> int:
        """Coarse DOF of (K_cell, l); l = 0 is the matrix, 1..L_cell the local networks"""
        if continuum == 0:
            return cell
        if not (1 <= continuum <= len(self.networks[cell])):
            raise GeometryError(f"Coarse cell {cell} has no fracture network {continuum}")
        return int(self.network_dof_offset[cell]) + continuum - 1

    def dof_owner(self, dof: int) -> Tuple[int, int]:
        """Inverse of ``dof``"""
        if dof < self.n_cells:
            return dof, 0
        cell = int(np.searchsorted(self.network_dof_offset, dof, side='right')) - 1
        return cell, int(dof - self.network_dof_offset[cell]) + 1

    def position(self, cell: int) -> Tuple[int, int]:
        return cell % self.nx, cell // self.nx

    def center(self, cell: int, fine_mesh: FineMesh) -> Tuple[float, float]:
        cx, cy = self.position(cell)
        return ((cx + 0.5) * self.ratio_x * fine_mesh.hx, (cy + 0.5) * self.ratio_y * fine_mesh.hy)


def build_coarse_grid(fine_mesh: FineMesh, fractures: FractureMesh,
                      coarse_nx: int, coarse_ny: int) -> CoarseGrid:
    """Partition the fine mesh into coarse cells and split fractures into local networks"""
    if coarse_nx < 1 or coarse_ny < 1:
        raise GeometryError(f"Coarse grid dimensions must be positive, got {coarse_nx}x{coarse_ny}")
    if fine_mesh.nx % coarse_nx or fine_mesh.ny % coarse_ny:
        raise GeometryError(f"Coarse grid {coarse_nx}x{coarse_ny} does not divide fine grid "
                            f"{fine_mesh.nx}x{fine_mesh.ny}")
    ratio_x, ratio_y = fine_mesh.nx // coarse_nx, fine_mesh.ny // coarse_ny
    n_coarse = coarse_nx * coarse_ny

    iy, ix = np.divmod(np.arange(fine_mesh.n_cells), fine_mesh.nx)
    cell_of_matrix = (iy // ratio_y) * coarse_nx + ix // ratio_x
    order = np.argsort(cell_of_matrix, kind='stable')
    counts = np.bincount(cell_of_matrix, minlength=n_coarse)
    members = np.split(order, np.cumsum(counts)[:-1])
    areas = np.bincount(cell_of_matrix, weights=fine_mesh.areas, minlength=n_coarse)

    # Local networks: components of the endpoint graph restricted to each coarse cell
    n_frac = fractures.n_cells
    fracture_cell = cell_of_matrix[fractures.matrix_cells]
    graph = nx.Graph()
    graph.add_nodes_from(range(n_frac))
    pairs = fractures.adjacency
    same_cell = fracture_cell[pairs[:, 0]] == fracture_cell[pairs[:, 1]]
    graph.add_edges_from(map(tuple, pairs[same_cell]))

    networks: List[List[np.ndarray]] = [[] for _ in range(n_coarse)]
    for component in sorted(nx.connected_components(graph), key=min):
        cells = np.array(sorted(component), dtype=int)
        networks[int(fracture_cell[cells[0]])].append(cells)

    fracture_network = np.empty(n_frac, dtype=int)
    network_lengths = []
    for cell_networks in networks:
        for k, cells in enumerate(cell_networks):
            fracture_network[cells] = k
        network_lengths.append(np.array([fractures.lengths[c].sum() for c in cell_networks]))

    num_networks = np.array([len(n) for n in networks], dtype=int)
    network_dof_offset = n_coarse + np.concatenate([[0], np.cumsum(num_networks)[:-1]]).astype(int)
    fracture_dof = network_dof_offset[fracture_cell] + fracture_network
    n_dofs = n_coarse + int(num_networks.sum())

    measures = np.concatenate([areas] + network_lengths)
    n_matrix = fine_mesh.n_cells
    rows = np.concatenate([cell_of_matrix, fracture_dof])
    cols = np.arange(n_matrix + n_frac)
    fine_measures = np.concatenate([fine_mesh.areas, fractures.lengths])
    values = fine_measures / measures[rows]
    averaging = sp.csr_matrix((values, (rows, cols)), shape=(n_dofs, n_matrix + n_frac))

    logger.info(f"Coarse grid {coarse_nx}x{coarse_ny}: {n_coarse} cells, {int(num_networks.sum())} local networks, "
                f"{n_dofs} coarse DOFs")
    return CoarseGrid(coarse_nx, coarse_ny, ratio_x, ratio_y, cell_of_matrix, members, areas,
                      fracture_cell, fracture_network, networks, network_lengths,
                      network_dof_offset, fracture_dof, averaging, measures, fine_measures)


@dataclass(frozen=True)
class OversampledRegion:
    """K_i+ : coarse cell ``center`` extended by ``layers`` rings of coarse cells"""
    center: int
    layers: int
    coarse_cells: np.ndarray
    matrix_cells: np.ndarray
    fracture_cells: np.ndarray
    n_fine_matrix: int

    @property
    def dofs(self) -> np.ndarray:
        """Global fine DOFs of the region, local order = matrix cells then fracture cells"""
        return np.concatenate([self.matrix_cells, self.n_fine_matrix + self.fracture_cells])

    @property
    def n_local_matrix(self) -> int:
        return len(self.matrix_cells)

    @property
    def n_local_fracture(self) -> int:
        return len(self.fracture_cells)

    @property
    def n_dofs(self) -> int:
        return self.n_local_matrix + self.n_local_fracture


def oversample(cg: CoarseGrid, center: int, layers: int) -> OversampledRegion:
    """All coarse cells within Chebyshev distance ``layers`` of ``center``, clipped to the grid"""
    if layers < 1:
        raise GeometryError(f"Oversampling layers must be at least 1, got {layers}")
    if not (0 <= center < cg.n_cells):
        raise GeometryError(f"Coarse cell {center} outside 0..{cg.n_cells - 1}")
    cx, cy = cg.position(center)
    xs = np.arange(max(0, cx - layers), min(cg.nx - 1, cx + layers) + 1)
    ys = np.arange(max(0, cy - layers), min(cg.ny - 1, cy + layers) + 1)
    coarse_cells = (ys[:, None] * cg.nx + xs[None, :]).ravel()

    matrix_cells = np.sort(np.concatenate([cg.members[j] for j in coarse_cells]))
    fracture_cells = np.flatnonzero(np.isin(cg.fracture_cell, coarse_cells))
    return OversampledRegion(center, layers, coarse_cells, matrix_cells, fracture_cells,
                             cg.n_fine_matrix)
