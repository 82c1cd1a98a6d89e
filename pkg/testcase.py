"""
Test-case inputs: permeability fields, fracture polylines, synthetic generators and wells
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from config import RunConfig, TESTCASE_KINDS
from fine_solver import TimeGrid
from fvm_assembly import FluidParams, MediumParams, SourceTerms
from geometry import CoarseGrid, FineMesh, FracturedMesh, build_coarse_grid, build_fine_mesh, build_fractured_mesh

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'

# Generator constants
MIN_FRACTURES = 10
MAX_FRACTURES = 30
CHAIN_PROBABILITY = 0.3
FRACTURE_MARGIN = 0.02


class TestCaseError(ValueError):
    """Raised for malformed field or fracture files and unusable well placements"""

    __test__ = False


@dataclass
class TestCase:
    """Matrix permeability (row-major, one value per fine cell) and fracture polylines"""
    kind: str
    seed: Optional[int]
    k_matrix: np.ndarray
    polylines: List[np.ndarray]

    __test__ = False

    @property
    def contrast(self) -> float:
        return float(self.k_matrix.max() / self.k_matrix.min())


def read_field(path, nx: Optional[int] = None, ny: Optional[int] = None) -> np.ndarray:
    """Read ``nx ny`` on the first line followed by nx*ny row-major values"""
    path = Path(path)
    try:
        tokens = path.read_text().split()
    except OSError as e:
        raise TestCaseError(f"Cannot read permeability field {path}: {e}")
    if len(tokens) < 2:
        raise TestCaseError(f"{path}: missing 'nx ny' header")
    try:
        file_nx, file_ny = int(tokens[0]), int(tokens[1])
        values = np.array([float(t) for t in tokens[2:]])
    except ValueError as e:
        raise TestCaseError(f"{path}: {e}")
    if (nx is not None and file_nx != nx) or (ny is not None and file_ny != ny):
        raise TestCaseError(f"{path}: field is {file_nx}x{file_ny}, mesh is {nx}x{ny}")
    if len(values) != file_nx * file_ny:
        raise TestCaseError(f"{path}: expected {file_nx * file_ny} values, found {len(values)}")
    if np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise TestCaseError(f"{path}: permeability must be finite and positive")
    return values


def write_field(values: np.ndarray, nx: int, ny: int, path) -> Path:
    values = np.asarray(values, dtype=float)
    if values.shape != (nx * ny,):
        raise TestCaseError(f"Field has shape {values.shape}, expected ({nx * ny},)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, values, fmt=FLOAT_FORMAT, header=f"{nx} {ny}", comments='')
    return path


def read_fractures(path) -> List[np.ndarray]:
    """One segment ``x1 y1 x2 y2`` per line; ``#`` starts a comment"""
    path = Path(path)
    if not path.is_file():
        raise TestCaseError(f"Fracture file not found: {path}")
    try:
        data = np.loadtxt(path, comments='#', ndmin=2)
    except ValueError as e:
        raise TestCaseError(f"{path}: {e}")
    if data.size == 0:
        return []
    if data.shape[1] != 4:
        raise TestCaseError(f"{path}: expected 4 columns per segment, found {data.shape[1]}")
    return [row.reshape(2, 2) for row in data]


def write_fractures(polylines: Sequence, path) -> Path:
    """Write every polyline as its consecutive segments"""
    rows = []
    for polyline in polylines:
        points = np.asarray(polyline, dtype=float).reshape(-1, 2)
        rows.extend(np.hstack([a, b]) for a, b in zip(points[:-1], points[1:]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.array(rows).reshape(-1, 4), fmt=FLOAT_FORMAT, header='x1 y1 x2 y2')
    return path


def _smooth_noise(rng: np.random.Generator, mesh: FineMesh, correlation: float) -> np.ndarray:
    """Gaussian-filtered white noise scaled into [-1, 1], shape (ny, nx)"""
    noise = rng.standard_normal((mesh.ny, mesh.nx))
    sigma = (correlation * mesh.ny / mesh.ly, correlation * mesh.nx / mesh.lx)
    field = gaussian_filter(noise, sigma=sigma, mode='reflect')
    field -= field.mean()
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _smooth_field(rng: np.random.Generator, mesh: FineMesh) -> np.ndarray:
    # log10 k in [-1, 1]
    return 10.0 ** _smooth_noise(rng, mesh, correlation=0.05)


def _channel_field(rng: np.random.Generator, mesh: FineMesh) -> np.ndarray:
    """Sinuous high-permeability channels in a tight background; max/min >= 1e4"""
    variation = 0.25 * _smooth_noise(rng, mesh, correlation=0.03)
    x = mesh.centroids[:, 0].reshape(mesh.ny, mesh.nx)
    y = mesh.centroids[:, 1].reshape(mesh.ny, mesh.nx)
    half_width = max(1.5 * mesh.hy, 0.015 * mesh.ly)

    channel = np.zeros((mesh.ny, mesh.nx), dtype=bool)
    for _ in range(int(rng.integers(3, 7))):
        center = rng.uniform(0.1, 0.9) * mesh.ly
        amplitude = rng.uniform(0.02, 0.1) * mesh.ly
        wavenumber = 2.0 * np.pi * rng.uniform(1.0, 3.0) / mesh.lx
        phase = rng.uniform(0.0, 2.0 * np.pi)
        channel |= np.abs(y - center - amplitude * np.sin(wavenumber * x + phase)) <= half_width

    log_k = np.where(channel, 2.0, -3.0) + variation
    return 10.0 ** log_k


def _random_polylines(rng: np.random.Generator, mesh: FineMesh) -> List[np.ndarray]:
    """Straight fractures; some start at the previous fracture's end to form larger networks"""
    lo = np.array([FRACTURE_MARGIN * mesh.lx, FRACTURE_MARGIN * mesh.ly])
    hi = np.array([(1 - FRACTURE_MARGIN) * mesh.lx, (1 - FRACTURE_MARGIN) * mesh.ly])
    scale = min(mesh.lx, mesh.ly)

    polylines: List[np.ndarray] = []
    for _ in range(int(rng.integers(MIN_FRACTURES, MAX_FRACTURES + 1))):
        length = rng.uniform(0.1, 0.3) * scale
        angle = rng.uniform(0.0, np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        if polylines and rng.random() < CHAIN_PROBABILITY:
            start = polylines[-1][-1].copy()
        else:
            start = rng.uniform(lo, hi)
        end = np.clip(start + length * direction, lo, hi)
        if np.hypot(*(end - start)) < 0.05 * scale:
            end = np.clip(start - length * direction, lo, hi)
        polylines.append(np.vstack([start, end]))
    return polylines


def generate_testcase(seed: int, kind: str, fine_mesh: FineMesh) -> TestCase:
    """Deterministic synthetic permeability and fractures for a given seed"""
    if kind not in TESTCASE_KINDS:
        raise TestCaseError(f"Unknown test case kind '{kind}', expected one of {', '.join(TESTCASE_KINDS)}")
    rng = np.random.default_rng(seed)
    field = _smooth_field(rng, fine_mesh) if kind == 'test1-like' else _channel_field(rng, fine_mesh)
    polylines = _random_polylines(rng, fine_mesh)
    case = TestCase(kind, seed, field.ravel(), polylines)
    logger.info(f"Generated {kind} case (seed {seed}): contrast {case.contrast:.2e}, "
                f"{len(polylines)} fractures")
    return case


def build_medium(mesh: FracturedMesh, k_matrix: np.ndarray, k_f: float, forchheimer_c: float,
                 c_m: float = 1.0, c_f: float = 1.0) -> MediumParams:
    """Constant fracture permeability, beta = C / k everywhere"""
    medium = MediumParams.from_forchheimer_scale(k_matrix, np.full(mesh.n_fracture, float(k_f)),
                                                 forchheimer_c, c_m, c_f)
    medium.validate(mesh)
    return medium


def default_wells(cg: CoarseGrid, fine_mesh: FineMesh) -> Tuple[int, int]:
    """Fractured coarse cells nearest the lower-left and upper-right corners"""
    fractured = np.flatnonzero(cg.num_networks > 0)
    if len(fractured) < 2:
        raise TestCaseError(f"Need two fractured coarse cells for wells, grid {cg.label} has {len(fractured)}")
    centers = np.array([cg.center(j, fine_mesh) for j in fractured])
    well_a = int(fractured[np.argmin(np.hypot(*centers.T))])
    far = np.hypot(centers[:, 0] - fine_mesh.lx, centers[:, 1] - fine_mesh.ly)
    far[fractured == well_a] = np.inf
    well_b = int(fractured[np.argmin(far)])
    return well_a, well_b


def build_well_sources(mesh: FracturedMesh, cg: CoarseGrid, well_a: int, well_b: int,
                       rate_a: float, rate_b: float, balance: bool = True) -> SourceTerms:
    """Sources on every fracture cell inside coarse cells A and B"""
    if well_a == well_b:
        raise TestCaseError(f"Well cells must differ, both are {well_a}")
    in_a = cg.fracture_cell == well_a
    in_b = cg.fracture_cell == well_b
    for name, cell, mask in (('A', well_a, in_a), ('B', well_b, in_b)):
        if not mask.any():
            raise TestCaseError(f"Well {name}: coarse cell {cell} contains no fracture cells")

    length_a = float(mesh.fractures.lengths[in_a].sum())
    length_b = float(mesh.fractures.lengths[in_b].sum())
    if balance:
        rate_b = -rate_a * length_a / length_b
    fracture = np.zeros(mesh.n_fracture)
    fracture[in_a] = rate_a
    fracture[in_b] = rate_b
    logger.info(f"Wells: A=cell {well_a} (f={rate_a:.3e}, |gamma|={length_a:.4f}), "
                f"B=cell {well_b} (f={rate_b:.3e}, |gamma|={length_b:.4f}), "
                f"net {rate_a * length_a + rate_b * length_b:.2e}")
    return SourceTerms(np.zeros(mesh.n_matrix), fracture)


@dataclass
class CaseSetup:
    """Everything a run needs besides the Forchheimer scale and the oversampling"""
    run_config: RunConfig
    case: TestCase
    mesh: FracturedMesh
    coarse_grids: Dict[str, CoarseGrid]
    fluid: FluidParams
    sources: SourceTerms
    wells: Tuple[int, int]

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.run_config.tau, self.run_config.n_steps)

    @property
    def primary_grid(self) -> CoarseGrid:
        return next(iter(self.coarse_grids.values()))

    def medium(self, forchheimer_c: Optional[float] = None) -> MediumParams:
        rc = self.run_config
        c = rc.forchheimer_c if forchheimer_c is None else forchheimer_c
        return build_medium(self.mesh, self.case.k_matrix, rc.k_f, c, rc.c_m, rc.c_f)


def load_testcase(run_config: RunConfig) -> TestCase:
    """Files from the config when given, generated from the seed otherwise"""
    fine = build_fine_mesh(run_config.fine_nx, run_config.fine_ny, run_config.extents)
    generated = None
    if run_config.permeability_file is None or run_config.fracture_file is None:
        generated = generate_testcase(run_config.seed, run_config.testcase_kind, fine)

    if run_config.permeability_file is not None:
        k_matrix = read_field(run_config.permeability_file, fine.nx, fine.ny)
    else:
        k_matrix = generated.k_matrix
    if run_config.fracture_file is not None:
        polylines = read_fractures(run_config.fracture_file)
    else:
        polylines = generated.polylines
    seed = None if generated is None else run_config.seed
    return TestCase(run_config.testcase_kind, seed, k_matrix, polylines)


def prepare_case(run_config: RunConfig) -> CaseSetup:
    """Meshes, coarse grids and well sources; wells are placed on the first coarse grid"""
    case = load_testcase(run_config)
    mesh = build_fractured_mesh(run_config.fine_nx, run_config.fine_ny, run_config.extents, case.polylines)
    grids = {}
    for coarse_nx, coarse_ny in run_config.coarse_grids:
        cg = build_coarse_grid(mesh.fine, mesh.fractures, coarse_nx, coarse_ny)
        grids[cg.label] = cg
    primary = next(iter(grids.values()))

    well_a, well_b = run_config.well_a, run_config.well_b
    if well_a < 0 or well_b < 0:
        default_a, default_b = default_wells(primary, mesh.fine)
        well_a = default_a if well_a < 0 else well_a
        well_b = default_b if well_b < 0 else well_b
    sources = build_well_sources(mesh, primary, well_a, well_b, run_config.rate_a, run_config.rate_b,
                                 balance=run_config.balance_wells)
    fluid = FluidParams(mu=run_config.mu, rho=run_config.rho)
    return CaseSetup(run_config, case, mesh, grids, fluid, sources, (well_a, well_b))
