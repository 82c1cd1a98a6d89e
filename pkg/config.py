import math
import os
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import List, Dict, Any, Optional, Tuple

from dotenv import load_dotenv, dotenv_values

# Load environment variables
load_dotenv()

class ConfigError(ValueError):
    """Raised when a run configuration is missing keys or holds invalid values"""

class Config:
    """Process-level settings for the NLMC simulator"""

    # Logging Configuration
    LOG_LEVEL = os.getenv('NLMC_LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('NLMC_LOG_FILE', 'nlmc.log')

    # Output and parallelism
    OUTPUT_DIR = os.getenv('NLMC_OUTPUT_DIR', 'results')
    WORKERS = int(os.getenv('NLMC_WORKERS', '1'))

    # Linear solver acceptance
    LINEAR_RTOL = float(os.getenv('NLMC_LINEAR_RTOL', '1e-10'))
    BACKWARD_TOL = float(os.getenv('NLMC_BACKWARD_TOL', '1e-12'))
    REFINEMENT_STEPS = int(os.getenv('NLMC_REFINEMENT_STEPS', '3'))
    RESIDUAL_CAP = float(os.getenv('NLMC_RESIDUAL_CAP', '1e-2'))

    @classmethod
    def validate_config(cls) -> List[str]:
        """Validate configuration and return list of errors"""
        errors = []

        if cls.WORKERS < 1:
            errors.append("NLMC_WORKERS must be at least 1")
        if not (0 < cls.LINEAR_RTOL < 1):
            errors.append("NLMC_LINEAR_RTOL must be between 0 and 1")
        if not (0 < cls.BACKWARD_TOL < 1):
            errors.append("NLMC_BACKWARD_TOL must be between 0 and 1")
        if not (cls.LINEAR_RTOL <= cls.RESIDUAL_CAP < 1):
            errors.append("NLMC_RESIDUAL_CAP must be at least NLMC_LINEAR_RTOL and below 1")
        if cls.REFINEMENT_STEPS < 0:
            errors.append("NLMC_REFINEMENT_STEPS must be non-negative")

        return errors

    @classmethod
    def get_solver_params(cls) -> Dict[str, Any]:
        """Get linear solver acceptance parameters"""
        return {
            'rtol': cls.LINEAR_RTOL,
            'backward_tol': cls.BACKWARD_TOL,
            'refinement_steps': cls.REFINEMENT_STEPS,
            'residual_cap': cls.RESIDUAL_CAP,
        }


TESTCASE_KINDS = ('test1-like', 'test2-like')
REQUIRED_KEYS = ('fine_nx', 'fine_ny', 'coarse_grids')


@dataclass
class RunConfig:
    """One simulation setup: meshes, physics, time grid, inputs and outputs"""

    # Meshes
    fine_nx: int
    fine_ny: int
    coarse_grids: List[Tuple[int, int]]
    domain_lx: float = 1.0
    domain_ly: float = 1.0

    # Multiscale
    layers: int = 4

    # Physics
    forchheimer_c: float = 1e4
    mu: float = 8.0
    rho: float = 1.0
    c_m: float = 1.0
    c_f: float = 1.0
    k_f: float = 1e9
    initial_pressure: float = 0.0

    # Time grid
    tau: float = 12500.0
    n_steps: int = 100

    # Inputs
    permeability_file: Optional[str] = None
    fracture_file: Optional[str] = None
    testcase_kind: str = 'test1-like'
    seed: int = 0

    # Wells (-1 selects the fractured coarse cells nearest opposite corners)
    well_a: int = -1
    well_b: int = -1
    rate_a: float = 1e-3
    rate_b: float = -1e-3
    balance_wells: bool = True

    # Outputs
    output_dir: str = field(default_factory=lambda: Config.OUTPUT_DIR)
    snapshot_layers: List[int] = field(default_factory=list)
    workers: int = field(default_factory=lambda: Config.WORKERS)
    include_fractures_in_error: bool = True

    @property
    def coarse_nx(self) -> int:
        return self.coarse_grids[0][0]

    @property
    def coarse_ny(self) -> int:
        return self.coarse_grids[0][1]

    @property
    def extents(self) -> Tuple[float, float]:
        return (self.domain_lx, self.domain_ly)

    def resolved_snapshot_layers(self) -> List[int]:
        """Snapshot layers to store; defaults to the 30th, 60th and last layer"""
        if self.snapshot_layers:
            return sorted(set(self.snapshot_layers))
        candidates = {30, 60, self.n_steps}
        return sorted(n for n in candidates if 1 <= n <= self.n_steps)

    def validate(self) -> List[str]:
        """Validate the configuration and return list of errors"""
        errors = []

        if self.fine_nx < 1 or self.fine_ny < 1:
            errors.append("fine_nx and fine_ny must be at least 1")
        if not (0 < self.domain_lx < math.inf and 0 < self.domain_ly < math.inf):
            errors.append("domain_lx and domain_ly must be finite and positive")
        if not self.coarse_grids:
            errors.append("coarse_grids must list at least one grid")
        for nx, ny in self.coarse_grids:
            if nx < 1 or ny < 1:
                errors.append(f"coarse_grids entry {nx}x{ny} must be positive")
            elif self.fine_nx % nx or self.fine_ny % ny:
                errors.append(f"coarse_grids entry {nx}x{ny} does not divide fine grid "
                              f"{self.fine_nx}x{self.fine_ny}")
        if self.layers < 1:
            errors.append("layers must be at least 1")
        if not (0 <= self.forchheimer_c < math.inf):
            errors.append("forchheimer_c must be finite and non-negative")
        # comparisons with NaN are False, so test for the valid range
        for key in ('mu', 'rho', 'c_m', 'c_f', 'k_f', 'tau'):
            if not (0 < getattr(self, key) < math.inf):
                errors.append(f"{key} must be finite and positive")
        for key in ('initial_pressure', 'rate_a', 'rate_b'):
            if not math.isfinite(getattr(self, key)):
                errors.append(f"{key} must be finite")
        if self.n_steps < 1:
            errors.append("n_steps must be at least 1")
        if self.testcase_kind not in TESTCASE_KINDS:
            errors.append(f"testcase_kind must be one of {', '.join(TESTCASE_KINDS)}")
        if self.well_a >= 0 and self.well_a == self.well_b:
            errors.append("well_a and well_b must be different coarse cells")
        n_coarse = self.coarse_nx * self.coarse_ny if self.coarse_grids else 0
        for key in ('well_a', 'well_b'):
            if getattr(self, key) >= n_coarse:
                errors.append(f"{key} must be a coarse cell index below {n_coarse}")
        for layer in self.snapshot_layers:
            if not (0 <= layer <= self.n_steps):
                errors.append(f"snapshot_layers entry {layer} outside 0..{self.n_steps}")
        if self.workers < 1:
            errors.append("workers must be at least 1")

        return errors

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return asdict(self)

    def with_overrides(self, **changes) -> 'RunConfig':
        """Copy with some fields replaced, validated again"""
        updated = replace(self, **{k: v for k, v in changes.items() if v is not None})
        errors = updated.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        return updated


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_grids(value: str) -> List[Tuple[int, int]]:
    grids = []
    for token in value.split(','):
        token = token.strip().lower()
        if not token:
            continue
        nx, ny = token.split('x')
        grids.append((int(nx), int(ny)))
    return grids


def _parse_int_list(value: str) -> List[int]:
    return [int(token) for token in value.split(',') if token.strip()]


def _parse_optional_path(value: str) -> Optional[str]:
    return value.strip() or None


_PARSERS = {
    'fine_nx': int,
    'fine_ny': int,
    'coarse_grids': _parse_grids,
    'domain_lx': float,
    'domain_ly': float,
    'layers': int,
    'forchheimer_c': float,
    'mu': float,
    'rho': float,
    'c_m': float,
    'c_f': float,
    'k_f': float,
    'initial_pressure': float,
    'tau': float,
    'n_steps': int,
    'permeability_file': _parse_optional_path,
    'fracture_file': _parse_optional_path,
    'testcase_kind': str.strip,
    'seed': int,
    'well_a': int,
    'well_b': int,
    'rate_a': float,
    'rate_b': float,
    'balance_wells': _parse_bool,
    'output_dir': str.strip,
    'snapshot_layers': _parse_int_list,
    'workers': int,
    'include_fractures_in_error': _parse_bool,
}


def parse_config(path) -> RunConfig:
    """Parse a flat ``key = value`` run configuration and validate it (fail-fast)"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    raw = dotenv_values(path)
    errors = []

    unknown = sorted(set(raw) - set(_PARSERS))
    for key in unknown:
        errors.append(f"unknown key '{key}'")
    for key in REQUIRED_KEYS:
        if raw.get(key) in (None, ''):
            errors.append(f"missing required key '{key}'")

    values = {}
    for key, text in raw.items():
        if key not in _PARSERS or text is None:
            continue
        try:
            values[key] = _PARSERS[key](text)
        except ValueError as e:
            errors.append(f"invalid value for '{key}': {e}")

    if errors:
        raise ConfigError("; ".join(errors))

    run_config = RunConfig(**values)
    errors = run_config.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    return run_config
