"""
Error norms between a fine reference and a downscaled multiscale solution
"""
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from geometry import CoarseGrid

logger = logging.getLogger(__name__)

SERIES_COLUMNS = ['layer', 'e_l2', 'ebar_l2']
FLOAT_FORMAT = '%.17g'


class MetricsError(ValueError):
    """Raised for mismatched vector sizes or a vanishing reference norm"""


@dataclass
class ErrorRecord:
    layer: int
    e_l2: float
    ebar_l2: float

    def as_percent(self) -> Dict[str, float]:
        return {'e_l2_pct': 100.0 * self.e_l2, 'ebar_l2_pct': 100.0 * self.ebar_l2}


def coarse_average(p: np.ndarray, cg: CoarseGrid) -> np.ndarray:
    """Measure-weighted means per coarse cell (matrix) and per local network (fracture)"""
    p = np.asarray(p, dtype=float)
    if p.shape != (cg.averaging.shape[1],):
        raise MetricsError(f"Fine vector has shape {p.shape}, expected ({cg.averaging.shape[1]},)")
    return cg.averaging @ p


def _relative_l2(reference: np.ndarray, approx: np.ndarray, weights: np.ndarray, what: str) -> float:
    ref_norm = float(np.sqrt(np.sum(weights * reference ** 2)))
    if ref_norm == 0.0:
        raise MetricsError(f"Reference {what} norm is zero")
    return float(np.sqrt(np.sum(weights * (reference - approx) ** 2))) / ref_norm


def l2_errors(p_ref: np.ndarray, p_ms: np.ndarray, cg: CoarseGrid, layer: int = 0,
              include_fractures: bool = True) -> ErrorRecord:
    """Relative L2 errors of the fine fields (e) and of their coarse averages (e_bar)"""
    p_ref = np.asarray(p_ref, dtype=float)
    p_ms = np.asarray(p_ms, dtype=float)
    if p_ref.shape != p_ms.shape:
        raise MetricsError(f"Compared vectors differ in shape: {p_ref.shape} vs {p_ms.shape}")
    avg_ref = coarse_average(p_ref, cg)
    avg_ms = coarse_average(p_ms, cg)

    fine_w, coarse_w = cg.fine_measures, cg.measures
    if not include_fractures:
        n_fine, n_coarse = cg.n_fine_matrix, cg.n_cells
        p_ref, p_ms, fine_w = p_ref[:n_fine], p_ms[:n_fine], fine_w[:n_fine]
        avg_ref, avg_ms, coarse_w = avg_ref[:n_coarse], avg_ms[:n_coarse], coarse_w[:n_coarse]

    return ErrorRecord(layer=layer,
                       e_l2=_relative_l2(p_ref, p_ms, fine_w, 'fine'),
                       ebar_l2=_relative_l2(avg_ref, avg_ms, coarse_w, 'coarse-average'))


def error_series(reference: Sequence[np.ndarray], multiscale: Sequence[np.ndarray], cg: CoarseGrid,
                 layers: Optional[Sequence[int]] = None,
                 include_fractures: bool = True) -> List[ErrorRecord]:
    """Errors per layer; by default layers 1..N (layer 0 is the shared initial state)"""
    if len(reference) != len(multiscale):
        raise MetricsError(f"Series lengths differ: {len(reference)} vs {len(multiscale)}")
    if layers is None:
        layers = range(1, len(reference))
    return [l2_errors(reference[n], multiscale[n], cg, n, include_fractures) for n in layers]


def series_frame(records: Sequence[ErrorRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=SERIES_COLUMNS)


def write_error_series(records: Sequence[ErrorRecord], path) -> None:
    series_frame(records).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_error_series(path) -> List[ErrorRecord]:
    frame = pd.read_csv(path, float_precision='round_trip')
    missing = set(SERIES_COLUMNS) - set(frame.columns)
    if missing:
        raise MetricsError(f"{path} lacks columns {sorted(missing)}")
    return [ErrorRecord(int(row.layer), float(row.e_l2), float(row.ebar_l2))
            for row in frame.itertuples(index=False)]


def summary_frame(final_errors: Dict[tuple, ErrorRecord], layers: Sequence[int],
                  grid_labels: Sequence[str]) -> pd.DataFrame:
    """One row per S; e and e_bar per coarse grid, as fractions.

    ``final_errors`` is keyed by (grid label, S).
    """
    rows = []
    for s in layers:
        row = {'S': s}
        for label in grid_labels:
            record = final_errors.get((label, s))
            row[f'e_{label}'] = record.e_l2 if record else np.nan
            row[f'ebar_{label}'] = record.ebar_l2 if record else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def percent_frame(summary: pd.DataFrame) -> pd.DataFrame:
    """The same table with error columns in percent, the unit of the printed tables"""
    frame = summary.copy()
    errors = [c for c in frame.columns if c != 'S']
    frame[errors] = 100.0 * frame[errors]
    return frame


def write_summary(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Summary written to {path}")
