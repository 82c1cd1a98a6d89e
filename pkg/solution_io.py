"""
Solution export: full-precision CSV tables and legacy ASCII VTK files
"""
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd
import vtk
from vtk.util import numpy_support

from geometry import FracturedMesh

logger = logging.getLogger(__name__)

SOLUTION_COLUMNS = ['cell_type', 'index', 'x', 'y', 'value']
FORMATS = ('csv', 'vtk')
FLOAT_FORMAT = '%.17g'
VTK_FILE_VERSION = 42
_LAYER_PATTERN = re.compile(r'^layer_(\d+)\.csv$')


def solution_frame(values: np.ndarray, mesh: FracturedMesh) -> pd.DataFrame:
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_dofs,):
        raise ValueError(f"Solution has shape {values.shape}, expected ({mesh.n_dofs},)")
    positions = mesh.positions
    return pd.DataFrame({
        'cell_type': ['m'] * mesh.n_matrix + ['f'] * mesh.n_fracture,
        'index': np.concatenate([np.arange(mesh.n_matrix), np.arange(mesh.n_fracture)]),
        'x': positions[:, 0],
        'y': positions[:, 1],
        'value': values,
    }, columns=SOLUTION_COLUMNS)


def _write_csv(values: np.ndarray, mesh: FracturedMesh, path: Path) -> Path:
    solution_frame(values, mesh).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _vtk_array(values: np.ndarray, name: str):
    array = numpy_support.numpy_to_vtk(np.ascontiguousarray(values, dtype=np.float64), deep=1)
    array.SetNumberOfComponents(1)
    array.SetName(name)
    return array


def _check_writer(writer, path: Path) -> None:
    if writer.GetErrorCode() != 0:
        raise OSError(f"VTK writer failed for {path} (error code {writer.GetErrorCode()})")


def _write_vtk(values: np.ndarray, mesh: FracturedMesh, path: Path, name: str) -> Path:
    """Matrix field as structured points at cell centres, fractures as line polydata"""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_dofs,):
        raise ValueError(f"Solution has shape {values.shape}, expected ({mesh.n_dofs},)")
    fine = mesh.fine

    grid = vtk.vtkStructuredPoints()
    grid.SetDimensions(fine.nx, fine.ny, 1)
    grid.SetOrigin(0.5 * fine.hx, 0.5 * fine.hy, 0.0)
    grid.SetSpacing(fine.hx, fine.hy, 1.0)
    grid.GetPointData().AddArray(_vtk_array(values[:mesh.n_matrix], name))
    grid.GetPointData().SetActiveScalars(name)

    writer = vtk.vtkStructuredPointsWriter()
    writer.SetFileName(str(path))
    writer.SetFileVersion(VTK_FILE_VERSION)
    writer.SetFileTypeToASCII()
    writer.SetInputData(grid)
    writer.Write()
    _check_writer(writer, path)

    if mesh.n_fracture:
        points = vtk.vtkPoints()
        lines = vtk.vtkCellArray()
        for a, b in mesh.fractures.endpoints:
            line = vtk.vtkLine()
            line.GetPointIds().SetId(0, points.InsertNextPoint(a[0], a[1], 0.0))
            line.GetPointIds().SetId(1, points.InsertNextPoint(b[0], b[1], 0.0))
            lines.InsertNextCell(line)
        poly = vtk.vtkPolyData()
        poly.SetPoints(points)
        poly.SetLines(lines)
        poly.GetCellData().AddArray(_vtk_array(values[mesh.n_matrix:], name))
        poly.GetCellData().SetActiveScalars(name)

        fracture_path = path.with_name(f"{path.stem}_fractures.vtk")
        poly_writer = vtk.vtkPolyDataWriter()
        poly_writer.SetFileName(str(fracture_path))
        poly_writer.SetFileVersion(VTK_FILE_VERSION)
        poly_writer.SetFileTypeToASCII()
        poly_writer.SetInputData(poly)
        poly_writer.Write()
        _check_writer(poly_writer, fracture_path)
    return path


def write_solution(values: np.ndarray, mesh: FracturedMesh, path, fmt: str = 'csv',
                   name: str = 'pressure') -> Path:
    """Write a fine pressure vector (p_m, p_f); vtk also writes ``<stem>_fractures.vtk``"""
    if fmt not in FORMATS:
        raise ValueError(f"Unknown solution format '{fmt}', expected one of {', '.join(FORMATS)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == 'csv':
        return _write_csv(values, mesh, path)
    return _write_vtk(values, mesh, path, name)


def read_solution_csv(path, mesh: FracturedMesh = None) -> np.ndarray:
    """Inverse of the CSV writer: matrix values then fracture values, each by index"""
    frame = pd.read_csv(path, dtype={'cell_type': str}, float_precision='round_trip')
    missing = set(SOLUTION_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path} lacks columns {sorted(missing)}")
    matrix = frame[frame['cell_type'] == 'm'].sort_values('index')
    fracture = frame[frame['cell_type'] == 'f'].sort_values('index')
    values = np.concatenate([matrix['value'].to_numpy(float), fracture['value'].to_numpy(float)])
    if mesh is not None and (len(matrix) != mesh.n_matrix or len(fracture) != mesh.n_fracture):
        raise ValueError(f"{path} holds {len(matrix)} matrix and {len(fracture)} fracture values, "
                         f"mesh has {mesh.n_matrix} and {mesh.n_fracture}")
    return values


def diagnostics_frame(diagnostics: Sequence, include_timings: bool = False) -> pd.DataFrame:
    """Per-layer step diagnostics flattened with their linear-solve reports; wall times only on request"""
    rows = []
    for step in diagnostics:
        row = {key: value for key, value in vars(step).items()
               if key != 'solve' and (include_timings or not key.endswith('_seconds'))}
        row.update(relative_residual=step.solve.relative_residual,
                   backward_error=step.solve.backward_error,
                   refinement_steps=step.solve.refinement_steps,
                   accepted_by=step.solve.accepted_by)
        rows.append(row)
    return pd.DataFrame(rows)


def write_diagnostics(diagnostics: Sequence, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diagnostics_frame(diagnostics).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def snapshot_path(directory, layer: int, fmt: str = 'csv') -> Path:
    return Path(directory) / f"layer_{layer:04d}.{fmt}"


def write_snapshots(layers: Mapping[int, np.ndarray], mesh: FracturedMesh, directory,
                    formats: Iterable[str] = ('csv',), name: str = 'pressure') -> Dict[int, List[Path]]:
    """One file per layer and format"""
    written = {}
    for layer in sorted(layers):
        written[layer] = [write_solution(layers[layer], mesh, snapshot_path(directory, layer, fmt), fmt, name)
                          for fmt in formats]
    logger.info(f"Wrote {len(written)} snapshot layers to {directory}")
    return written


def list_snapshots(directory) -> Dict[int, Path]:
    """CSV snapshots in a directory keyed by layer"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"Snapshot directory not found: {directory}")
    found = {}
    for path in directory.iterdir():
        match = _LAYER_PATTERN.match(path.name)
        if match:
            found[int(match.group(1))] = path
    return dict(sorted(found.items()))
