#!/usr/bin/env python3
"""
NLMC - multiscale simulation of Darcy-Forchheimer flow in fractured porous media

Subcommands: gen (synthetic test case), fine (reference run), basis (offline stage),
nlmc (multiscale run), compare (error tables from two snapshot sets), sweep (S x C matrix).
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from coarse_solver import CoarseSolver
from config import Config, ConfigError, RunConfig, parse_config
from fine_solver import FineSolver
from geometry import build_fine_mesh
from logger import setup_logging, get_logger
from metrics import l2_errors, percent_frame, write_error_series
from nlmc_basis import BasisBuilder, export_basis
from solution_io import list_snapshots, read_solution_csv, write_diagnostics, write_snapshots
from sparse_linalg import dump_matrix
from sweep import ExperimentSweep
from testcase import generate_testcase, prepare_case, write_field, write_fractures

logger = get_logger('nlmc.main')

SOLUTION_FORMATS = ('csv', 'vtk')


def _int_list(text: str) -> List[int]:
    try:
        return [int(token) for token in text.split(',') if token.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(token) for token in text.split(',') if token.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _single(values: Optional[List], flag: str, default):
    if values is None:
        return default
    if len(values) != 1:
        raise ConfigError(f"{flag} takes one value for this subcommand, got {values}")
    return values[0]


def load_run_config(args) -> RunConfig:
    """Config file with command-line overrides applied (single-run subcommands)"""
    run_config = parse_config(args.config)
    overrides = {'output_dir': args.out, 'seed': args.seed}
    if args.command != 'sweep':
        overrides['layers'] = _single(args.layers, '--layers', None)
        overrides['forchheimer_c'] = _single(args.forchheimer, '--forchheimer', None)
    return run_config.with_overrides(**overrides)


def cmd_gen(args, rc: RunConfig) -> None:
    fine = build_fine_mesh(rc.fine_nx, rc.fine_ny, rc.extents)
    case = generate_testcase(rc.seed, rc.testcase_kind, fine)
    out = Path(rc.output_dir)
    field_path = write_field(case.k_matrix, fine.nx, fine.ny, out / 'permeability.txt')
    fracture_path = write_fractures(case.polylines, out / 'fractures.txt')
    print(f"{case.kind} (seed {rc.seed}): contrast {case.contrast:.3e}, {len(case.polylines)} fractures")
    print(f"  {field_path}\n  {fracture_path}")


def cmd_fine(args, rc: RunConfig) -> None:
    setup = prepare_case(rc)
    solver = FineSolver(setup.mesh, setup.medium(), setup.fluid, setup.sources)
    run = solver.run(rc.initial_pressure, setup.time_grid, snapshot_layers=rc.resolved_snapshot_layers())

    out = Path(rc.output_dir) / f"fine_C{rc.forchheimer_c:g}"
    write_snapshots({n: s.values for n, s in run.snapshots.items()}, setup.mesh, out, SOLUTION_FORMATS)
    write_diagnostics(run.diagnostics, out / 'diagnostics.csv')
    print(f"Fine run: {setup.mesh.n_dofs} DOFs, {rc.n_steps} layers in {run.wall_seconds:.2f}s, "
          f"max mass defect {run.max_mass_defect:.2e}")
    print(f"Output: {out}")


def _build_bases(setup, rc: RunConfig):
    cg = setup.primary_grid
    return BasisBuilder(setup.mesh, cg, setup.medium(), setup.fluid).build(rc.layers, rc.workers)


def cmd_basis(args, rc: RunConfig) -> None:
    setup = prepare_case(rc)
    basis_set = _build_bases(setup, rc)
    cg = basis_set.coarse_grid

    out = Path(rc.output_dir) / f"basis_{cg.label}_S{rc.layers}"
    for basis in basis_set.bases:
        export_basis(basis, out / f"basis_{basis.cell:04d}_{basis.continuum}.txt")
    dump_matrix(basis_set.projection, out / 'R.txt')
    print(f"Bases on {cg.label}, S={rc.layers}: {basis_set.n_coarse_dofs} coarse DOFs "
          f"({cg.n_cells} matrix + {basis_set.n_coarse_dofs - cg.n_cells} fracture), "
          f"built in {basis_set.build_seconds:.2f}s, max constraint residual {basis_set.max_constraint_residual:.1e}")
    print(f"Output: {out}")


def cmd_nlmc(args, rc: RunConfig) -> None:
    setup = prepare_case(rc)
    basis_set = _build_bases(setup, rc)
    solver = CoarseSolver(setup.mesh, setup.medium(), setup.fluid, setup.sources, basis_set)
    p_bar0 = np.full(basis_set.n_coarse_dofs, rc.initial_pressure)
    run = solver.run_ms(setup.time_grid, p_bar0, snapshot_layers=rc.resolved_snapshot_layers())

    out = Path(rc.output_dir) / f"nlmc_{basis_set.coarse_grid.label}_S{rc.layers}_C{rc.forchheimer_c:g}"
    write_snapshots({n: s.fine for n, s in run.snapshots.items()}, setup.mesh, out, SOLUTION_FORMATS, name='p_ms')
    write_diagnostics(run.diagnostics, out / 'diagnostics.csv')
    _, coarse = solver.blocks(solver.assembler.zero_velocities())
    dump_matrix(basis_set.projection, out / 'R.txt')
    dump_matrix(coarse.M, out / 'coarse_M.txt')
    dump_matrix(coarse.A, out / 'coarse_A.txt')
    dump_matrix(coarse.Q, out / 'coarse_Q.txt')
    print(f"NLMC run: {basis_set.n_coarse_dofs} coarse DOFs, {rc.n_steps} layers in {run.wall_seconds:.2f}s "
          f"(mean step {run.mean_step_seconds * 1e3:.2f} ms), max mass defect {run.max_fine_mass_defect:.2e}")
    print(f"Output: {out}")


def cmd_compare(args, rc: RunConfig) -> None:
    if not args.reference or not args.multiscale:
        raise ConfigError("compare needs --reference and --multiscale snapshot directories")
    setup = prepare_case(rc)
    grid = args.grid or setup.primary_grid.label
    if grid not in setup.coarse_grids:
        raise ConfigError(f"Unknown coarse grid '{grid}', configured: {', '.join(setup.coarse_grids)}")
    cg = setup.coarse_grids[grid]

    reference = list_snapshots(args.reference)
    multiscale = list_snapshots(args.multiscale)
    layers = sorted(n for n in set(reference) & set(multiscale) if n > 0)
    if not layers:
        raise ConfigError(f"No common snapshot layers in {args.reference} and {args.multiscale}")

    records = [l2_errors(read_solution_csv(reference[n], setup.mesh),
                         read_solution_csv(multiscale[n], setup.mesh),
                         cg, n, rc.include_fractures_in_error)
               for n in layers]
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_error_series(records, out / 'errors.csv')
    for record in records:
        print(f"layer {record.layer:4d}: e = {100 * record.e_l2:.4f}%, ebar = {100 * record.ebar_l2:.4f}%")
    print(f"Output: {out / 'errors.csv'}")


def cmd_sweep(args, rc: RunConfig) -> None:
    setup = prepare_case(rc)
    sweep = ExperimentSweep(setup, force=args.force)
    result = sweep.run_sweep(args.layers, args.forchheimer)
    for forchheimer_c, summary in result.summaries.items():
        print(f"\nC = {forchheimer_c:g} (errors in %)")
        print(percent_frame(summary).to_string(index=False))
    print(f"\n{result.fine_runs} fine runs, {result.multiscale_runs} multiscale runs; output: {sweep.output_dir}")


COMMANDS = {
    'gen': cmd_gen,
    'fine': cmd_fine,
    'basis': cmd_basis,
    'nlmc': cmd_nlmc,
    'compare': cmd_compare,
    'sweep': cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='Run configuration file (key = value)')
    common.add_argument('--layers', type=_int_list, help='Oversampling layers S (comma list for sweep)')
    common.add_argument('--forchheimer', type=_float_list, help='Forchheimer scale C (comma list for sweep)')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--seed', type=int, help='Test case generator seed')
    common.add_argument('--force', action='store_true', help='Recompute sweep cells whose outputs exist')
    common.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Set logging level')

    parser = argparse.ArgumentParser(description='NLMC - Darcy-Forchheimer flow in fractured porous media')
    subparsers = parser.add_subparsers(dest='command', required=True)
    subparsers.add_parser('gen', parents=[common], help='Generate a synthetic test case')
    subparsers.add_parser('fine', parents=[common], help='Fine-grid reference run')
    subparsers.add_parser('basis', parents=[common], help='Build and export multiscale bases')
    subparsers.add_parser('nlmc', parents=[common], help='Multiscale run')
    compare = subparsers.add_parser('compare', parents=[common], help='Error tables from two snapshot sets')
    compare.add_argument('--reference', help='Snapshot directory of the fine reference')
    compare.add_argument('--multiscale', help='Snapshot directory of the multiscale run')
    compare.add_argument('--grid', help='Coarse grid label for averaging, e.g. 20x20')
    subparsers.add_parser('sweep', parents=[common], help='Full S x C experiment matrix')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        setup_logging(log_level=args.log_level)
        config_errors = Config.validate_config()
        if config_errors:
            raise ConfigError("; ".join(config_errors))

        run_config = load_run_config(args)
        logger.info(f"Running '{args.command}' with {args.config}")
        logger.debug(f"Run configuration: {run_config.to_dict()}")
        COMMANDS[args.command](args, run_config)

    except KeyboardInterrupt:
        print("\nStopped by user")
        sys.exit(1)
    except Exception as e:
        logger.error(f"'{args.command}' failed: {e}")
        print(f"Error: {e}")
        sys.exit(1)
    return 0


if __name__ == "__main__":
    main()
