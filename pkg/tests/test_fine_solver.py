import pytest
import os
import sys
import logging
from unittest.mock import patch
import numpy as np
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from fine_solver import FineRun, FineSolver, MassBalanceError, PressureState, TimeGrid
from fvm_assembly import FaceVelocities, FluidParams, MediumParams, SourceTerms, SystemBlocks
from geometry import build_fractured_mesh
from sparse_linalg import Factorization

POLYLINES = [[(0.05, 0.3), (0.95, 0.6)], [(0.2, 0.9), (0.6, 0.15)]]


def fractured_case(forchheimer_c=1e4, n=8, k_f=1e2):
    mesh = build_fractured_mesh(n, n, (1.0, 1.0), POLYLINES)
    rng = np.random.default_rng(5)
    medium = MediumParams.from_forchheimer_scale(10.0 ** rng.uniform(-1.0, 1.0, mesh.n_matrix),
                                                 np.full(mesh.n_fracture, k_f), forchheimer_c)
    return mesh, medium


def well_sources(mesh, rate=1.0):
    fracture = np.zeros(mesh.n_fracture)
    fracture[0] = rate / mesh.fractures.lengths[0]
    fracture[-1] = -rate / mesh.fractures.lengths[-1]
    return SourceTerms(np.zeros(mesh.n_matrix), fracture)


class TestTimeGrid:

    def test_final_time(self):
        """Test T_max = N tau for the reference grid"""
        assert TimeGrid(12500.0, 100).t_max == 1.25e6

    @pytest.mark.parametrize('tau,n_steps', [(0.0, 10), (-1.0, 10), (1.0, 0)])
    def test_invalid(self, tau, n_steps):
        """Test non-positive step sizes and counts"""
        with pytest.raises(ValueError):
            TimeGrid(tau, n_steps)


class TestFineSolver:

    def test_single_cell_source(self):
        """Test p^1 = 1 for c = 1, f = 2, tau = 0.5 on one cell"""
        mesh = build_fractured_mesh(1, 1, (1.0, 1.0), [])
        medium = MediumParams.from_forchheimer_scale([1.0], [], 0.0)
        solver = FineSolver(mesh, medium, FluidParams(), SourceTerms(np.array([2.0]), np.zeros(0)))
        run = solver.run(0.0, TimeGrid(0.5, 1))
        assert run.final.values[0] == pytest.approx(1.0, rel=1e-14)

    def test_constant_state_is_steady(self):
        """Test a uniform pressure without sources stays put"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), SourceTerms.zeros(mesh))
        run = solver.run(5.0, TimeGrid(1.0, 5))
        assert np.allclose(run.final.values, 5.0, rtol=1e-10, atol=0)

    def test_mass_balance_every_layer(self):
        """Test the discrete conservation defect at every layer"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh))
        run = solver.run(0.0, TimeGrid(1.0, 10))

        assert len(run.diagnostics) == 10
        assert all(d.mass_balanced for d in run.diagnostics)
        assert run.max_mass_defect <= 1e-10

    def test_stiff_fractures_stay_bounded(self):
        """Test k_f = 1e9 with tau = 12500 keeps pressures steady and mass balanced"""
        mesh, medium = fractured_case(forchheimer_c=0.0, n=20, k_f=1e9)
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh, rate=1e-3))
        run = solver.run(0.0, TimeGrid(12500.0, 10), keep_history=True)

        assert all(d.mass_balanced for d in run.diagnostics)
        assert all(d.solve.relative_residual <= 1e-2 for d in run.diagnostics)
        peaks = [np.abs(values).max() for values in run.history[1:]]
        assert 0.0 < peaks[0] < 1.0
        assert max(peaks) <= 1.1 * peaks[0]
        assert min(peaks) >= 0.9 * peaks[0]

    def test_time_step_factors_equilibrated(self):
        """Test the time-step system is factored after Ruiz scaling"""
        mesh, medium = fractured_case(k_f=1e9)
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh))
        blocks = solver.assembler.blocks(solver.assembler.zero_velocities())
        assert solver._factorize(blocks, 12500.0).scaling is not None

    def test_constant_offset_removed(self):
        """Test a constant error in the linear solve is removed by the stored-mass balance"""
        mesh, medium = fractured_case()
        grid = TimeGrid(1.0, 2)
        reference = FineSolver(mesh, medium, FluidParams(), well_sources(mesh)).run(0.0, grid).final.values
        exact_solve = Factorization.solve

        def offset_solve(self, b):
            x, report = exact_solve(self, b)
            return x + 1e-3, report

        with patch.object(Factorization, 'solve', offset_solve):
            run = FineSolver(mesh, medium, FluidParams(), well_sources(mesh)).run(0.0, grid)

        assert all(d.mass_shift == pytest.approx(-1e-3, rel=1e-6) for d in run.diagnostics)
        assert np.allclose(run.final.values, reference, rtol=0, atol=1e-10 * np.abs(reference).max())

    def test_gross_mass_defect_raises(self):
        """Test a step that breaks conservation by orders of magnitude stops the run"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh))
        with patch.object(SystemBlocks, 'mass_balance_defect', return_value=1.0):
            with pytest.raises(MassBalanceError, match='Layer 1'):
                solver.run(0.0, TimeGrid(1.0, 3))

    def test_small_mass_defect_warns(self, caplog):
        """Test a defect just above tolerance is logged and the run continues"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh))
        with patch.object(SystemBlocks, 'mass_balance_defect', return_value=1e-8):
            with caplog.at_level(logging.WARNING, logger='fine_solver'):
                run = solver.run(0.0, TimeGrid(1.0, 2))

        assert run.final.layer == 2
        assert not any(d.mass_balanced for d in run.diagnostics)
        assert sum('exceeds' in r.getMessage() for r in caplog.records) == 2

    def test_zero_forchheimer_matches_linear_solver(self):
        """Test C = 0 gives the same history as switching nonlinearity off"""
        mesh, darcy = fractured_case(0.0)
        _, forchheimer = fractured_case(1e4)
        sources = well_sources(mesh)
        grid = TimeGrid(1.0, 4)

        first = FineSolver(mesh, darcy, FluidParams(), sources).run(0.0, grid, keep_history=True)
        second = FineSolver(mesh, forchheimer, FluidParams(), sources, nonlinear=False).run(
            0.0, grid, keep_history=True)
        for a, b in zip(first.history, second.history):
            assert np.array_equal(a, b)

    def test_forchheimer_changes_solution(self):
        """Test damping alters the pressure once velocities are nonzero"""
        mesh, darcy = fractured_case(0.0)
        _, forchheimer = fractured_case(1e4)
        sources = well_sources(mesh)
        grid = TimeGrid(1.0, 3)

        linear = FineSolver(mesh, darcy, FluidParams(), sources).run(0.0, grid, keep_history=True)
        damped = FineSolver(mesh, forchheimer, FluidParams(), sources).run(0.0, grid, keep_history=True)
        assert np.array_equal(linear.history[1], damped.history[1])
        assert not np.allclose(linear.history[3], damped.history[3], rtol=1e-8, atol=0)

    def test_maximum_principle(self):
        """Test no new extrema appear without sources"""
        mesh, medium = fractured_case()
        p0 = np.random.default_rng(9).uniform(0.0, 1.0, mesh.n_dofs)
        solver = FineSolver(mesh, medium, FluidParams(), SourceTerms.zeros(mesh))
        run = solver.run(p0, TimeGrid(1.0, 5), keep_history=True)

        for values in run.history[1:]:
            assert values.min() >= p0.min() - 1e-9
            assert values.max() <= p0.max() + 1e-9

    def test_snapshots_and_history(self):
        """Test requested layers are kept and history holds every layer"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), well_sources(mesh))
        run = solver.run(0.0, TimeGrid(1.0, 4), snapshot_layers=[0, 2, 4], keep_history=True)

        assert sorted(run.snapshots) == [0, 2, 4]
        assert len(run.history) == 5
        assert np.array_equal(run.snapshots[2].values, run.history[2])
        assert run.final.layer == 4
        assert run.final.time == pytest.approx(4.0)
        assert np.array_equal(run.layer_values(4), run.final.values)

    def test_layer_values_without_history(self):
        """Test an unrecorded layer is reported"""
        mesh, medium = fractured_case()
        run = FineSolver(mesh, medium, FluidParams(), SourceTerms.zeros(mesh)).run(
            0.0, TimeGrid(1.0, 2), snapshot_layers=[2])
        assert isinstance(run, FineRun)
        with pytest.raises(KeyError):
            run.layer_values(1)

    def test_step_rejects_bad_tau(self):
        """Test a non-positive step size"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), SourceTerms.zeros(mesh))
        state = PressureState(0, 0.0, np.zeros(mesh.n_dofs), mesh.n_matrix)
        with pytest.raises(ValueError, match='Time step'):
            solver.step(state, FaceVelocities.zeros(mesh), 0.0)

    def test_step_rejects_wrong_state(self):
        """Test the state length is checked"""
        mesh, medium = fractured_case()
        solver = FineSolver(mesh, medium, FluidParams(), SourceTerms.zeros(mesh))
        state = PressureState(0, 0.0, np.zeros(3), 3)
        with pytest.raises(ValueError, match='shape'):
            solver.step(state, FaceVelocities.zeros(mesh), 1.0)

    def test_first_order_in_time(self):
        """Test halving tau halves the change in the solution"""
        n = 6
        mesh = build_fractured_mesh(n, n, (1.0, 1.0), [])
        medium = MediumParams.from_forchheimer_scale(np.ones(mesh.n_matrix), [], 0.0)
        solver = FineSolver(mesh, medium, FluidParams(mu=1.0), SourceTerms.zeros(mesh))
        p0 = np.cos(np.pi * mesh.fine.centroids[:, 0])

        finals = [solver.run(p0, TimeGrid(0.1 / steps, steps)).final.values for steps in (20, 40, 80)]
        coarse_change = np.linalg.norm(finals[0] - finals[1])
        fine_change = np.linalg.norm(finals[1] - finals[2])
        assert 1.8 < coarse_change / fine_change < 2.2
