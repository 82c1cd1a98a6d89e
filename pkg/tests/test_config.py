import pytest
import os
from unittest.mock import patch
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from config import Config, ConfigError, RunConfig, parse_config


def write_config(tmp_path, text, name='run.env'):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfig:

    def test_default_values(self):
        """Test that process-level defaults are set correctly"""
        assert Config.LINEAR_RTOL == 1e-10
        assert Config.BACKWARD_TOL == 1e-12
        assert Config.REFINEMENT_STEPS == 3
        assert Config.WORKERS >= 1

    def test_solver_params(self):
        """Test linear solver parameter bundle"""
        params = Config.get_solver_params()

        assert params['rtol'] == Config.LINEAR_RTOL
        assert params['backward_tol'] == Config.BACKWARD_TOL
        assert params['refinement_steps'] == Config.REFINEMENT_STEPS
        assert params['residual_cap'] == Config.RESIDUAL_CAP

    def test_config_validation_success(self):
        """Test successful configuration validation"""
        assert Config.validate_config() == []

    def test_config_validation_invalid_workers(self):
        """Test configuration validation with zero workers"""
        with patch.object(Config, 'WORKERS', 0):
            errors = Config.validate_config()
            assert any('NLMC_WORKERS' in error for error in errors)

    def test_config_validation_invalid_tolerance(self):
        """Test configuration validation with a residual tolerance above one"""
        with patch.object(Config, 'LINEAR_RTOL', 2.0):
            errors = Config.validate_config()
            assert any('NLMC_LINEAR_RTOL' in error for error in errors)

    def test_config_validation_cap_below_tolerance(self):
        """Test the residual cap may not sit below the residual tolerance"""
        with patch.object(Config, 'RESIDUAL_CAP', 1e-12):
            errors = Config.validate_config()
            assert any('NLMC_RESIDUAL_CAP' in error for error in errors)


class TestParseConfig:

    def test_default_physics(self, tmp_path):
        """Test that omitted keys take the reference physical values"""
        path = write_config(tmp_path, "fine_nx = 100\nfine_ny = 100\ncoarse_grids = 20x20\n")
        rc = parse_config(path)

        assert rc.mu == 8.0
        assert rc.rho == 1.0
        assert rc.c_m == 1.0 and rc.c_f == 1.0
        assert rc.k_f == 1e9
        assert rc.tau == 12500.0
        assert rc.n_steps == 100
        assert rc.forchheimer_c == 1e4
        assert rc.layers == 4
        assert rc.coarse_grids == [(20, 20)]

    def test_comments_and_lists(self, tmp_path):
        """Test comments, grid lists and integer lists"""
        path = write_config(tmp_path, "# demo\nfine_nx = 40\nfine_ny = 40\n"
                                      "coarse_grids = 10x10, 20x20\nsnapshot_layers = 5,10\n"
                                      "balance_wells = false\n")
        rc = parse_config(path)

        assert rc.coarse_grids == [(10, 10), (20, 20)]
        assert rc.snapshot_layers == [5, 10]
        assert rc.balance_wells is False

    def test_zero_forchheimer_is_valid(self, tmp_path):
        """Test that C = 0 is accepted"""
        path = write_config(tmp_path, "fine_nx = 20\nfine_ny = 20\ncoarse_grids = 5x5\nforchheimer_c = 0\n")
        assert parse_config(path).forchheimer_c == 0.0

    def test_negative_viscosity_rejected(self, tmp_path):
        """Test that the error message names the offending key"""
        path = write_config(tmp_path, "fine_nx = 20\nfine_ny = 20\ncoarse_grids = 5x5\nmu = -1\n")
        with pytest.raises(ConfigError, match='mu'):
            parse_config(path)

    @pytest.mark.parametrize('line', ['mu = nan', 'k_f = inf', 'tau = nan', 'forchheimer_c = nan',
                                      'rate_a = nan', 'domain_lx = inf'])
    def test_non_finite_values_rejected(self, tmp_path, line):
        """Test NaN and infinite physical values fail validation"""
        path = write_config(tmp_path, f"fine_nx = 20\nfine_ny = 20\ncoarse_grids = 5x5\n{line}\n")
        key = line.split(' = ')[0]
        with pytest.raises(ConfigError, match=f'{key} must be finite'):
            parse_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        """Test fail-fast on unknown keys"""
        path = write_config(tmp_path, "fine_nx = 20\nfine_ny = 20\ncoarse_grids = 5x5\nviscosity = 8\n")
        with pytest.raises(ConfigError, match="unknown key 'viscosity'"):
            parse_config(path)

    def test_missing_required_key(self, tmp_path):
        """Test that fine_ny and coarse_grids are required"""
        path = write_config(tmp_path, "fine_nx = 20\n")
        with pytest.raises(ConfigError) as info:
            parse_config(path)
        assert 'fine_ny' in str(info.value)
        assert 'coarse_grids' in str(info.value)

    def test_invalid_value(self, tmp_path):
        """Test a non-numeric value"""
        path = write_config(tmp_path, "fine_nx = many\nfine_ny = 20\ncoarse_grids = 5x5\n")
        with pytest.raises(ConfigError, match='fine_nx'):
            parse_config(path)

    def test_missing_file(self, tmp_path):
        """Test a config path that does not exist"""
        with pytest.raises(ConfigError, match='not found'):
            parse_config(tmp_path / 'absent.env')

    def test_non_dividing_coarse_grid(self, tmp_path):
        """Test a coarse grid that does not divide the fine grid"""
        path = write_config(tmp_path, "fine_nx = 20\nfine_ny = 20\ncoarse_grids = 3x3\n")
        with pytest.raises(ConfigError, match='does not divide'):
            parse_config(path)


class TestRunConfig:

    def setup_method(self):
        self.rc = RunConfig(fine_nx=20, fine_ny=20, coarse_grids=[(5, 5)])

    def test_valid_default(self):
        """Test that a minimal config validates"""
        assert self.rc.validate() == []

    def test_same_wells_rejected(self):
        """Test that A and B must differ"""
        errors = RunConfig(fine_nx=20, fine_ny=20, coarse_grids=[(5, 5)], well_a=3, well_b=3).validate()
        assert any('well_a and well_b' in error for error in errors)

    def test_zero_layers_rejected(self):
        """Test S >= 1"""
        with pytest.raises(ConfigError, match='layers'):
            self.rc.with_overrides(layers=0)

    def test_overrides_skip_none(self):
        """Test that None overrides leave fields untouched"""
        updated = self.rc.with_overrides(layers=None, seed=7)
        assert updated.layers == self.rc.layers
        assert updated.seed == 7

    def test_default_snapshot_layers(self):
        """Test 30th, 60th and last layers by default"""
        assert self.rc.resolved_snapshot_layers() == [30, 60, 100]
        short = self.rc.with_overrides(n_steps=10)
        assert short.resolved_snapshot_layers() == [10]

    def test_extents_and_primary_grid(self):
        """Test derived properties"""
        assert self.rc.extents == (1.0, 1.0)
        assert (self.rc.coarse_nx, self.rc.coarse_ny) == (5, 5)
