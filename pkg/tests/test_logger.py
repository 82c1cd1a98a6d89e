import pytest
import os
import sys
import logging
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from logger import QUIET_LOGGERS, get_logger, log_run_event, run_log, setup_logging


class TestSetupLogging:

    def teardown_method(self):
        root = logging.getLogger()
        for handler in root.handlers[:]:
            root.removeHandler(handler)
            handler.close()

    def test_bare_file_name_goes_to_logs(self, tmp_path, monkeypatch):
        """Test a plain file name is placed under logs/"""
        monkeypatch.chdir(tmp_path)
        setup_logging('WARNING', 'sim.log')
        get_logger('nlmc.test').debug('per-step detail')

        assert (tmp_path / 'logs' / 'sim.log').is_file()
        console, rotating = logging.getLogger().handlers
        assert console.level == logging.WARNING
        assert rotating.level == logging.DEBUG

    def test_file_keeps_debug_records(self, tmp_path):
        """Test DEBUG diagnostics reach the file even with a quiet console"""
        path = tmp_path / 'out' / 'sim.log'
        setup_logging('ERROR', str(path))
        get_logger('nlmc.test').debug('layer 3 residual')
        for handler in logging.getLogger().handlers:
            handler.flush()

        assert 'layer 3 residual' in path.read_text()

    def test_quiets_only_vtk(self, tmp_path):
        """Test only the VTK logger is raised to WARNING"""
        setup_logging('DEBUG', str(tmp_path / 'sim.log'))

        assert QUIET_LOGGERS == ('vtk',)
        assert logging.getLogger('vtk').level == logging.WARNING

    def test_repeated_setup_replaces_handlers(self, tmp_path):
        """Test calling setup twice does not duplicate handlers"""
        setup_logging('INFO', str(tmp_path / 'a.log'))
        setup_logging('INFO', str(tmp_path / 'b.log'))
        assert len(logging.getLogger().handlers) == 2


class TestRunLog:

    def test_records_inside_block_only(self, tmp_path):
        """Test the run file holds records of its block and is detached afterwards"""
        logger = get_logger('nlmc.test')
        logging.getLogger().setLevel(logging.DEBUG)
        with run_log(tmp_path / 'S3') as path:
            logger.info('inside')
        logger.info('outside')

        text = path.read_text()
        assert 'inside' in text
        assert 'outside' not in text
        assert path == tmp_path / 'S3' / 'run.log'

    def test_run_events_levels(self, caplog):
        """Test lifecycle events map onto log levels"""
        with caplog.at_level(logging.INFO, logger='nlmc.runs'):
            log_run_event('RUN_STARTED', '20x20/S3/C0', {'layers': 3})
            log_run_event('RUN_SKIPPED', '20x20/S3/C0', {'reason': 'outputs exist'})
            log_run_event('RUN_FAILED', '20x20/S3/C0', {'error': 'singular'})

        assert [r.levelno for r in caplog.records] == [logging.INFO, logging.WARNING, logging.ERROR]
        assert caplog.records[0].getMessage() == "[RUN_STARTED] 20x20/S3/C0 - {'layers': 3}"
