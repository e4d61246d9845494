"""
Tests for run configurations, report export and the command line.
"""

import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from rest_framework import serializers

from tcam.array import ArrayConfig
from tcam.cell import CellConfig, CueValue, simulate_car
from tcam.cli import EXIT_INVALID, EXIT_OK, cli_main
from tcam.device_model import PRISTINE_STATE, RramParams, fit_iv_params, generate_sweep, load_model_card
from tcam.experiments import CellEnergyRow, SweepResult, TimingReport, write_esr_sweep
from tcam.management.commands.camsim import Command
from tcam.reports import export_report, render_svg, report_filename
from tcam.serializers import RunConfig, dump_run_config, load_run_config, parse_run_config


def short_array(**kwargs):
    return ArrayConfig(rows=4, cols=1, c_ml_f=50e-15 * 4 / 64, **kwargs)


class OutputDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.out = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        code = cli_main(list(argv), stdout=stdout, stderr=stderr)
        return code, stdout.getvalue(), stderr.getvalue()


class RunConfigTests(OutputDirMixin, SimpleTestCase):
    """Test run configuration documents."""

    def test_empty_document_gives_defaults(self):
        """Test that an empty document is the default configuration."""
        self.assertEqual(parse_run_config({}), RunConfig())

    def test_sections(self):
        """Test that unit-suffixed keys reach the dataclasses."""
        run = parse_run_config({
            'cell': {'supplies': {'vsec_v': 1.2}, 'q2': {'vth_v': 0.45}},
            'array': {'rows': 4, 'vref_car_v': 0.9},
            'solver': {'newton_max_iter': 20},
            'seed': 7,
            'jobs': 2,
        })
        self.assertEqual(run.array.vsec, 1.2)
        self.assertEqual(run.array.cell.q2.vth, 0.45)
        self.assertEqual(run.array.cell.q2.k, CellConfig().q2.k)
        self.assertEqual(run.array.rows, 4)
        self.assertEqual(run.array.vref_car, 0.9)
        self.assertEqual(run.array.cell.solver.newton_max_iter, 20)
        self.assertEqual(run.array.seed, 7)
        self.assertEqual(run.jobs, 2)

    def test_unknown_key(self):
        """Test that unknown keys are rejected at any depth."""
        with self.assertRaises(serializers.ValidationError) as ctx:
            parse_run_config({'bogus': 1})
        self.assertIn('bogus', ctx.exception.detail)
        with self.assertRaises(serializers.ValidationError):
            parse_run_config({'cell': {'supplies': {'vsec': 1.2}}})

    def test_vsec_out_of_range(self):
        """Test that V_SEC is range checked before any dataclass is built."""
        with self.assertRaises(serializers.ValidationError):
            parse_run_config({'cell': {'supplies': {'vsec_v': 1.5}}})

    def test_inline_card(self):
        """Test that an inline card replaces the stored state."""
        card = RramParams.calibrated(PRISTINE_STATE).to_card()
        run = parse_run_config({'device': {'rram': card}})
        self.assertEqual(run.array.cell.rram.rs_ohms, PRISTINE_STATE.rs_ohms)

    def test_missing_card_file(self):
        """Test that a card path must exist."""
        with self.assertRaises(serializers.ValidationError):
            parse_run_config({'device': {'lrs': str(self.out / 'missing.json')}})

    def test_round_trip(self):
        """Test that dumping and loading gives back an equal configuration."""
        run = parse_run_config({'array': {'rows': 4, 'cols': 2}, 'seed': 3, 'out': 'results'})
        path = self.out / 'run.json'
        dump_run_config(run, path)
        loaded = load_run_config(path)
        self.assertEqual(loaded, run)
        self.assertEqual(dump_run_config(loaded), path.read_bytes())

    def test_unreadable_config(self):
        """Test that missing and malformed files name the config."""
        with self.assertRaises(ValidationError) as ctx:
            load_run_config(self.out / 'none.json')
        self.assertIn('config', ctx.exception.message_dict)
        broken = self.out / 'broken.json'
        broken.write_text('{not json')
        with self.assertRaises(ValidationError):
            load_run_config(broken)


class ExportTests(OutputDirMixin, SimpleTestCase):
    """Test report rendering and file output."""

    def test_json_envelope(self):
        """Test the schema, kind and data keys."""
        sweep = write_esr_sweep('fwd', [10.0, 1e3])
        path = export_report(sweep, 'write_sweep', 'json', self.out)
        self.assertEqual(path.name, 'write_sweep_report.json')
        document = json.loads(path.read_text())
        self.assertEqual(document['schema'], 'camsim-report/1')
        self.assertEqual(document['kind'], 'write_sweep')
        self.assertEqual(document['data']['direction'], 'fwd')
        self.assertEqual(len(document['data']['points']), 2)

    def test_csv_header(self):
        """Test that every header line is a comment naming a column and its unit."""
        sweep = write_esr_sweep('fwd', [10.0, 1e3])
        lines = export_report(sweep, 'write_sweep', 'csv', self.out).read_text().splitlines()
        header = [line for line in lines if line.startswith('#')]
        body = [line for line in lines if not line.startswith('#')]
        self.assertEqual(header[0], '# camsim-report/1 kind=write_sweep')
        self.assertIn('# r_ohms: ohm', header)
        self.assertEqual(header[-1], '# direction,r_ohms,v_across_v,current_a,error')
        self.assertEqual(len(body), 2)
        self.assertTrue(body[0].startswith('fwd,10,'))

    def test_repeat_export_is_identical(self):
        """Test that the same report exports to the same bytes in every format."""
        sweep = write_esr_sweep('rev', [10.0, 1e3, 1e5])
        for fmt in ('json', 'csv', 'svg'):
            first = export_report(sweep, 'write_sweep', fmt, self.out).read_bytes()
            second = export_report(sweep, 'write_sweep', fmt, self.out).read_bytes()
            self.assertEqual(first, second, fmt)

    def test_svg_is_deterministic(self):
        """Test that two renders of one report match byte for byte."""
        sweep = write_esr_sweep('fwd', [10.0, 1e3])
        self.assertEqual(render_svg(sweep, 'write_sweep'), render_svg(sweep, 'write_sweep'))

    def test_tabular_kinds_render_svg(self):
        """Test that device card, cell energy and timing reports draw the same bytes twice."""
        truth = RramParams.calibrated(PRISTINE_STATE, b_p=5.0)
        fit = fit_iv_params(generate_sweep(truth, np.linspace(-1.0, 1.0, 41)), 218e3, state=PRISTINE_STATE)
        cells = [
            CellEnergyRow('HRS', 'LRS', 4e-15, 6e-15, 10e-15, True),
            CellEnergyRow('HRS', 'HRS', 2e-15, 1e-15, 3e-15, False),
        ]
        timing = TimingReport(2.0e-10, None, 3.1e-9, 1.14e-9, 1.96e-9)
        for report, kind in ((fit, 'device_card'), (cells, 'cell_energy'), (timing, 'timing')):
            path = export_report(report, kind, 'svg', self.out)
            self.assertEqual(path.name, f'{kind}.svg')
            self.assertIn(b'<svg', path.read_bytes())
            self.assertEqual(render_svg(report, kind), path.read_bytes(), kind)

    def test_empty_sweep(self):
        """Test that a sweep without points still exports."""
        result = SweepResult('cell.supplies.vsec', 'tt', [], [], {})
        document = json.loads(export_report(result, 'vsec_sweep', 'json', self.out).read_text())
        self.assertIsNone(document['data']['argmax_value'])
        self.assertEqual(document['data']['values'], [])
        lines = export_report(result, 'vsec_sweep', 'csv', self.out).read_text().splitlines()
        self.assertTrue(all(line.startswith('#') for line in lines))

    def test_trace_csv_shape(self):
        """Test that a trace exports as time plus one column per requested net."""
        _, _, trace = simulate_car(CueValue.ONE, CellConfig())
        nets = ('cue', 'mid', 'ml')
        path = export_report(trace, 'trace', 'csv', self.out, stem='car', nets=nets)
        table = np.loadtxt(path, delimiter=',')
        self.assertEqual(table.shape, (len(trace.times), len(nets) + 1))
        np.testing.assert_allclose(table[:, 0], trace.times, rtol=1e-11)

    def test_filenames(self):
        """Test report file naming."""
        self.assertEqual(report_filename('table2', 'json'), 'table2_report.json')
        self.assertEqual(report_filename('table2', 'csv'), 'table2.csv')
        self.assertEqual(report_filename('vsec_sweep', 'svg', 'vsec_sweep_ss'), 'vsec_sweep_ss.svg')

    def test_unknown_format_and_kind(self):
        """Test that unsupported formats and kinds are refused."""
        sweep = write_esr_sweep('fwd', [10.0])
        with self.assertRaises(ValidationError):
            export_report(sweep, 'write_sweep', 'pdf', self.out)
        with self.assertRaises(ValidationError):
            export_report(sweep, 'nonsense', 'json', self.out)

    def test_unwritable_output(self):
        """Test that an output path blocked by a file is a validation error on `out`."""
        blocker = self.out / 'blocker'
        blocker.write_text('')
        sweep = write_esr_sweep('fwd', [10.0])
        with self.assertRaises(ValidationError) as ctx:
            export_report(sweep, 'write_sweep', 'json', blocker / 'sub')
        self.assertIn('out', ctx.exception.message_dict)


class CommandLineTests(OutputDirMixin, SimpleTestCase):
    """Test the camsim command line."""

    def write_config(self, **kwargs):
        path = self.out / 'run.json'
        dump_run_config(RunConfig(array=short_array(**kwargs)), path)
        return str(path)

    def test_help(self):
        """Test that --help exits cleanly."""
        code, _, _ = self.run_cli('--help')
        self.assertEqual(code, EXIT_OK)

    def test_unknown_subcommand(self):
        """Test that argument errors exit with status 1."""
        code, _, stderr = self.run_cli('nonsense')
        self.assertEqual(code, EXIT_INVALID)
        self.assertTrue(stderr)

    def test_bad_pattern(self):
        """Test that an invalid pattern character exits with status 1 and names the position."""
        config = self.write_config()
        code, _, stderr = self.run_cli('search', '--config', config, '--data', 'HHZL', '--cue', '1100',
                                       '--out', str(self.out))
        self.assertEqual(code, EXIT_INVALID)
        self.assertIn('Position 2', stderr)

    def test_missing_config(self):
        """Test that an unreadable config exits with status 1."""
        code, _, _ = self.run_cli('truth-table', '--config', str(self.out / 'none.json'))
        self.assertEqual(code, EXIT_INVALID)

    def test_search(self):
        """Test a short-column search end to end."""
        config = self.write_config(vref_car=0.8)
        code, stdout, _ = self.run_cli('search', '--config', config, '--data', 'HHLL', '--cue', '1100',
                                       '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        self.assertIn('decision=Hit', stdout)
        document = json.loads((self.out / 'search_report.json').read_text())
        self.assertEqual(document['data']['decision'], 'Hit')

    def test_multi_column_search(self):
        """Test that repeated --data flags search several columns in order."""
        config = self.write_config(vref_car=0.8)
        code, stdout, _ = self.run_cli('search', '--config', config, '--data', 'HHLL', '--data', 'LLHH',
                                       '--cue', '1100', '--out', str(self.out), '--format', 'csv')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('column=1 decision=Miss', stdout)
        body = [line for line in (self.out / 'search.csv').read_text().splitlines()
                if not line.startswith('#')]
        self.assertEqual([line.split(',')[0] for line in body], ['0', '1'])

    def test_write_sweep(self):
        """Test that both directions land in one report."""
        code, stdout, _ = self.run_cli('write-sweep', '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        self.assertIn('direction=fwd points=25', stdout)
        self.assertIn('direction=rev points=25', stdout)
        document = json.loads((self.out / 'write_sweep_report.json').read_text())
        self.assertEqual([sweep['direction'] for sweep in document['data']], ['fwd', 'rev'])

    def test_fit_device(self):
        """Test that a generated sweep fits back to its exponent."""
        truth = RramParams.calibrated(PRISTINE_STATE, b_p=5.0)
        csv = self.out / 'iv.csv'
        generate_sweep(truth, np.linspace(-1.0, 1.0, 81)).to_csv(csv)
        code, stdout, _ = self.run_cli('fit-device', str(csv), '--rs', '218e3', '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        self.assertIn('b_p_per_v=', stdout)
        card = load_model_card(self.out / 'model_card.json')
        self.assertLess(abs(card.b_p - 5.0) / 5.0, 0.01)
        self.assertTrue((self.out / 'device_card_report.json').is_file())

    def test_cell_energy_svg(self):
        """Test that the cell energy table exports as a bar chart."""
        config = self.write_config()
        code, _, _ = self.run_cli('cell-energy', '--config', config, '--format', 'svg',
                                  '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        self.assertIn(b'<svg', (self.out / 'cell_energy.svg').read_bytes())

    def test_management_command(self):
        """Test that manage.py camsim shares the exit status."""
        with self.assertRaises(SystemExit) as ctx:
            Command().run_from_argv(['manage.py', 'camsim', 'nonsense'])
        self.assertEqual(ctx.exception.code, EXIT_INVALID)
