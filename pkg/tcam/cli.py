"""
Command-line entry point.

`cli_main(argv)` parses one subcommand, loads an optional run config,
runs the matching experiment and exports its report.  It returns the exit
status instead of exiting so the management command and the tests can
call it directly.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import django
from django.apps import apps
from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import CommandError, CommandParser
from rest_framework import serializers

from .array import array_search_parallel, run_search
from .cell import TABLE1_ROWS, simulate_car, truth_table
from .device_model import IvSweep, Polarity, ResistiveState, StateLabel, dump_model_card, fit_iv_params
from .exceptions import CalibrationError, ConvergenceError, FitError
from .experiments import (
    CORNERS,
    SweepPlan,
    calibrate_vsec,
    cell_energy_table,
    energy_map,
    measure_search_timing,
    run_aar_suite,
    run_table2_suite,
    sweep_vsec,
    write_esr_sweep,
)
from .reports import export_report
from .serializers import RunConfig, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SOLVER = 2

CAR_TRACE_NETS = ('cue', 'cue_bar', 'mid', 'ml', 'en', 'sw')


def _ensure_django():
    if not apps.ready:
        os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'camsim.settings')
        django.setup()


@dataclass(frozen=True)
class Invocation:
    """Resolved options shared by every subcommand."""

    array: object
    jobs: int
    out: Path
    fmt: str


def _resolve(args):
    run = load_run_config(args.config) if args.config else RunConfig()
    array = run.array if args.seed is None else replace(run.array, seed=args.seed)
    return Invocation(
        array=array,
        jobs=args.jobs or run.jobs or settings.CAMSIM_JOBS,
        out=Path(args.out or run.out or settings.CAMSIM_OUT),
        fmt=args.format,
    )


def _fit_device(args, inv):
    sweep = IvSweep.from_csv(args.iv_csv)
    state = ResistiveState(args.state, args.rs)
    result = fit_iv_params(sweep, args.rs, state=state, polarity=args.polarity,
                           c_mr_f=inv.array.cell.rram.c_mr_f)
    path = export_report(result, 'device_card', inv.fmt, inv.out)
    card_path = inv.out / 'model_card.json'
    dump_model_card(result.params, card_path)
    params = result.params
    return [path, card_path], [
        f'b_p_per_v={params.b_p:.6g} b_n_per_v={params.b_n:.6g} fit_rms_log={result.fit_rms_log:.4g}',
    ]


def _truth_table(args, inv):
    cell = inv.array.cell
    rows = truth_table(cell)
    paths = [export_report(rows, 'truth_table', inv.fmt, inv.out)]
    if inv.fmt == 'csv':
        for cue, stored in TABLE1_ROWS:
            _, _, trace = simulate_car(cue, cell.storing(stored))
            paths.append(export_report(
                trace, 'trace', 'csv', inv.out, stem=f'car_{cue.value}_{stored.value}', nets=CAR_TRACE_NETS,
            ))
    lines = [
        f'cue={row.cue} stored={row.stored} mid={row.mid_level} ml={row.ml_level}'
        for row in rows
    ]
    return paths, lines


def _search(args, inv):
    if len(args.data) == 1:
        outcomes = [run_search(args.data[0], args.cue, inv.array)]
    else:
        cfg = replace(inv.array, cols=len(args.data))
        outcomes = array_search_parallel(args.data, args.cue, cfg, inv.jobs)
    report = outcomes[0] if len(outcomes) == 1 else outcomes
    path = export_report(report, 'search', inv.fmt, inv.out)
    lines = [
        f'column={o.column} decision={o.decision} ml_sample_v={o.ml_sample_v:.4f} vref_car_v={o.vref_car_v:.4f}'
        for o in outcomes
    ]
    return [path], lines


def _aar(args, inv):
    report = run_aar_suite(inv.array, jobs=inv.jobs)
    path = export_report(report, 'aar_suite', inv.fmt, inv.out)
    if report.calibration_error:
        raise CalibrationError(report.calibration_error, report.lrs_v, report.hrs_v)
    return [path], [f'reads={len(report.reads)} misreads={len(report.misreads)} vref_aar_v={report.vref_aar_v:.4f}']


def _write_sweep(args, inv):
    directions = ('fwd', 'rev') if args.direction == 'both' else (args.direction,)
    sweeps = [write_esr_sweep(direction, cfg=inv.array) for direction in directions]
    path = export_report(sweeps if len(sweeps) > 1 else sweeps[0], 'write_sweep', inv.fmt, inv.out)
    return [path], [f'direction={s.direction} points={len(s.points)}' for s in sweeps]


def _operating_point(args, inv):
    """The run's array, moved to the gap-maximising V_SEC when asked."""
    if not args.calibrate_vsec:
        return inv.array, {}
    vsec = calibrate_vsec(inv.array, jobs=inv.jobs)
    return replace(inv.array, cell=inv.array.cell.with_supplies(vsec=vsec)), {
        'configured_vsec_v': inv.array.vsec,
        'calibrated_vsec_v': vsec,
    }


def _suite(args, inv):
    array, calibration = _operating_point(args, inv)
    report = run_table2_suite(array, inv.jobs)
    report.config.update(calibration)
    path = export_report(report, 'table2', inv.fmt, inv.out)
    return [path], [
        f'vref_car_v={report.vref_car_v:.4f} gap_v={report.gap.gap_v:.4f} '
        f'matches_reference={report.matches_reference}',
    ]


def _sweep(args, inv):
    plan = SweepPlan(start=args.start, stop=args.stop, step=args.step)
    result = sweep_vsec(plan, args.corner, inv.array, inv.jobs)
    path = export_report(result, 'vsec_sweep', inv.fmt, inv.out, stem=f'vsec_sweep_{result.corner}')
    best = result.argmax
    summary = 'argmax=none' if best is None else f'argmax_vsec_v={best[0]:.3f} max_gap_v={best[1]:.4f}'
    return [path], [f'corner={result.corner} points={len(result.values)} {summary}']


def _energy_map(args, inv):
    report = energy_map(inv.array, inv.jobs)
    path = export_report(report, 'energy_map', inv.fmt, inv.out)
    return [path], [
        f'array_per_bit_j={report.array_per_bit_j:.4g} isolated_per_bit_j={report.isolated_per_bit_j:.4g} '
        f'core_share={report.core_share:.3f}',
    ]


def _cell_energy(args, inv):
    rows = cell_energy_table(inv.array)
    path = export_report(rows, 'cell_energy', inv.fmt, inv.out)
    return [path], [f'search={r.search} stored={r.stored} total_j={r.total_j:.4g}' for r in rows]


def _timing(args, inv):
    array, calibration = _operating_point(args, inv)
    report = measure_search_timing(array)
    report.config.update(calibration)
    path = export_report(report, 'timing', inv.fmt, inv.out)

    def fmt_s(value):
        return 'none' if value is None else f'{value:.4g}'

    return [path], [
        f'delay_hrs_s={fmt_s(report.ml_developing_delay_hrs_s)} '
        f'delay_lrs_s={fmt_s(report.ml_developing_delay_lrs_s)} '
        f'search_delay_s={fmt_s(report.search_delay_s)}',
    ]


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'{text!r} is not a number.')
    if not value > 0:
        raise argparse.ArgumentTypeError(f'{text!r} must be positive.')
    return value


def build_parser():
    common = CommandParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration')
    common.add_argument('--out', help='output directory (default: CAMSIM_OUT)')
    common.add_argument('--format', choices=('json', 'csv', 'svg'), default='json')
    common.add_argument('--jobs', type=int, help='worker processes (default: CAMSIM_JOBS)')
    common.add_argument('--seed', type=int, help='comparator offset seed')

    parser = CommandParser(prog='camsim', description='Capacitive-RRAM TCAM simulator.')
    commands = parser.add_subparsers(dest='command', required=True)

    fit = commands.add_parser('fit-device', parents=[common], help='fit the IV model to a measured sweep')
    fit.add_argument('iv_csv', help='two-column CSV of volts, amperes')
    fit.add_argument('--rs', type=_positive_float, required=True, help='read-out resistance at 0.2 V (ohm)')
    fit.add_argument('--state', choices=StateLabel.values, default=StateLabel.CUSTOM)
    fit.add_argument('--polarity', choices=Polarity.values, default=Polarity.BOTH)
    fit.set_defaults(handler=_fit_device)

    commands.add_parser('truth-table', parents=[common], help='single-cell CAR truth table').set_defaults(
        handler=_truth_table)

    search = commands.add_parser('search', parents=[common], help='content-addressable read of columns')
    search.add_argument('--data', action='append', required=True,
                        help='stored H/L word; repeat for several columns')
    search.add_argument('--cue', required=True, help='searched 1/0/X word')
    search.set_defaults(handler=_search)

    commands.add_parser('aar', parents=[common], help='address-accessed read of every row').set_defaults(
        handler=_aar)

    write = commands.add_parser('write-sweep', parents=[common], help='write drive versus series resistance')
    write.add_argument('--direction', choices=('fwd', 'rev', 'both'), default='both')
    write.set_defaults(handler=_write_sweep)

    suite = commands.add_parser('suite', parents=[common], help='functional search suites')
    suite.add_argument('suite', choices=('table2',))
    suite.add_argument('--calibrate-vsec', action='store_true',
                       help='run at the gap-maximising V_SEC of a tt sweep')
    suite.set_defaults(handler=_suite)

    sweep = commands.add_parser('sweep', parents=[common], help='parameter sweeps under a corner')
    sweep.add_argument('parameter', choices=('vsec',))
    sweep.add_argument('--corner', choices=sorted(CORNERS), default='tt')
    sweep.add_argument('--start', type=float, default=1.0)
    sweep.add_argument('--stop', type=float, default=1.35)
    sweep.add_argument('--step', type=float, default=0.01)
    sweep.set_defaults(handler=_sweep)

    commands.add_parser('energy-map', parents=[common], help='per-bit search energy of the pattern suite').set_defaults(
        handler=_energy_map)
    commands.add_parser('cell-energy', parents=[common], help='single-cell search energy').set_defaults(
        handler=_cell_energy)
    timing = commands.add_parser('timing', parents=[common], help='match-line and search delays')
    timing.add_argument('--calibrate-vsec', action='store_true',
                        help='run at the gap-maximising V_SEC of a tt sweep')
    timing.set_defaults(handler=_timing)
    return parser


def _describe(exc):
    if isinstance(exc, serializers.ValidationError):
        return str(exc.detail)
    if isinstance(exc, ValidationError):
        return '; '.join(exc.messages)
    return str(exc)


def cli_main(argv=None, stdout=None, stderr=None):
    """Run one subcommand; returns 0, 1 (invalid input or calibration) or 2 (solver failure)."""
    _ensure_django()
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = sys.argv[1:] if argv is None else list(argv)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CommandError as exc:
        stderr.write(f'{exc}\n')
        return EXIT_INVALID
    except SystemExit as exc:
        return EXIT_OK if exc.code in (None, 0) else EXIT_INVALID

    try:
        invocation = _resolve(args)
        logger.info('command=%s out=%s format=%s jobs=%d', args.command, invocation.out, invocation.fmt,
                    invocation.jobs)
        paths, lines = args.handler(args, invocation)
    except ConvergenceError as exc:
        logger.error('command=%s solver_failure=%s', args.command, exc)
        stderr.write(f'Solver failure: {exc}\n')
        return EXIT_SOLVER
    except (ValidationError, serializers.ValidationError, CalibrationError, FitError) as exc:
        logger.error('command=%s invalid=%s', args.command, _describe(exc))
        stderr.write(f'Error: {_describe(exc)}\n')
        return EXIT_INVALID

    for line in lines:
        stdout.write(f'{line}\n')
    for path in paths:
        stdout.write(f'wrote {path}\n')
    return EXIT_OK
