"""
Report export: JSON envelopes, CSV tables and SVG plots.

Design Decision: One Exporter, Three Renderings
===============================================

Every experiment returns a plain dataclass.  `export_report` looks up the
report kind and renders the same object three ways:

* JSON goes through the DRF serializer for the kind and `JSONRenderer`,
  wrapped in a `{"schema", "kind", "data"}` envelope.
* CSV flattens the report into one record per row with a `#` header that
  names each column and its unit.  Numbers carry 12 significant digits.
* SVG is a line, step or bar plot drawn on a bare matplotlib `Figure`
  with the Agg backend.

Benefits:
- Experiments never know about file formats
- Repeated exports of the same report are byte-identical

Trade-offs:
- Tabular kinds (device card, cell energy, timing) get bar or curve plots
  that show less than their CSV
"""

import io
import logging
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use('Agg')

import numpy as np  # noqa: E402
from django.conf import settings  # noqa: E402
from django.core.exceptions import ValidationError  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from rest_framework.renderers import JSONRenderer  # noqa: E402

from .circuit import TransientTrace, trace_to_rows  # noqa: E402
from .device_model import iv_current  # noqa: E402
from .serializers import REPORT_SERIALIZERS, serialize_report  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ('json', 'csv', 'svg')
TRACE_KIND = 'trace'
SVG_HASHSALT = 'camsim-report'


def atomic_write(path, payload):
    """Write bytes through a temporary sibling file and rename it into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
        try:
            with os.fdopen(fd, 'wb') as handle:
                handle.write(payload)
            os.replace(tmp_name, path)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise ValidationError({'out': f'Cannot write {path}: {exc.strerror or exc}'}) from exc
    logger.debug('wrote path=%s bytes=%d', path, len(payload))
    return path


def _as_list(report):
    return list(report) if isinstance(report, (list, tuple)) else [report]


def _trace_data(trace, nets):
    return {
        'times_s': trace.times.tolist(),
        'node_voltages_v': {net: trace.node_voltages[net].tolist() for net in nets},
        'markers_s': dict(trace.markers),
    }


def render_json(report, kind, nets=None):
    if kind == TRACE_KIND:
        data = _trace_data(report, nets or sorted(report.node_voltages))
    else:
        data = serialize_report(kind, report)
    envelope = {'schema': settings.CAMSIM_REPORT_SCHEMA, 'kind': kind, 'data': data}
    return JSONRenderer().render(envelope, renderer_context={'indent': 2}) + b'\n'


def _format_cell(value):
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return f'{float(value):.12g}'
    return str(value)


def csv_table(report, kind):
    """(columns, rows) for a report; columns are (name, unit or meaning) pairs."""
    if kind == 'device_card':
        columns = [
            ('branch', 'positive or negative'), ('a', 'prefactor'), ('b_per_v', '1/V'),
            ('rms_log', 'ln(A) residual'), ('n_points', 'count'), ('boundary_hit', 'bool'),
        ]
        rows = [
            (name, branch.a, branch.b, branch.rms_log, branch.n_points, branch.boundary_hit)
            for name, branch in (('positive', report.positive), ('negative', report.negative))
            if branch is not None
        ]
    elif kind == 'truth_table':
        columns = [
            ('cue', '1/0/X'), ('stored', 'LRS/HRS'), ('mid_level', 'High/Low'), ('ml_level', 'High/Low'),
            ('mid_v', 'V'), ('ml_v', 'V'), ('obeys_or_rule', 'bool'),
        ]
        rows = [
            (row.cue, row.stored, row.mid_level, row.ml_level, row.mid_v, row.ml_v, row.obeys_or_rule)
            for row in report
        ]
    elif kind == 'search':
        columns = [
            ('column', 'index'), ('data', 'H/L word'), ('cue', '1/0/X word'), ('ml_sample_v', 'V'),
            ('vref_car_v', 'V'), ('decision', 'Hit/Miss'), ('miss_count_truth', 'count'),
            ('correct', 'bool'), ('total_j', 'J'), ('per_bit_j', 'J'),
        ]
        rows = [
            (o.column, o.data, o.cue, o.ml_sample_v, o.vref_car_v, o.decision, o.miss_count_truth,
             o.correct, o.energy.total_j, o.energy.per_bit_j)
            for o in _as_list(report)
        ]
    elif kind == 'aar_suite':
        columns = [
            ('word', 'index'), ('row', 'index'), ('stored', 'LRS/HRS'), ('bit', '0/1'),
            ('psw_sample_v', 'V'), ('correct', 'bool'),
        ]
        rows = [
            (r['word'], r['row'], r['stored'], r['bit'], r['psw_sample_v'], r['correct'])
            for r in report.reads
        ]
    elif kind == 'write_sweep':
        columns = [
            ('direction', 'fwd/rev'), ('r_ohms', 'ohm'), ('v_across_v', 'V'),
            ('current_a', 'A'), ('error', 'solver message'),
        ]
        rows = [
            (sweep.direction, p.r_ohms, p.v_across_v, p.current_a, p.error)
            for sweep in _as_list(report) for p in sweep.points
        ]
    elif kind == 'table2':
        columns = [
            ('cue', 'pattern'), ('data', 'pattern'), ('ml_sample_v', 'V'),
            ('decision', 'Hit/Miss'), ('expected', 'Hit/Miss'),
        ]
        n = len(report.patterns)
        rows = [
            (report.patterns[i], report.patterns[j], report.levels_v[i][j],
             report.decisions[i][j], report.expected[i][j])
            for i in range(n) for j in range(n)
        ]
    elif kind == 'vsec_sweep':
        columns = [
            ('corner', 'name'), ('value', report.parameter), ('gap_v', 'V'), ('error', 'solver message'),
        ]
        rows = [
            (report.corner, value, gap, report.errors.get(k))
            for k, (value, gap) in enumerate(zip(report.values, report.gaps_v))
        ]
    elif kind == 'energy_map':
        columns = [('cue', 'pattern'), ('data', 'pattern'), ('per_bit_j', 'J')]
        n = len(report.patterns)
        rows = [
            (report.patterns[i], report.patterns[j], report.per_bit_j[i][j])
            for i in range(n) for j in range(n)
        ]
    elif kind == 'timing':
        columns = [('quantity', 'name'), ('value_s', 's'), ('reference_s', 's')]
        rows = [
            ('ml_developing_delay_hrs', report.ml_developing_delay_hrs_s, report.reference_delay_hrs_s),
            ('ml_developing_delay_lrs', report.ml_developing_delay_lrs_s, report.reference_delay_lrs_s),
            ('search_delay', report.search_delay_s, report.reference_search_delay_s),
            ('pre_charge', report.pre_charge_s, None),
            ('evaluation', report.evaluation_s, None),
        ]
    elif kind == 'cell_energy':
        columns = [
            ('search', 'HRS/LRS'), ('stored', 'LRS/HRS'), ('pre_charge_j', 'J'),
            ('evaluate_j', 'J'), ('total_j', 'J'), ('miss', 'bool'),
        ]
        rows = [
            (r.search, r.stored, r.pre_charge_j, r.evaluate_j, r.total_j, r.miss)
            for r in report
        ]
    else:
        raise ValidationError({'kind': f'Unknown report kind {kind!r}.'})
    return columns, rows


def _csv_header(kind, columns):
    lines = [f'{settings.CAMSIM_REPORT_SCHEMA} kind={kind}']
    lines += [f'{name}: {unit}' for name, unit in columns]
    lines.append(','.join(name for name, _ in columns))
    return '\n'.join(lines)


def render_csv(report, kind, nets=None):
    """CSV bytes; every non-data line starts with '#'."""
    buffer = io.StringIO()
    if kind == TRACE_KIND:
        nets = list(nets or sorted(report.node_voltages))
        columns = [('time_s', 's')] + [(net, 'V') for net in nets]
        np.savetxt(
            buffer, trace_to_rows(report, nets), fmt='%.12g', delimiter=',',
            header=_csv_header(kind, columns), comments='# ',
        )
        return buffer.getvalue().encode()

    columns, rows = csv_table(report, kind)
    cells = np.array([[_format_cell(value) for value in row] for row in rows], dtype=object)
    np.savetxt(
        buffer, cells.reshape(len(rows), len(columns)), fmt='%s', delimiter=',',
        header=_csv_header(kind, columns), comments='# ',
    )
    return buffer.getvalue().encode()


def _plot_trace(ax, trace, nets):
    times_ns = trace.times * 1e9
    for net in nets:
        ax.plot(times_ns, trace.node_voltages[net], label=net)
    ax.set_xlabel('time (ns)')
    ax.set_ylabel('voltage (V)')


def _plot_levels(ax, series, ylabel, reference=None):
    for label, values in series:
        ax.step(np.arange(len(values)), values, where='mid', label=label)
    if reference is not None:
        ax.axhline(reference, linestyle='--', color='k', label='reference')
    ax.set_xlabel('index')
    ax.set_ylabel(ylabel)


def _plot_bars(ax, labels, series, ylabel, reference=None):
    """Grouped bars, one group per label; `reference` values are drawn as markers."""
    positions = np.arange(len(labels))
    width = 0.8 / max(len(series), 1)
    for k, (name, values) in enumerate(series):
        ax.bar(positions + (k - (len(series) - 1) / 2) * width, values, width, label=name)
    if reference is not None:
        ax.plot(positions, reference, linestyle='none', marker='_', markersize=20, color='k',
                label='reference')
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, fontsize='small')
    ax.set_ylabel(ylabel)


def draw_report(ax, report, kind, nets=None):
    """Draw a report on `ax`; tabular kinds become bar charts."""
    if kind == TRACE_KIND:
        _plot_trace(ax, report, nets or sorted(report.node_voltages))
    elif kind == 'search':
        outcomes = _as_list(report)
        if len(outcomes) == 1 and outcomes[0].trace is not None:
            trace = outcomes[0].trace
            _plot_trace(ax, trace, [net for net in (nets or ('ml', 'en')) if net in trace.node_voltages])
            ax.axhline(outcomes[0].vref_car_v, linestyle='--', color='k', label='vref_car')
        else:
            _plot_levels(ax, [('ml_sample_v', [o.ml_sample_v for o in outcomes])], 'voltage (V)',
                         outcomes[0].vref_car_v if outcomes else None)
    elif kind == 'truth_table':
        _plot_levels(ax, [('mid_v', [r.mid_v for r in report]), ('ml_v', [r.ml_v for r in report])],
                     'voltage (V)')
    elif kind == 'aar_suite':
        _plot_levels(ax, [('psw_sample_v', [r['psw_sample_v'] for r in report.reads])], 'voltage (V)',
                     report.vref_aar_v)
    elif kind == 'table2':
        _plot_levels(ax, list(zip(report.patterns, report.levels_v)), 'ml sample (V)', report.vref_car_v)
    elif kind == 'energy_map':
        _plot_levels(ax, [(name, np.asarray(row) * 1e15) for name, row in zip(report.patterns, report.per_bit_j)],
                     'energy per bit (fJ)')
    elif kind == 'vsec_sweep':
        points = [(v, g * 1e3) for v, g in zip(report.values, report.gaps_v) if g is not None]
        ax.plot([v for v, _ in points], [g for _, g in points], marker='o', label=report.corner)
        ax.set_xlabel(report.parameter)
        ax.set_ylabel('gap (mV)')
    elif kind == 'device_card':
        volts = np.linspace(-1.0, 1.0, 201)
        amps = np.abs(iv_current(report.params, volts))
        ax.semilogy(volts, np.maximum(amps, 1e-15), label=str(report.params.state.label))
        ax.set_xlabel('voltage (V)')
        ax.set_ylabel('|current| (A)')
    elif kind == 'cell_energy':
        rows = list(report)
        _plot_bars(
            ax, [f'{r.search}/{r.stored}' for r in rows],
            [('pre_charge', [r.pre_charge_j * 1e15 for r in rows]),
             ('evaluate', [r.evaluate_j * 1e15 for r in rows])],
            'energy (fJ)',
        )
    elif kind == 'timing':
        quantities = (
            ('delay_hrs', report.ml_developing_delay_hrs_s, report.reference_delay_hrs_s),
            ('delay_lrs', report.ml_developing_delay_lrs_s, report.reference_delay_lrs_s),
            ('search', report.search_delay_s, report.reference_search_delay_s),
        )
        _plot_bars(
            ax, [name for name, _, _ in quantities],
            [('simulated', [np.nan if value is None else value * 1e12 for _, value, _ in quantities])],
            'delay (ps)', [reference * 1e12 for _, _, reference in quantities],
        )
    elif kind == 'write_sweep':
        for sweep in _as_list(report):
            points = [(p.r_ohms, p.v_across_v) for p in sweep.points if p.v_across_v is not None]
            ax.semilogx([r for r, _ in points], [v for _, v in points], marker='.', label=str(sweep.direction))
        ax.set_xlabel('series resistance (ohm)')
        ax.set_ylabel('|V across device| (V)')
    else:
        raise ValidationError({'format': f'SVG export is not available for {kind} reports.'})
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc='best', fontsize='small')


def render_svg(report, kind, nets=None):
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASHSALT, 'svg.fonttype': 'path'}):
        figure = Figure(figsize=(6.4, 4.0))
        ax = figure.add_subplot()
        ax.set_title(kind)
        draw_report(ax, report, kind, nets)
        buffer = io.BytesIO()
        figure.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def report_filename(kind, fmt, stem=None):
    stem = stem or kind
    return f'{stem}_report.json' if fmt == 'json' else f'{stem}.{fmt}'


def export_report(report, kind, fmt='json', out_dir=None, stem=None, nets=None):
    """
    Render `report` as `fmt` and write it under `out_dir`.

    Returns the written path.  `nets` selects columns or curves for trace
    exports.  IO failures surface as ValidationError naming the path.
    """
    if fmt not in FORMATS:
        raise ValidationError({'format': f'Format must be one of {", ".join(FORMATS)}.'})
    if kind != TRACE_KIND and kind not in REPORT_SERIALIZERS:
        raise ValidationError({'kind': f'Unknown report kind {kind!r}.'})
    if kind == TRACE_KIND and not isinstance(report, TransientTrace):
        raise ValidationError({'kind': 'Trace exports need a TransientTrace.'})

    renderers = {'json': render_json, 'csv': render_csv, 'svg': render_svg}
    payload = renderers[fmt](report, kind, nets)
    path = atomic_write(Path(out_dir or settings.CAMSIM_OUT) / report_filename(kind, fmt, stem), payload)
    logger.info('export kind=%s format=%s path=%s', kind, fmt, path)
    return path
