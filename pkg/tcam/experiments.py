"""
Scenario harnesses: functional suite, V_SEC and corner sweeps, timing,
energy maps, write drive and address-addressable reads.

Every harness takes an ArrayConfig (and a worker count where points are
independent) and returns a plain dataclass report; the serializers turn
those into files.
"""

import logging
from dataclasses import dataclass, field, fields, is_dataclass, replace

import numpy as np
from django.core.exceptions import ValidationError

from .array import (
    WORST_MISS_CELLS,
    ArrayConfig,
    Decision,
    account_energy,
    calibrate_vref_aar,
    calibrate_vref_car,
    comparator_offset_v,
    decide,
    map_jobs,
    matching_cue,
    parse_data_word,
    run_aar_row,
    sample_matchline,
    simulate_search,
    table2_patterns,
)
from .cell import CellNets, WriteDirection, build_write_stack, schedule_write
from .circuit import Edge, dc_operating_point, measure_delay
from .exceptions import CalibrationError, ConvergenceError

logger = logging.getLogger(__name__)

REFERENCE_GAP_V = 36.18e-3
REFERENCE_DELAY_HRS_S = 143e-12
REFERENCE_DELAY_LRS_S = 163e-12
REFERENCE_SEARCH_DELAY_S = 1.163e-9
DEVELOPED_FRACTION = 0.1
ESR_GRID_OHMS = tuple(np.geomspace(10.0, 1e5, 25))


@dataclass(frozen=True)
class CornerModel:
    name: str
    vth_scale: float
    k_scale: float

    def apply(self, cfg):
        return cfg.with_cell(cfg.cell.scaled_transistors(self.vth_scale, self.k_scale))


CORNERS = {
    corner.name: corner
    for corner in (
        CornerModel('ff', 0.90, 1.10),
        CornerModel('fs', 0.95, 1.05),
        CornerModel('tt', 1.00, 1.00),
        CornerModel('sf', 1.05, 0.95),
        CornerModel('ss', 1.10, 0.90),
    )
}


def get_corner(name):
    try:
        return CORNERS[name]
    except KeyError:
        raise ValidationError({'corner': f'Unknown corner {name!r}; choose from {", ".join(CORNERS)}.'})


def _replace_path(obj, path, value):
    head, _, rest = path.partition('.')
    if not is_dataclass(obj) or head not in {f.name for f in fields(obj)}:
        raise ValidationError({'parameter': f'Unknown parameter path segment {head!r}.'})
    if rest:
        value = _replace_path(getattr(obj, head), rest, value)
    return replace(obj, **{head: value})


@dataclass(frozen=True)
class SweepPlan:
    """`parameter` is a dotted path into ArrayConfig, e.g. 'cell.supplies.vsec'."""

    parameter: str = 'cell.supplies.vsec'
    start: float = 1.0
    stop: float = 1.35
    step: float = 0.01

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        if not self.step > 0:
            errors['step'] = 'Step must be positive.'
        if self.start > self.stop:
            errors['start'] = 'Start must not exceed stop.'
        if self.parameter.endswith('supplies.vsec'):
            low, high = 1.0, 1.4
            if self.start < low or self.stop > high:
                errors['parameter'] = f'V_SEC sweeps must stay within [{low}, {high}] V.'
        if errors:
            raise ValidationError(errors)

    def values(self):
        count = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [round(self.start + k * self.step, 12) for k in range(count)]

    def apply(self, cfg, value):
        return _replace_path(cfg, self.parameter, value)


def config_summary(cfg):
    """The configuration values a report ran with."""
    cell = cfg.cell
    return {
        'rows': cfg.rows,
        'cols': cfg.cols,
        'vdd_v': cell.vdd,
        'vsec_v': cell.vsec,
        'c_ml_f': cfg.c_ml_f,
        'c_psw_f': cfg.c_psw_f,
        'c_b_f': cell.c_b_f,
        'driver_load_f': cfg.driver_load_f,
        'clock_period_s': cell.timing.clock_period_s,
        'dt_s': cell.dt_s,
        'q2_vth_v': cell.q2.vth,
        'vref_car_v': cfg.vref_car,
        'vref_aar_v': cfg.vref_aar,
    }


@dataclass
class GapReport:
    min_hit_v: float
    max_worst_miss_v: float
    levels: dict = field(default_factory=dict)
    reference_gap_v: float = REFERENCE_GAP_V

    @property
    def gap_v(self):
        return self.min_hit_v - self.max_worst_miss_v


def _sample_task(task):
    data, cue, cfg = task
    return sample_matchline(data, cue, cfg)


def gap_cases(cfg, jobs=1):
    """Gap from the four hits and the four worst-case misses only."""
    patterns = table2_patterns(cfg.rows)
    data = [pattern for _, pattern in patterns]
    cues = [matching_cue(pattern) for pattern in data]
    cells = [(k, k) for k in range(len(data))] + list(WORST_MISS_CELLS)
    levels = map_jobs(_sample_task, [(data[j], cues[i], cfg) for i, j in cells], jobs)
    by_cell = dict(zip(cells, levels))
    hits = levels[:len(data)]
    misses = levels[len(data):]
    return GapReport(
        min(hits), max(misses),
        {(patterns[i][0], patterns[j][0]): v for (i, j), v in by_cell.items()},
    )


@dataclass
class Table2Report:
    patterns: list
    levels_v: list
    decisions: list
    expected: list
    vref_car_v: float
    gap: GapReport
    misclassified: list
    config: dict = field(default_factory=dict)

    @property
    def matches_reference(self):
        return not self.misclassified


def run_table2_suite(cfg, jobs=1):
    """
    Four cue patterns against four data patterns with one reference.

    Rows of the matrices are cue patterns (the cue matching data pattern i),
    columns are data patterns; hits sit on the diagonal.
    """
    patterns = table2_patterns(cfg.rows)
    names = [name for name, _ in patterns]
    data = [pattern for _, pattern in patterns]
    cues = [matching_cue(pattern) for pattern in data]
    n = len(data)

    flat = map_jobs(_sample_task, [(data[j], cues[i], cfg) for i in range(n) for j in range(n)], jobs)
    levels = [flat[i * n:(i + 1) * n] for i in range(n)]
    hits = [levels[k][k] for k in range(n)]
    worst = [levels[i][j] for i, j in WORST_MISS_CELLS]
    vref = cfg.vref_car if cfg.vref_car is not None else calibrate_vref_car(hits, worst)

    decisions = [
        [decide(levels[i][j], vref, comparator_offset_v(cfg, j)) for j in range(n)]
        for i in range(n)
    ]
    expected = [[Decision.HIT if i == j else Decision.MISS for j in range(n)] for i in range(n)]
    misclassified = [
        {
            'cue': names[i],
            'data': names[j],
            'ml_sample_v': levels[i][j],
            'decision': decisions[i][j],
            'expected': expected[i][j],
        }
        for i in range(n) for j in range(n)
        if decisions[i][j] != expected[i][j]
    ]
    gap = GapReport(
        min(hits), max(worst),
        {(names[i], names[j]): levels[i][j] for i, j in [(k, k) for k in range(n)] + list(WORST_MISS_CELLS)},
    )
    for case in misclassified:
        logger.warning(
            'table2 misclassified cue=%s data=%s ml_sample_v=%.4f decision=%s',
            case['cue'], case['data'], case['ml_sample_v'], case['decision'],
        )
    logger.info('table2 vref_car_v=%.4f gap_v=%.4f misclassified=%d', vref, gap.gap_v, len(misclassified))
    return Table2Report(names, levels, decisions, expected, vref, gap, misclassified, config_summary(cfg))


@dataclass
class SweepResult:
    parameter: str
    corner: str
    values: list
    gaps_v: list
    errors: dict

    @property
    def argmax(self):
        """(value, gap) of the best successful point; None when every point failed."""
        scored = [(gap, value) for value, gap in zip(self.values, self.gaps_v) if gap is not None]
        if not scored:
            return None
        best = max(range(len(scored)), key=lambda k: scored[k][0])
        gap, value = scored[best]
        return value, gap

    @property
    def unimodal(self):
        """At most one rise-to-fall turn over the successful points."""
        gaps = [gap for gap in self.gaps_v if gap is not None]
        signs = [np.sign(d) for d in np.diff(gaps) if abs(d) > 1e-6]
        turns = sum(1 for s0, s1 in zip(signs, signs[1:]) if s0 > 0 > s1)
        rises_after_fall = any(s0 < 0 < s1 for s0, s1 in zip(signs, signs[1:]))
        return turns <= 1 and not rises_after_fall


def _gap_task(cfg):
    try:
        return gap_cases(cfg).gap_v, None
    except (ConvergenceError, ValidationError) as exc:
        return None, str(exc)


def sweep_vsec(plan, corner, cfg=None, jobs=1):
    """Gap versus the swept parameter under one corner; failed points are recorded."""
    corner = get_corner(corner) if isinstance(corner, str) else corner
    base = corner.apply(cfg or ArrayConfig())
    values = plan.values()
    outcomes = map_jobs(_gap_task, [plan.apply(base, value) for value in values], jobs)
    gaps = [gap for gap, _ in outcomes]
    errors = {k: error for k, (_, error) in enumerate(outcomes) if error}
    for k, error in errors.items():
        logger.warning('sweep corner=%s value=%.4f error=%s', corner.name, values[k], error)
    result = SweepResult(plan.parameter, corner.name, values, gaps, errors)
    best = result.argmax
    logger.info(
        'sweep corner=%s points=%d failed=%d argmax=%s',
        corner.name, len(values), len(errors), 'none' if best is None else f'{best[0]:.3f}',
    )
    return result


def calibrate_vsec(cfg, corner='tt', plan=None, jobs=1):
    """V_SEC that maximizes the gap over `plan`."""
    result = sweep_vsec(plan or SweepPlan(), corner, cfg, jobs)
    best = result.argmax
    if best is None:
        raise CalibrationError('Every V_SEC sweep point failed.')
    return best[0]


@dataclass
class TimingReport:
    ml_developing_delay_hrs_s: float | None
    ml_developing_delay_lrs_s: float | None
    search_delay_s: float | None
    pre_charge_s: float
    evaluation_s: float | None
    reference_delay_hrs_s: float = REFERENCE_DELAY_HRS_S
    reference_delay_lrs_s: float = REFERENCE_DELAY_LRS_S
    reference_search_delay_s: float = REFERENCE_SEARCH_DELAY_S
    config: dict = field(default_factory=dict)


def developing_delay(data, cue, cfg):
    """
    (en assert time, ml developing delay) of one search.

    en asserts when it crosses half its swing; the delay runs to ml falling
    below 10 % of V_SEC and is None when ml never gets there.
    """
    _, _, trace = simulate_search(data, cue, cfg)
    nets = CellNets.single()
    t_en = measure_delay(trace, nets.en, 0.5 * cfg.cell.vdd, Edge.RISING)
    if t_en is None:
        return None, None
    delay = measure_delay(trace, nets.ml, DEVELOPED_FRACTION * cfg.vsec, Edge.FALLING, start=t_en)
    return t_en, delay


def measure_search_timing(cfg):
    """All-miss developing delays for searching HRS (cue 1 vs LRS data) and LRS."""
    rows = cfg.rows
    t_en_hrs, delay_hrs = developing_delay('L' * rows, '1' * rows, cfg)
    t_en_lrs, delay_lrs = developing_delay('H' * rows, '0' * rows, cfg)
    finished = [
        t_en + delay
        for t_en, delay in ((t_en_hrs, delay_hrs), (t_en_lrs, delay_lrs))
        if delay is not None
    ]
    pre_charge = cfg.cell.timing.clock_period_s
    search_delay = max(finished) if finished else None
    report = TimingReport(
        ml_developing_delay_hrs_s=delay_hrs,
        ml_developing_delay_lrs_s=delay_lrs,
        search_delay_s=search_delay,
        pre_charge_s=pre_charge,
        evaluation_s=None if search_delay is None else search_delay - pre_charge,
        config=config_summary(cfg),
    )
    for name, delay in (('hrs', delay_hrs), ('lrs', delay_lrs)):
        if delay is None:
            logger.warning('timing search=%s ml never developed', name)
    logger.info('timing delay_hrs_s=%s delay_lrs_s=%s', delay_hrs, delay_lrs)
    return report


def _energy_task(task):
    data, cue, cfg = task
    _, _, trace = simulate_search(data, cue, cfg)
    return account_energy(trace, cfg)


@dataclass
class EnergyMap:
    patterns: list
    per_bit_j: list
    breakdown_j: dict
    core_j: float
    periphery_j: float
    array_per_bit_j: float
    isolated_per_bit_j: float
    worst_cell: tuple
    best_cell: tuple
    reference_worst_cell: tuple
    reference_best_cell: tuple
    config: dict = field(default_factory=dict)

    @property
    def core_share(self):
        total = self.core_j + self.periphery_j
        return self.core_j / total if total else 0.0


def energy_map(cfg, jobs=1):
    """
    Per-bit search energy for the 4x4 functional cases.

    Each column report is normalized as one column of a `cols`-wide array,
    so shared row-line overhead is spread across the columns.  The
    breakdown sums every case with that overhead charged once.
    """
    patterns = table2_patterns(cfg.rows)
    names = [name for name, _ in patterns]
    data = [pattern for _, pattern in patterns]
    cues = [matching_cue(pattern) for pattern in data]
    n = len(data)

    flat = map_jobs(_energy_task, [(data[j], cues[i], cfg) for i in range(n) for j in range(n)], jobs)
    per_bit = [[flat[i * n + j].per_bit_in_array_j(cfg.cols) for j in range(n)] for i in range(n)]

    breakdown = {}
    core = periphery = 0.0
    for report in flat:
        share = 1.0 - 1.0 / cfg.cols
        for name, value in report.driver_j.items():
            breakdown[name] = breakdown.get(name, 0.0) + value
        for name, overhead in report.row_overhead_by_driver.items():
            breakdown[name] -= share * overhead
        core += report.core_j
        periphery += report.periphery_j - share * report.row_overhead_j

    cells = [(i, j) for i in range(n) for j in range(n)]
    worst = max(cells, key=lambda c: per_bit[c[0]][c[1]])
    best = min(cells, key=lambda c: per_bit[c[0]][c[1]])

    hit = matching_cue(data[0])
    isolated = cfg.isolated()
    isolated_report = _energy_task((data[0][:1], hit[:1], isolated))
    result = EnergyMap(
        patterns=names,
        per_bit_j=per_bit,
        breakdown_j=breakdown,
        core_j=core,
        periphery_j=periphery,
        array_per_bit_j=per_bit[0][0],
        isolated_per_bit_j=isolated_report.per_bit_j,
        worst_cell=(names[worst[0]], names[worst[1]]),
        best_cell=(names[best[0]], names[best[1]]),
        reference_worst_cell=(names[1], names[0]),
        reference_best_cell=(names[1], names[1]),
        config=config_summary(cfg),
    )
    logger.info(
        'energy_map worst=%s best=%s core_share=%.3f isolated_per_bit_j=%.4e array_per_bit_j=%.4e',
        result.worst_cell, result.best_cell, result.core_share,
        result.isolated_per_bit_j, result.array_per_bit_j,
    )
    return result


@dataclass
class CellEnergyRow:
    search: str
    stored: str
    pre_charge_j: float
    evaluate_j: float
    total_j: float
    miss: bool


def cell_energy_table(cfg):
    """Single-cell CAR energy for searching HRS/LRS against each stored state."""
    isolated = cfg.isolated()
    rows = []
    for search, cue in (('HRS', '1'), ('LRS', '0')):
        for stored in ('L', 'H'):
            report = _energy_task((stored, cue, isolated))
            rows.append(CellEnergyRow(
                search=search,
                stored='LRS' if stored == 'L' else 'HRS',
                pre_charge_j=report.phase_j['pre_charge'],
                evaluate_j=report.phase_j['evaluate'],
                total_j=report.total_j,
                miss=(stored == 'H') != (cue == '1'),
            ))
    return rows


@dataclass
class EsrPoint:
    r_ohms: float
    v_across_v: float | None
    current_a: float | None
    error: str | None = None


@dataclass
class EsrSweep:
    direction: str
    points: list

    def voltages(self):
        return [point.v_across_v for point in self.points]


def write_esr_sweep(direction, resistances=None, cfg=None):
    """DC drive across a linear stand-in for the RRAM over a resistance grid."""
    direction = WriteDirection(direction)
    cell = (cfg or ArrayConfig()).cell
    resistances = ESR_GRID_OHMS if resistances is None else tuple(resistances)
    if any(not r > 0 for r in resistances):
        raise ValidationError({'resistances': 'Resistances must be positive.'})

    schedule = schedule_write(direction, cell)
    t_mid = 0.5 * (schedule.marker('write_start') + schedule.marker('write_end'))
    nets = CellNets.single()
    points = []
    for r_ohms in resistances:
        circuit = build_write_stack(cell, resistor_ohms=r_ohms)
        biases = {
            net: float(waveform(t_mid))
            for net, waveform in schedule.waveforms.items()
            if net in circuit.nets
        }
        try:
            voltages = dc_operating_point(circuit, biases, settings=cell.solver)
        except ConvergenceError as exc:
            logger.warning('esr direction=%s r_ohms=%.4g error=%s', direction.value, r_ohms, exc)
            points.append(EsrPoint(float(r_ohms), None, None, str(exc)))
            continue
        v_across = voltages[nets.cue] - voltages[nets.mid]
        points.append(EsrPoint(float(r_ohms), abs(v_across), abs(v_across) / r_ohms))
    logger.info('esr direction=%s points=%d', direction.value, len(points))
    return EsrSweep(direction, points)


@dataclass
class AarSuiteReport:
    vref_aar_v: float | None
    lrs_v: float | None
    hrs_v: float | None
    reads: list
    calibration_error: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def misreads(self):
        return [read for read in self.reads if not read['correct']]

    @property
    def all_correct(self):
        return self.calibration_error is None and not self.misreads


def _aar_task(args):
    stored, cfg, row = args
    return run_aar_row(stored, cfg, row)


def run_aar_suite(cfg, words=None, jobs=1):
    """
    Read every row of each data word through the psw charge tank.

    Each row runs its own AAR transient and latches against its own offset.
    A reference outside the measured [LRS, HRS] window is reported as a
    calibration failure.
    """
    rows = cfg.rows
    words = words or ['H' * rows, 'L' * rows]
    try:
        window = calibrate_vref_aar(cfg)
    except CalibrationError as exc:
        logger.warning('aar calibration_error=%s', exc)
        return AarSuiteReport(None, exc.low_v, exc.high_v, [], str(exc), config_summary(cfg))

    vref = cfg.vref_aar if cfg.vref_aar is not None else window.vref_v
    if not window.contains(vref):
        message = (
            f'vref_aar {vref:.4f} V lies outside the measured window '
            f'[{window.lrs_v:.4f}, {window.hrs_v:.4f}] V.'
        )
        logger.warning('aar calibration_error=%s', message)
        return AarSuiteReport(vref, window.lrs_v, window.hrs_v, [], message, config_summary(cfg))

    stored = [parse_data_word(word, rows) for word in words]
    reading = replace(cfg, vref_aar=vref)
    cells = [(k, row, bit) for k, word in enumerate(stored) for row, bit in enumerate(word)]
    results = map_jobs(_aar_task, [(bit, reading, row) for _, row, bit in cells], jobs)
    reads = [
        {
            'word': word_index,
            'row': row,
            'stored': read.stored,
            'bit': read.bit,
            'psw_sample_v': read.psw_sample_v,
            'correct': read.correct,
        }
        for (word_index, row, _), read in zip(cells, results)
    ]
    report = AarSuiteReport(vref, window.lrs_v, window.hrs_v, reads, None, config_summary(cfg))
    logger.info('aar reads=%d misreads=%d vref_aar_v=%.4f', len(reads), len(report.misreads), vref)
    return report
