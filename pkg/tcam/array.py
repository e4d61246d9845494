"""
Match-line columns, latch comparators and energy metering.

Design Decision: One Transient per Column
=========================================
A column is `rows` cells sharing ml/sw/pre/en, each row with its own
cue/cue_bar/psw drivers.  Columns never interact electrically during CAR,
so an array search is a list of independent column transients:

- Columns can run in worker processes; results come back in column order
- Row drivers are shared by every column of a row, so their line-load
  overhead is reported separately (`row_overhead_j`) and charged once per
  row when column reports are aggregated

Trade-offs:
- Row-line IR drop and crosstalk between columns are not modeled
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from django.core.exceptions import ValidationError
from django.db.models import TextChoices

from .cell import (
    CellConfig,
    CellNets,
    CueValue,
    PhaseSchedule,
    Operation,
    add_cell,
    add_column_periphery,
    add_psw_periphery,
    build_cell_netlist,
    car_markers,
    car_waveforms,
    column_car_waveforms,
    schedule_aar,
)
from .circuit import GND, Circuit, ElementGroup, NetRole, TransientTrace, transient_solve
from .device_model import ResistiveState, StateLabel
from .exceptions import CalibrationError, ConvergenceError

logger = logging.getLogger(__name__)

DATA_CHARS = {'H': StateLabel.HRS, 'L': StateLabel.LRS}
CUE_CHARS = {'1': CueValue.ONE, '0': CueValue.ZERO, 'X': CueValue.DONT_CARE}

PHASES = ('pre_charge', 'evaluate')
DRIVERS = ('cue', 'cue_bar', 'psw', 'pre', 'en', 'sw', 'comparators')
ROW_ROLES = (NetRole.CUE, NetRole.CUE_BAR, NetRole.PSW)
COLUMN_ROLES = (NetRole.SW, NetRole.PRE, NetRole.EN)
# The V_SEC supply only delivers charge through the pre-charge switch.
DRIVER_OF_ROLE = {NetRole.VSEC: 'pre'}

# (cue pattern, data pattern) index pairs holding a single worst-case miss.
WORST_MISS_CELLS = ((0, 2), (1, 3), (2, 0), (3, 1))


class Decision(TextChoices):
    HIT = 'Hit'
    MISS = 'Miss'


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 64
    cols: int = 64
    c_ml_f: float = 50e-15
    c_psw_f: float = 100e-15
    driver_load_f: float = 20e-15
    cell: CellConfig = field(default_factory=CellConfig)
    vref_car: float | None = None
    vref_aar: float | None = None
    comparator_offset_v: float = 0.0
    comparator_sigma_v: float = 0.0
    comparator_energy_j: float = 100e-15
    aar_min_separation_v: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        for name in ('rows', 'cols'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                errors[name] = f'{name} must be a positive integer.'
        for name in ('c_ml_f', 'c_psw_f', 'driver_load_f'):
            if not getattr(self, name) > 0:
                errors[name] = f'{name} must be positive.'
        if self.comparator_sigma_v < 0:
            errors['comparator_sigma_v'] = 'Offset spread cannot be negative.'
        if self.comparator_energy_j < 0:
            errors['comparator_energy_j'] = 'Comparator energy cannot be negative.'
        if not self.aar_min_separation_v > 0:
            errors['aar_min_separation_v'] = 'The AAR separation floor must be positive.'
        if errors:
            raise ValidationError(errors)

    @property
    def vsec(self):
        return self.cell.vsec

    def isolated(self):
        """One cell alone on a full match-line."""
        return replace(self, rows=1, cols=1)

    def with_cell(self, cell):
        return replace(self, cell=cell)


def _parse_word(text, rows, alphabet, field_name):
    if not isinstance(text, str):
        raise ValidationError({field_name: 'A pattern string is required.'})
    if rows is not None and len(text) != rows:
        raise ValidationError({
            field_name: f'Pattern has {len(text)} characters but {rows} rows are configured.'
        })
    for position, char in enumerate(text):
        if char not in alphabet:
            allowed = ', '.join(alphabet)
            raise ValidationError({
                field_name: f'Position {position}: {char!r} is not one of {allowed}.'
            })
    return tuple(alphabet[char] for char in text)


def parse_data_word(text, rows=None):
    """'H'/'L' string -> tuple of StateLabel."""
    return _parse_word(text, rows, DATA_CHARS, 'data')


def parse_cue_word(text, rows=None):
    """'1'/'0'/'X' string -> tuple of CueValue."""
    return _parse_word(text, rows, CUE_CHARS, 'cue')


def _state_label(stored):
    return stored.label if isinstance(stored, ResistiveState) else StateLabel(stored)


def data_word(data, rows):
    if isinstance(data, str):
        return parse_data_word(data, rows)
    data = tuple(data)
    if len(data) != rows:
        raise ValidationError({'data': f'Word has {len(data)} bits but {rows} rows are configured.'})
    return data


def cue_word(cue, rows):
    if isinstance(cue, str):
        return parse_cue_word(cue, rows)
    cue = tuple(CueValue(c) for c in cue)
    if len(cue) != rows:
        raise ValidationError({'cue': f'Word has {len(cue)} bits but {rows} rows are configured.'})
    return cue


def data_text(data):
    letters = {StateLabel.HRS: 'H', StateLabel.LRS: 'L'}
    return ''.join(letters.get(_state_label(stored), '?') for stored in data)


def cue_text(cue):
    return ''.join(CueValue(c).value for c in cue)


def miss_count(data, cue):
    """Pure-logic oracle: searched bits that disagree with the stored bit."""
    if len(data) != len(cue):
        raise ValidationError({'cue': 'Data and cue words differ in length.'})
    misses = 0
    for stored, searched in zip(data, cue):
        searched = CueValue(searched)
        if searched == CueValue.DONT_CARE:
            continue
        label = _state_label(stored)
        if label == StateLabel.CUSTOM:
            raise ValidationError({'data': 'Custom resistive states carry no bit.'})
        if (label == StateLabel.HRS) != (searched == CueValue.ONE):
            misses += 1
    return misses


def table2_patterns(rows):
    """The four data patterns of the functional suite; odd bits sit in the last row."""
    if rows < 2:
        raise ValidationError({'rows': 'The functional suite needs at least two rows.'})
    n = rows
    return (
        (f'{n}HRS', 'H' * n),
        (f'{n}LRS', 'L' * n),
        (f'{n - 1}HRS+1LRS', 'H' * (n - 1) + 'L'),
        (f'1HRS+{n - 1}LRS', 'L' * (n - 1) + 'H'),
    )


def matching_cue(data):
    return ''.join('1' if char == 'H' else '0' for char in data)


def calibration_cases(rows):
    """(data, cue, is_hit) for the four hits and the four worst-case misses."""
    patterns = [pattern for _, pattern in table2_patterns(rows)]
    cues = [matching_cue(pattern) for pattern in patterns]
    cases = [(patterns[k], cues[k], True) for k in range(len(patterns))]
    cases += [(patterns[data], cues[cue], False) for cue, data in WORST_MISS_CELLS]
    return cases


def _row_nets(index, rows):
    return CellNets.single() if rows == 1 else CellNets.row(index)


def build_matchline(data, cfg):
    """`rows` cells on one match-line carrying c_ml_f."""
    data = data_word(data, cfg.rows)
    circuit = Circuit(f'matchline[{cfg.rows}]')
    for index, stored in enumerate(data):
        rram = cfg.cell.storing(stored).rram
        add_cell(circuit, _row_nets(index, cfg.rows), rram, cfg.cell)
    add_column_periphery(circuit, cfg.cell)
    circuit.add_capacitor('c_ml', CellNets.single().ml, GND, cfg.c_ml_f)
    return circuit


def schedule_search(cue, cfg):
    """Per-row CAR drive on top of the shared column controls."""
    cue = cue_word(cue, cfg.rows)
    waveforms = column_car_waveforms(cfg.cell)
    for index, searched in enumerate(cue):
        waveforms.update(car_waveforms(searched, cfg.cell, _row_nets(index, cfg.rows)))
    timing = cfg.cell.timing
    return PhaseSchedule(
        Operation.CAR, timing.clock_period_s, waveforms, car_markers(cfg.cell),
        timing.car_end_s,
    )


def simulate_search(data, cue, cfg):
    circuit = build_matchline(data, cfg)
    schedule = schedule_search(cue, cfg)
    trace = transient_solve(circuit, schedule, dt=cfg.cell.dt_s, settings=cfg.cell.solver)
    return circuit, schedule, trace


def sample_matchline(data, cue, cfg):
    _, schedule, trace = simulate_search(data, cue, cfg)
    return trace.at(CellNets.single().ml, schedule.marker('sample'))


def calibrate_vref_car(hit_levels, miss_levels):
    """Midpoint of the [highest miss, lowest hit] window."""
    hit_levels, miss_levels = list(hit_levels), list(miss_levels)
    if not hit_levels or not miss_levels:
        raise CalibrationError('Calibration needs at least one hit and one miss level.')
    low, high = max(miss_levels), min(hit_levels)
    if high <= low:
        raise CalibrationError(
            f'No CAR window: lowest hit {high:.4f} V is not above highest miss {low:.4f} V.',
            low_v=low, high_v=high,
        )
    return 0.5 * (low + high)


@lru_cache(maxsize=32)
def calibrated_vref_car(cfg):
    hits, misses = [], []
    for data, cue, is_hit in calibration_cases(cfg.rows):
        level = sample_matchline(data, cue, cfg)
        (hits if is_hit else misses).append(level)
    vref = calibrate_vref_car(hits, misses)
    logger.info('calibrate vref_car_v=%.4f min_hit_v=%.4f max_miss_v=%.4f', vref, min(hits), max(misses))
    return vref


def comparator_offset_v(cfg, column=0):
    """Input-referred offset of a column's latch; Gaussian spread seeded per column."""
    offset = cfg.comparator_offset_v
    if cfg.comparator_sigma_v > 0:
        rng = np.random.default_rng([cfg.seed, column])
        offset += float(rng.normal(0.0, cfg.comparator_sigma_v))
    return offset


def decide(ml_sample_v, vref, offset_v=0.0):
    """Clocked comparison; a tie resolves to Hit."""
    return Decision.HIT if ml_sample_v + offset_v >= vref else Decision.MISS


@dataclass
class EnergyReport:
    phase_j: dict
    driver_j: dict
    core_j: float
    periphery_j: float
    row_overhead_by_driver: dict
    bits: int
    searches: int = 1

    @property
    def row_overhead_j(self):
        return sum(self.row_overhead_by_driver.values())

    @property
    def total_j(self):
        return sum(self.phase_j.values())

    @property
    def parts_total_j(self):
        return sum(self.driver_j.values())

    @property
    def per_bit_j(self):
        return self.total_j / (self.bits * self.searches)

    @property
    def core_share(self):
        return self.core_j / self.total_j if self.total_j else 0.0

    def per_bit_in_array_j(self, cols):
        """Per-bit energy of this column when its row lines are shared by `cols` columns."""
        shared = self.total_j - self.row_overhead_j + self.row_overhead_j / cols
        return shared / (self.bits * self.searches)


def _driver_load_f(role, cfg):
    if role in ROW_ROLES:
        return cfg.driver_load_f * cfg.cols / 64
    if role in COLUMN_ROLES:
        return cfg.driver_load_f * cfg.rows / 64
    return 0.0


def rise_split(waveform, t_split):
    """
    Rising swing of a waveform before and after t_split.

    Searches repeat, so every line rises as far as it falls; a line that
    opens the window high (sw) was raised at the start of this search.
    """
    before = after = fall = 0.0
    for t0, t1, dv in waveform.edges():
        if dv <= 0:
            fall -= dv
            continue
        share = float(np.clip((t_split - t0) / (t1 - t0), 0.0, 1.0))
        before += dv * share
        after += dv * (1.0 - share)
    before += max(fall - before - after, 0.0)
    return before, after


def restore_energy_j(trace, cfg):
    """V_SEC energy that brings ml back from its final level to a full pre-charge."""
    drained = cfg.vsec - trace.at(CellNets.single().ml, trace.t_end)
    return cfg.vsec * cfg.c_ml_f * max(drained, 0.0)


def account_energy(trace, cfg, comparators=1):
    """
    Phase, driver and core/periphery energy of one CAR trace.

    Source energy is split at the enable marker; each driven line also
    charges its driver load (C_load * V_high per volt of rising swing).  The
    charge ml lost is put back from V_SEC by the next pre-charge and billed
    to this search's evaluation.
    """
    t_split = trace.markers.get('enable', trace.t_end)
    phase = dict.fromkeys(PHASES, 0.0)
    driver = dict.fromkeys(DRIVERS, 0.0)
    row_overhead = {}

    for net, energy in trace.source_energy.items():
        role = trace.net_roles[net]
        early = trace.cumulative_at(energy, t_split)
        late = float(energy[-1]) - early
        name = DRIVER_OF_ROLE.get(role, str(role))
        load = _driver_load_f(role, cfg)
        if load:
            waveform = trace.waveforms[net]
            rise_early, rise_late = rise_split(waveform, t_split)
            early += load * waveform.high_v * rise_early
            late += load * waveform.high_v * rise_late
            if role in ROW_ROLES:
                overhead = load * waveform.high_v * (rise_early + rise_late)
                row_overhead[name] = row_overhead.get(name, 0.0) + overhead
        phase['pre_charge'] += early
        phase['evaluate'] += late
        driver[name] = driver.get(name, 0.0) + early + late

    restore = restore_energy_j(trace, cfg)
    phase['evaluate'] += restore
    driver[DRIVER_OF_ROLE[NetRole.VSEC]] += restore

    comparator = comparators * cfg.comparator_energy_j
    phase['evaluate'] += comparator
    driver['comparators'] += comparator

    core = sum(
        float(series[-1]) for name, series in trace.element_energy.items()
        if trace.element_group[name] == ElementGroup.CORE
    )
    total = sum(phase.values())
    return EnergyReport(phase, driver, core, total - core, row_overhead, bits=cfg.rows)


@dataclass
class SearchOutcome:
    data: str
    cue: str
    ml_sample_v: float
    vref_car_v: float
    decision: str
    miss_count_truth: int
    energy: EnergyReport
    column: int = 0
    trace: TransientTrace | None = field(default=None, repr=False, compare=False)

    @property
    def correct(self):
        return (self.decision == Decision.HIT) == (self.miss_count_truth == 0)


def run_search(data, cue, cfg, column=0, keep_trace=True):
    """One column search; calibrates vref_car first when the config has none."""
    data = data_word(data, cfg.rows)
    cue = cue_word(cue, cfg.rows)
    vref = cfg.vref_car if cfg.vref_car is not None else calibrated_vref_car(cfg)
    _, schedule, trace = simulate_search(data, cue, cfg)
    ml_v = trace.at(CellNets.single().ml, schedule.marker('sample'))
    decision = decide(ml_v, vref, comparator_offset_v(cfg, column))
    outcome = SearchOutcome(
        data=data_text(data),
        cue=cue_text(cue),
        ml_sample_v=ml_v,
        vref_car_v=vref,
        decision=decision,
        miss_count_truth=miss_count(data, cue),
        energy=account_energy(trace, cfg),
        column=column,
        trace=trace if keep_trace else None,
    )
    logger.info(
        'search column=%d ml_sample_v=%.4f vref_car_v=%.4f decision=%s misses=%d',
        column, ml_v, vref, decision, outcome.miss_count_truth,
    )
    return outcome


def map_jobs(fn, items, jobs=1):
    """fn over items, in order; worker processes when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))


def _search_task(task):
    data, cue, cfg, column = task
    try:
        return run_search(data, cue, cfg, column=column, keep_trace=False)
    except ConvergenceError as exc:
        return exc


def array_search_parallel(all_data, cue, cfg, jobs=1):
    """Search every column with one shared cue; outcomes come back in column order."""
    all_data = list(all_data)
    if len(all_data) != cfg.cols:
        raise ValidationError({'data': f'{len(all_data)} columns given but {cfg.cols} are configured.'})
    cue = cue_word(cue, cfg.rows)
    if cfg.vref_car is None:
        cfg = replace(cfg, vref_car=calibrated_vref_car(cfg))

    results = map_jobs(
        _search_task, [(data, cue, cfg, column) for column, data in enumerate(all_data)], jobs,
    )
    failures = [(column, result) for column, result in enumerate(results)
                if isinstance(result, ConvergenceError)]
    if failures:
        detail = '; '.join(f'column {column}: {exc}' for column, exc in failures)
        worst = max((exc.worst_residual_a or 0.0) for _, exc in failures)
        raise ConvergenceError(f'{len(failures)} of {cfg.cols} columns failed: {detail}', worst)
    return results


def array_energy_j(outcomes):
    """Array total with the shared row-line overhead charged once per row."""
    if not outcomes:
        return 0.0
    total = sum(outcome.energy.total_j for outcome in outcomes)
    return total - (len(outcomes) - 1) * outcomes[0].energy.row_overhead_j


@dataclass(frozen=True)
class AarRead:
    stored: str
    bit: int
    psw_sample_v: float
    vref_aar_v: float

    @property
    def correct(self):
        return self.bit == (1 if self.stored == StateLabel.HRS else 0)


@dataclass(frozen=True)
class AarWindow:
    lrs_v: float
    hrs_v: float

    @property
    def separation_v(self):
        return self.hrs_v - self.lrs_v

    @property
    def vref_v(self):
        return 0.5 * (self.lrs_v + self.hrs_v)

    def contains(self, vref):
        return self.lrs_v < vref < self.hrs_v


def build_aar_row(stored, cfg):
    cell = cfg.cell.storing(stored)
    circuit = build_cell_netlist(cell)
    circuit.add_capacitor('c_ml', CellNets.single().ml, GND, cfg.c_ml_f)
    add_psw_periphery(circuit, cell, cfg.c_psw_f)
    return circuit


def aar_sample(stored, cfg, **schedule_options):
    """psw voltage at the AAR sample marker, plus the trace."""
    circuit = build_aar_row(stored, cfg)
    schedule = schedule_aar(cfg.cell, **schedule_options)
    trace = transient_solve(circuit, schedule, dt=cfg.cell.dt_s, settings=cfg.cell.solver)
    return trace.at(CellNets.single().psw, schedule.marker('sample')), trace


def calibrate_vref_aar(cfg):
    """Both AAR extremes; refuses windows narrower than aar_min_separation_v."""
    window = AarWindow(
        lrs_v=aar_sample(StateLabel.LRS, cfg)[0],
        hrs_v=aar_sample(StateLabel.HRS, cfg)[0],
    )
    if window.separation_v < cfg.aar_min_separation_v:
        raise CalibrationError(
            f'AAR levels are {window.separation_v * 1e3:.1f} mV apart; '
            f'at least {cfg.aar_min_separation_v * 1e3:.1f} mV is required.',
            low_v=window.lrs_v, high_v=window.hrs_v,
        )
    logger.info('calibrate vref_aar_v=%.4f lrs_v=%.4f hrs_v=%.4f', window.vref_v, window.lrs_v, window.hrs_v)
    return window


def run_aar_row(data_bit, cfg, row=0):
    """Read one cell through its psw tank; the row's latch adds its own offset."""
    if cfg.vref_aar is None:
        raise CalibrationError('vref_aar is not set; calibrate it with calibrate_vref_aar first.')
    label = _state_label(data_bit)
    level, _ = aar_sample(data_bit, cfg)
    # psw latches are numbered after the match-line latches
    offset = comparator_offset_v(cfg, cfg.cols + row)
    bit = 1 if level + offset >= cfg.vref_aar else 0
    return AarRead(label, bit, level, cfg.vref_aar)
