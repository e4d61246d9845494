"""
Tests for the scenario harnesses.

Full 64-row runs are tagged `slow`; exclude them with
`python manage.py test --exclude-tag=slow` or `pytest -m "not slow"`.
"""

import os

import pytest
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, tag

from tcam.array import ArrayConfig, Decision
from tcam.cell import CellConfig, WriteDirection
from tcam.circuit import SolverSettings
from tcam.exceptions import CalibrationError
from tcam.experiments import (
    CORNERS,
    REFERENCE_GAP_V,
    SweepPlan,
    SweepResult,
    calibrate_vsec,
    cell_energy_table,
    config_summary,
    developing_delay,
    energy_map,
    gap_cases,
    get_corner,
    measure_search_timing,
    run_aar_suite,
    run_table2_suite,
    sweep_vsec,
    write_esr_sweep,
)


def small_array(rows=4, **kwargs):
    return ArrayConfig(rows=rows, c_ml_f=50e-15 * rows / 64, **kwargs)


class SweepPlanTests(SimpleTestCase):
    """Test sweep plans."""

    def test_default_grid(self):
        """Test the 10 mV grid from 1.0 to 1.35 V."""
        values = SweepPlan().values()
        self.assertEqual(len(values), 36)
        self.assertEqual(values[0], 1.0)
        self.assertEqual(values[-1], 1.35)

    def test_vsec_bounds(self):
        """Test that a V_SEC plan must stay inside the supported range."""
        with self.assertRaises(ValidationError) as ctx:
            SweepPlan(start=0.9)
        self.assertIn('parameter', ctx.exception.message_dict)

    def test_step_positive(self):
        """Test that a zero step is refused."""
        with self.assertRaises(ValidationError):
            SweepPlan(step=0.0)

    def test_single_point_plan(self):
        """Test that start equal to stop gives one point."""
        self.assertEqual(SweepPlan(start=1.2, stop=1.2).values(), [1.2])

    def test_apply(self):
        """Test that the dotted path reaches the supplies."""
        cfg = SweepPlan().apply(ArrayConfig(), 1.2)
        self.assertEqual(cfg.vsec, 1.2)

    def test_unknown_path(self):
        """Test that an unknown path segment is a validation error."""
        plan = SweepPlan(parameter='cell.nope', start=1.0, stop=2.0, step=0.5)
        with self.assertRaises(ValidationError):
            plan.apply(ArrayConfig(), 1.0)


class CornerTests(SimpleTestCase):
    """Test process corners."""

    def test_five_corners(self):
        """Test the corner set."""
        self.assertEqual(set(CORNERS), {'ff', 'fs', 'tt', 'sf', 'ss'})

    def test_unknown_corner(self):
        """Test that an unknown corner name is refused."""
        with self.assertRaises(ValidationError):
            get_corner('xx')

    def test_slow_corner_scales_transistors(self):
        """Test that ss raises thresholds and lowers drive on every transistor."""
        cell = get_corner('ss').apply(ArrayConfig()).cell
        self.assertAlmostEqual(cell.q2.vth, 0.55)
        self.assertAlmostEqual(cell.q1.k, 0.9 * CellConfig().q1.k)

    def test_typical_corner_is_identity(self):
        """Test that tt leaves the configuration unchanged."""
        cfg = ArrayConfig()
        self.assertEqual(get_corner('tt').apply(cfg), cfg)


class SweepResultTests(SimpleTestCase):
    """Test sweep result summaries."""

    def test_argmax_skips_failures(self):
        """Test that failed points never win."""
        result = SweepResult('cell.supplies.vsec', 'tt', [1.0, 1.1, 1.2], [0.01, None, 0.02], {1: 'failed'})
        self.assertEqual(result.argmax, (1.2, 0.02))

    def test_empty_sweep(self):
        """Test that a sweep with no successful point has no argmax."""
        result = SweepResult('cell.supplies.vsec', 'tt', [1.0], [None], {0: 'failed'})
        self.assertIsNone(result.argmax)
        self.assertTrue(SweepResult('cell.supplies.vsec', 'tt', [], [], {}).unimodal)

    def test_unimodal(self):
        """Test the single-peak check."""
        peaked = SweepResult('p', 'tt', [1, 2, 3, 4], [0.01, 0.02, 0.03, 0.02], {})
        wavy = SweepResult('p', 'tt', [1, 2, 3, 4], [0.01, 0.03, 0.02, 0.03], {})
        self.assertTrue(peaked.unimodal)
        self.assertFalse(wavy.unimodal)


class GapTests(SimpleTestCase):
    """Test gap measurement and sweeps on a short match-line."""

    def test_gap_is_positive(self):
        """Test that the worst-case miss stays below every hit."""
        report = gap_cases(small_array())
        self.assertGreater(report.gap_v, 0.0)
        self.assertEqual(len(report.levels), 8)
        self.assertEqual(report.reference_gap_v, REFERENCE_GAP_V)

    def test_all_hit_never_develops(self):
        """Test that a matching search leaves ml above the developed level."""
        t_en, delay = developing_delay('HHLL', '1100', small_array())
        self.assertIsNotNone(t_en)
        self.assertIsNone(delay)

    def test_sweep_records_every_point(self):
        """Test a three-point V_SEC sweep."""
        plan = SweepPlan(start=1.1, stop=1.2, step=0.05)
        result = sweep_vsec(plan, 'tt', small_array())
        self.assertEqual(result.values, [1.1, 1.15, 1.2])
        self.assertEqual(result.errors, {})
        self.assertTrue(all(gap > 0 for gap in result.gaps_v))
        self.assertIn(result.argmax[0], result.values)

    def test_gap_tunable_by_vsec(self):
        """Test that the gap more than doubles between the ends of the V_SEC range."""
        plan = SweepPlan(start=1.0, stop=1.35, step=0.175)
        result = sweep_vsec(plan, 'tt', small_array())
        self.assertEqual(result.values, [1.0, 1.175, 1.35])
        self.assertEqual(result.errors, {})
        self.assertGreater(min(result.gaps_v), 0.0)
        self.assertGreater(max(result.gaps_v), 2 * min(result.gaps_v))

    def test_failed_points_are_recorded(self):
        """Test that solver failures become per-point errors."""
        solver = SolverSettings(newton_max_iter=1, max_halvings=0)
        cfg = small_array(cell=CellConfig(solver=solver))
        plan = SweepPlan(start=1.1, stop=1.15, step=0.05)
        result = sweep_vsec(plan, 'tt', cfg)
        self.assertEqual(set(result.errors), {0, 1})
        self.assertEqual(result.gaps_v, [None, None])
        self.assertIsNone(result.argmax)
        with self.assertRaises(CalibrationError):
            calibrate_vsec(cfg, plan=plan)


class EsrTests(SimpleTestCase):
    """Test the write drive sweep."""

    def test_forward_low_resistance_current(self):
        """Test that a 10 ohm load draws Q1's saturation current."""
        sweep = write_esr_sweep(WriteDirection.FORWARD, [10.0])
        expected = 0.5 * 2e-4 * (1.8 - 0.5) ** 2
        self.assertAlmostEqual(sweep.points[0].current_a, expected, delta=0.01 * expected)

    def test_reverse_weaker_than_forward(self):
        """Test that source degeneration lowers the reverse current at every load."""
        grid = [10.0, 1e3, 1e5]
        forward = write_esr_sweep('fwd', grid)
        reverse = write_esr_sweep('rev', grid)
        for f, r in zip(forward.points, reverse.points):
            self.assertLess(r.current_a, f.current_a, f.r_ohms)

    def test_forward_drop_dominates_pointwise(self):
        """Test that the forward drop across the load is never below the reverse one."""
        forward = write_esr_sweep('fwd').voltages()
        reverse = write_esr_sweep('rev').voltages()
        self.assertEqual(len(forward), len(reverse))
        for f, r in zip(forward, reverse):
            self.assertGreaterEqual(f, r)

    def test_voltage_grows_with_resistance(self):
        """Test that the drop across the load rises with its resistance."""
        voltages = write_esr_sweep('fwd', [10.0, 1e3, 1e5]).voltages()
        self.assertEqual(voltages, sorted(voltages))

    def test_default_grid(self):
        """Test the logarithmic grid from 10 ohm to 100 kohm."""
        sweep = write_esr_sweep('fwd')
        self.assertEqual(len(sweep.points), 25)
        self.assertAlmostEqual(sweep.points[0].r_ohms, 10.0)
        self.assertAlmostEqual(sweep.points[-1].r_ohms, 1e5)
        self.assertTrue(all(point.error is None for point in sweep.points))

    def test_non_positive_resistance(self):
        """Test that a zero resistance is refused."""
        with self.assertRaises(ValidationError):
            write_esr_sweep('fwd', [0.0])


class AarSuiteTests(SimpleTestCase):
    """Test the address-accessed read suite."""

    def test_all_rows_read_back(self):
        """Test that every row of both words reads correctly."""
        report = run_aar_suite(ArrayConfig(rows=4))
        self.assertEqual(len(report.reads), 8)
        self.assertTrue(report.all_correct)
        self.assertLess(report.lrs_v, report.vref_aar_v)
        self.assertLess(report.vref_aar_v, report.hrs_v)

    def test_reference_outside_window(self):
        """Test that a reference below the LRS level is a reported calibration failure."""
        report = run_aar_suite(ArrayConfig(rows=4, vref_aar=0.1))
        self.assertEqual(report.reads, [])
        self.assertIsNotNone(report.calibration_error)
        self.assertFalse(report.all_correct)

    def test_mixed_word_reads_per_row(self):
        """Test that an alternating word reads back bit by bit in row order."""
        report = run_aar_suite(ArrayConfig(rows=4), words=['HLLH'])
        self.assertEqual([read['bit'] for read in report.reads], [1, 0, 0, 1])
        self.assertEqual([read['row'] for read in report.reads], [0, 1, 2, 3])
        self.assertTrue(report.all_correct)

    def test_bad_word_refused(self):
        """Test that a word with a foreign character is a validation error."""
        with self.assertRaises(ValidationError):
            run_aar_suite(ArrayConfig(rows=4), words=['HLZH'])


class ConfigSummaryTests(SimpleTestCase):
    """Test the configuration block attached to reports."""

    def test_keys(self):
        """Test that the summary carries supplies, loads and references."""
        summary = config_summary(ArrayConfig())
        self.assertEqual(summary['vsec_v'], 1.18)
        self.assertEqual(summary['rows'], 64)
        self.assertIsNone(summary['vref_car_v'])


class CellEnergyTests(SimpleTestCase):
    """Test single-cell search energy."""

    def test_searching_hrs(self):
        """Test that driving cue into an LRS cell costs more than into an HRS cell."""
        rows = {(row.search, row.stored): row for row in cell_energy_table(ArrayConfig())}
        self.assertEqual(len(rows), 4)
        self.assertTrue(rows[('HRS', 'LRS')].miss)
        self.assertFalse(rows[('HRS', 'HRS')].miss)
        self.assertGreater(rows[('HRS', 'LRS')].total_j, rows[('HRS', 'HRS')].total_j)
        for row in rows.values():
            self.assertGreater(row.total_j, 0.0)
            self.assertAlmostEqual(row.pre_charge_j + row.evaluate_j, row.total_j,
                                   delta=1e-9 * row.total_j)

    def test_miss_costs_more_than_hit(self):
        """Test that for either stored state the mismatching search costs more."""
        rows = {(row.search, row.stored): row for row in cell_energy_table(ArrayConfig())}
        for stored, hit, miss in (('LRS', 'LRS', 'HRS'), ('HRS', 'HRS', 'LRS')):
            self.assertTrue(rows[(miss, stored)].miss)
            self.assertFalse(rows[(hit, stored)].miss)
            self.assertGreater(rows[(miss, stored)].total_j, rows[(hit, stored)].total_j, stored)

    def test_extremes(self):
        """Test that searching HRS is both the costliest case (on LRS) and the cheapest (on HRS)."""
        rows = cell_energy_table(ArrayConfig())
        totals = {(row.search, row.stored): row.total_j for row in rows}
        self.assertEqual(max(totals, key=totals.get), ('HRS', 'LRS'))
        self.assertEqual(min(totals, key=totals.get), ('HRS', 'HRS'))


@tag('slow')
@pytest.mark.slow
class FullArrayTests(SimpleTestCase):
    """Test the 64-row suites."""

    def test_table2(self):
        """Test that one reference separates all sixteen cases."""
        report = run_table2_suite(ArrayConfig())
        self.assertEqual(report.patterns, ['64HRS', '64LRS', '63HRS+1LRS', '1HRS+63LRS'])
        self.assertTrue(report.matches_reference)
        self.assertGreater(report.gap.gap_v, 5e-3)
        for k in range(4):
            self.assertEqual(report.decisions[k][k], Decision.HIT)

    def test_timing(self):
        """Test that both all-miss searches develop within the evaluation window."""
        report = measure_search_timing(ArrayConfig())
        self.assertIsNotNone(report.ml_developing_delay_hrs_s)
        self.assertIsNotNone(report.ml_developing_delay_lrs_s)
        self.assertLess(report.ml_developing_delay_hrs_s, report.ml_developing_delay_lrs_s)
        for delay in (report.ml_developing_delay_hrs_s, report.ml_developing_delay_lrs_s):
            self.assertGreaterEqual(delay, 50e-12)
            self.assertLessEqual(delay, 1e-9)
        self.assertAlmostEqual(report.evaluation_s, report.search_delay_s - report.pre_charge_s)

    def test_energy_map(self):
        """Test that shared lines make an array bit cheaper than an isolated cell."""
        report = energy_map(ArrayConfig())
        self.assertLess(report.array_per_bit_j, report.isolated_per_bit_j)
        self.assertLess(report.core_share, 0.2)
        self.assertEqual(len(report.per_bit_j), 4)

    def test_energy_map_orderings(self):
        """Test that the costliest case is a miss, the cheapest a hit, and misses cost more per column."""
        report = energy_map(ArrayConfig())
        worst_cue, worst_data = report.worst_cell
        best_cue, best_data = report.best_cell
        self.assertNotEqual(worst_cue, worst_data)
        self.assertEqual(best_cue, best_data)
        per_bit = report.per_bit_j
        self.assertGreater(per_bit[1][0], per_bit[0][0])
        self.assertGreater(per_bit[0][1], per_bit[1][1])

    def test_delay_scales_with_matchline_load(self):
        """Test that doubling c_ml doubles the Q2-limited developing delay within 15 %."""
        delays = [
            developing_delay('H' * 64, '0' * 64, ArrayConfig(c_ml_f=c_ml))[1]
            for c_ml in (25e-15, 50e-15, 100e-15)
        ]
        self.assertTrue(all(delay is not None for delay in delays))
        for short, long in zip(delays, delays[1:]):
            self.assertAlmostEqual(long / short, 2.0, delta=0.3)

    def test_corner_ordering(self):
        """Test that the gap-maximising V_SEC does not decrease from ff through tt to ss."""
        plan = SweepPlan(start=1.0, stop=1.35, step=0.05)
        cfg = small_array(rows=8)
        best = {name: sweep_vsec(plan, name, cfg).argmax[0] for name in ('ff', 'tt', 'ss')}
        self.assertLessEqual(best['ff'], best['tt'])
        self.assertLessEqual(best['tt'], best['ss'])

    def test_corner_ordering_full_column(self):
        """Test the ff, tt, ss ordering of the best V_SEC on 64 rows at 10 mV resolution."""
        jobs = os.cpu_count() or 1
        best = {
            name: sweep_vsec(SweepPlan(), name, ArrayConfig(), jobs=jobs).argmax[0]
            for name in ('ff', 'tt', 'ss')
        }
        self.assertLessEqual(best['ff'], best['tt'])
        self.assertLessEqual(best['tt'], best['ss'])

    def test_aar_full_column(self):
        """Test 128 correct reads and alternating bits for an alternating word."""
        report = run_aar_suite(ArrayConfig(), words=['H' * 64, 'L' * 64, 'HL' * 32])
        by_word = {}
        for read in report.reads:
            by_word.setdefault(read['word'], []).append(read['bit'])
        self.assertEqual(len(by_word[0]) + len(by_word[1]), 128)
        self.assertTrue(report.all_correct)
        self.assertEqual(by_word[2], [1, 0] * 32)
