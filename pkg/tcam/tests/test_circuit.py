"""
Tests for the nodal circuit engine.

Coverage includes:
- Square-law transistor currents
- DC operating points against bisection and closed forms
- Implicit-Euler transients against RC closed forms
- Charge and energy bookkeeping
- Delay measurement and failure reporting
"""

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from scipy.optimize import brentq

from tcam.circuit import (
    GND,
    Circuit,
    Edge,
    MosParams,
    NetRole,
    PwlWaveform,
    SolverSettings,
    dc_operating_point,
    element_current,
    measure_delay,
    mos_current,
    stored_energy,
    trace_to_rows,
    transient_solve,
)
from tcam.device_model import LRS_STATE, RramParams, iv_current
from tcam.exceptions import ConvergenceError


def rc_circuit(r_ohms=100e3, c_f=10e-15):
    circuit = Circuit('rc')
    circuit.add_net('n')
    circuit.add_resistor('r', 'n', GND, r_ohms)
    circuit.add_capacitor('c', 'n', GND, c_f)
    return circuit


def charging_circuit(r_ohms=10e3, c_f=50e-15, volts=1.18):
    circuit = Circuit('charge')
    circuit.add_net('src', NetRole.VSEC)
    circuit.add_net('n')
    circuit.add_fixed_source('supply', 'src', volts)
    circuit.add_resistor('r', 'src', 'n', r_ohms)
    circuit.add_capacitor('c', 'n', GND, c_f)
    return circuit


def divider():
    circuit = Circuit('divider')
    circuit.add_net('vdd', NetRole.VDD)
    circuit.add_net('mid')
    circuit.add_fixed_source('supply', 'vdd', 1.8)
    circuit.add_resistor('r1', 'vdd', 'mid', 10e3)
    circuit.add_resistor('r2', 'mid', GND, 10e3)
    return circuit


class MosCurrentTests(SimpleTestCase):
    """Test the square-law transistor model."""

    def test_cutoff(self):
        """Test that a gate below threshold conducts only ioff."""
        self.assertEqual(mos_current(MosParams(), 0.4, 1.0), 0.0)
        self.assertEqual(mos_current(MosParams(ioff=1e-12), 0.4, 1.0), 1e-12)

    def test_saturation(self):
        """Test k/2 (vgs - vth)^2 in saturation."""
        self.assertAlmostEqual(mos_current(MosParams(), 1.8, 1.8), 0.5 * 2e-4 * 1.3 ** 2, delta=1e-15)
        self.assertAlmostEqual(mos_current(MosParams(), 1.8, 1.8), 169e-6, delta=1e-12)

    def test_triode(self):
        """Test k((vgs - vth) vds - vds^2 / 2) in triode."""
        expected = 2e-4 * (1.3 * 0.2 - 0.5 * 0.2 ** 2)
        self.assertAlmostEqual(mos_current(MosParams(), 1.8, 0.2), expected, delta=1e-15)

    def test_region_boundary_continuity(self):
        """Test that triode and saturation meet at vds = vgs - vth."""
        below = mos_current(MosParams(), 1.8, 1.3 - 1e-12)
        at = mos_current(MosParams(), 1.8, 1.3)
        self.assertLess(abs(below - at), 1e-12)

    def test_reverse_drain_source(self):
        """Test that a negative vds reverses the current."""
        self.assertLess(mos_current(MosParams(), 1.8, -0.2), 0.0)

    def test_parameters_validated(self):
        """Test that vth and k must be positive and only nMOS is modeled."""
        with self.assertRaises(ValidationError):
            MosParams(vth=0.0)
        with self.assertRaises(ValidationError):
            MosParams(k=-1.0)
        with self.assertRaises(ValidationError):
            MosParams(channel_type='p')


class WaveformTests(SimpleTestCase):
    """Test piecewise-linear waveforms."""

    def test_clamps_outside_range(self):
        """Test that evaluation holds the end values outside the breakpoints."""
        waveform = PwlWaveform(((1e-9, 0.0), (2e-9, 1.8)))
        self.assertEqual(waveform(0.0), 0.0)
        self.assertEqual(waveform(5e-9), 1.8)
        self.assertAlmostEqual(waveform(1.5e-9), 0.9)

    def test_times_must_increase(self):
        """Test that repeated breakpoint times are refused."""
        with self.assertRaises(ValidationError):
            PwlWaveform(((0.0, 0.0), (0.0, 1.0)))

    def test_edges(self):
        """Test that flat segments are not edges."""
        waveform = PwlWaveform(((0.0, 0.0), (1e-9, 0.0), (1.5e-9, 1.8), (3e-9, 1.8)))
        self.assertEqual(waveform.edges(), [(1e-9, 1.5e-9, 1.8)])
        self.assertAlmostEqual(waveform.min_edge_s(), 0.5e-9)


class CircuitTests(SimpleTestCase):
    """Test netlist construction checks."""

    def test_unknown_net(self):
        """Test that elements must reference existing nets."""
        circuit = Circuit()
        with self.assertRaises(ValidationError):
            circuit.add_resistor('r', 'a', GND, 1e3)

    def test_duplicate_name(self):
        """Test that element names are unique."""
        circuit = rc_circuit()
        with self.assertRaises(ValidationError):
            circuit.add_capacitor('c', 'n', GND, 1e-15)

    def test_ground_cannot_be_driven(self):
        """Test that gnd stays at 0 V."""
        with self.assertRaises(ValidationError):
            Circuit().add_fixed_source('v', GND, 1.0)

    def test_net_role_conflict(self):
        """Test that a net cannot change role."""
        circuit = Circuit()
        circuit.add_net('ml', NetRole.ML)
        with self.assertRaises(ValidationError):
            circuit.add_net('ml', NetRole.MID)

    def test_non_positive_capacitance(self):
        """Test that capacitances must be positive."""
        circuit = Circuit()
        circuit.add_net('n')
        with self.assertRaises(ValidationError):
            circuit.add_capacitor('c', 'n', GND, 0.0)


class DcOperatingPointTests(SimpleTestCase):
    """Test the DC solver."""

    def test_rram_readout_through_switch(self):
        """Test a calibrated LRS device read at 0.2 V through a closed switch."""
        params = RramParams.calibrated(LRS_STATE)
        circuit = Circuit('readout')
        circuit.add_net('top')
        circuit.add_net('mid', NetRole.MID)
        circuit.add_net('sw', NetRole.SW)
        circuit.add_fixed_source('read', 'top', 0.2)
        circuit.add_fixed_source('gate', 'sw', 1.8)
        device = circuit.add_rram('rram', 'top', 'mid', params)
        circuit.add_switch('switch', 'mid', GND, 'sw', r_on_ohms=1e-3)
        voltages = dc_operating_point(circuit)
        self.assertLess(abs(voltages['mid']), 1e-6)
        self.assertAlmostEqual(element_current(device, voltages), 0.2 / 112e3, delta=1e-12)

    def test_equal_divider(self):
        """Test that two equal resistors split 1.8 V in half."""
        circuit = Circuit('divider')
        circuit.add_net('vdd', NetRole.VDD)
        circuit.add_net('mid')
        circuit.add_fixed_source('supply', 'vdd', 1.8)
        circuit.add_resistor('r1', 'vdd', 'mid', 10e3)
        circuit.add_resistor('r2', 'mid', GND, 10e3)
        self.assertAlmostEqual(dc_operating_point(circuit)['mid'], 0.9, delta=1e-6)

    def test_forward_write_stack_against_bisection(self):
        """Test the RRAM-plus-Q1 stack against a scalar root find of KCL at mid."""
        params = RramParams.calibrated(LRS_STATE)
        q1 = MosParams(vth=0.5, k=2e-4)
        circuit = Circuit('write')
        for net, role in (('cue', NetRole.CUE), ('mid', NetRole.MID), ('sw', NetRole.SW), ('psw', NetRole.PSW)):
            circuit.add_net(net, role)
        circuit.add_fixed_source('cue_drive', 'cue', 1.8)
        circuit.add_fixed_source('sw_drive', 'sw', 1.8)
        circuit.add_fixed_source('psw_drive', 'psw', 0.0)
        circuit.add_rram('rram', 'cue', 'mid', params)
        circuit.add_mosfet('q1', 'mid', 'sw', 'psw', q1)

        def kcl(v_mid):
            return iv_current(params, 1.8 - v_mid) - mos_current(q1, 1.8, v_mid)

        oracle = brentq(kcl, 0.0, 1.8, xtol=1e-12)
        self.assertAlmostEqual(dc_operating_point(circuit)['mid'], oracle, delta=1e-6)

    def test_fixed_bias_overrides_source(self):
        """Test that fixed biases pin nets for one solve."""
        circuit = Circuit('divider')
        circuit.add_net('vdd', NetRole.VDD)
        circuit.add_net('mid')
        circuit.add_fixed_source('supply', 'vdd', 1.8)
        circuit.add_resistor('r1', 'vdd', 'mid', 10e3)
        circuit.add_resistor('r2', 'mid', GND, 10e3)
        voltages = dc_operating_point(circuit, fixed_biases={'vdd': 1.0})
        self.assertAlmostEqual(voltages['mid'], 0.5, delta=1e-6)

    def test_single_unknown_falls_back_to_bisection(self):
        """Test that a starved Newton still finds the midpoint of a one-node divider."""
        settings = SolverSettings(newton_max_iter=1)
        self.assertAlmostEqual(dc_operating_point(divider(), settings=settings)['mid'], 0.9, delta=1e-6)

    def test_two_unknowns_have_no_fallback(self):
        """Test that a starved Newton on a two-node ladder raises ConvergenceError."""
        circuit = divider()
        circuit.add_net('low')
        circuit.add_resistor('r3', 'mid', 'low', 10e3)
        circuit.add_resistor('r4', 'low', GND, 10e3)
        with self.assertRaises(ConvergenceError):
            dc_operating_point(circuit, settings=SolverSettings(newton_max_iter=1))

    def test_floating_net_rejected(self):
        """Test that a capacitor-only net without initial charge has no DC solution."""
        circuit = Circuit('float')
        circuit.add_net('a')
        circuit.add_net('x')
        circuit.add_fixed_source('drive', 'a', 1.0)
        circuit.add_capacitor('c', 'a', 'x', 1e-15)
        with self.assertRaises(ValidationError):
            dc_operating_point(circuit)

    def test_charged_floating_net_keeps_charge(self):
        """Test that a declared initial charge is held on an isolated net."""
        circuit = Circuit('float')
        circuit.add_net('a')
        circuit.add_net('x')
        circuit.add_fixed_source('drive', 'a', 1.0)
        circuit.add_capacitor('c', 'a', 'x', 1e-15)
        self.assertEqual(dc_operating_point(circuit, initial={'x': 0.3})['x'], 0.3)


class TransientTests(SimpleTestCase):
    """Test the implicit-Euler transient."""

    def test_rc_discharge(self):
        """Test v(RC) = e^-1 within 0.1 % for a 100 kOhm, 10 fF branch."""
        rc = 100e3 * 10e-15
        trace = transient_solve(rc_circuit(), dt=rc / 1000, t_end=2 * rc, initial={'n': 1.0})
        self.assertLess(abs(trace.at('n', rc) - np.exp(-1.0)) / np.exp(-1.0), 1e-3)

    def test_rc_delay_measurement(self):
        """Test that the 1/e falling crossing lands at RC within 0.5 %."""
        rc = 100e3 * 10e-15
        trace = transient_solve(rc_circuit(), dt=rc / 1000, t_end=2 * rc, initial={'n': 1.0})
        delay = measure_delay(trace, 'n', np.exp(-1.0), Edge.FALLING)
        self.assertLess(abs(delay - rc) / rc, 5e-3)

    def test_equilibrium_holds(self):
        """Test that constant sources and a balanced start keep every node still."""
        circuit = charging_circuit(volts=1.0)
        trace = transient_solve(circuit, dt=1e-12, t_end=1e-9, initial={'n': 1.0})
        for net in ('src', 'n'):
            self.assertLess(np.ptp(trace.node_voltages[net]), 1e-6)

    def test_step_charging_energy_partition(self):
        """Test that a step charge draws C V^2 and splits it evenly."""
        c_f, volts = 50e-15, 1.18
        circuit = charging_circuit(c_f=c_f, volts=volts)
        rc = 10e3 * c_f
        trace = transient_solve(circuit, dt=rc / 100, t_end=20 * rc)
        source = trace.source_energy['src'][-1]
        stored = stored_energy(trace, circuit)
        dissipated = trace.element_energy['r'][-1]
        self.assertLess(abs(source - c_f * volts ** 2) / (c_f * volts ** 2), 0.01)
        self.assertAlmostEqual(source * 1e15, 69.62, delta=0.7)
        self.assertLess(abs(stored - 0.5 * c_f * volts ** 2) / (0.5 * c_f * volts ** 2), 0.01)
        self.assertLess(abs(dissipated - 0.5 * c_f * volts ** 2) / (0.5 * c_f * volts ** 2), 0.01)

    def test_energy_bookkeeping_closes(self):
        """Test that source energy equals stored plus dissipated energy."""
        circuit = charging_circuit()
        trace = transient_solve(circuit, dt=5e-12, t_end=2e-9)
        source = sum(series[-1] for series in trace.source_energy.values())
        dissipated = sum(series[-1] for series in trace.element_energy.values())
        self.assertAlmostEqual(source, stored_energy(trace, circuit) + dissipated, delta=1e-3 * source)

    def test_source_charge_matches_capacitor_charge(self):
        """Test that the delivered charge ends up on the capacitor."""
        c_f = 50e-15
        circuit = charging_circuit(c_f=c_f)
        trace = transient_solve(circuit, dt=5e-12, t_end=10e-9)
        self.assertAlmostEqual(trace.source_charge['src'][-1], c_f * trace.node_voltages['n'][-1],
                               delta=1e-19 * len(trace.times))

    def test_capacitive_divider_conserves_charge(self):
        """Test that a capacitor-only node follows the C1/(C1+C2) ratio."""
        circuit = Circuit('divider')
        circuit.add_net('src')
        circuit.add_net('x')
        circuit.add_pwl_source('drive', 'src', PwlWaveform(((0.0, 0.0), (1e-9, 1.0))))
        circuit.add_capacitor('c1', 'src', 'x', 2e-15)
        circuit.add_capacitor('c2', 'x', GND, 2e-15)
        trace = transient_solve(circuit, dt=10e-12, t_end=2e-9)
        self.assertAlmostEqual(trace.node_voltages['x'][-1], 0.5, delta=1e-4)

    def test_deterministic(self):
        """Test that identical inputs give bit-identical traces."""
        first = transient_solve(charging_circuit(), dt=5e-12, t_end=1e-9)
        second = transient_solve(charging_circuit(), dt=5e-12, t_end=1e-9)
        np.testing.assert_array_equal(first.node_voltages['n'], second.node_voltages['n'])
        np.testing.assert_array_equal(first.source_energy['src'], second.source_energy['src'])

    def test_time_step_must_resolve_edges(self):
        """Test that dt above 1/20 of the fastest edge is refused."""
        circuit = Circuit('ramp')
        circuit.add_net('src')
        circuit.add_net('n')
        circuit.add_pwl_source('drive', 'src', PwlWaveform(((0.0, 0.0), (1e-9, 1.0))))
        circuit.add_resistor('r', 'src', 'n', 1e3)
        circuit.add_capacitor('c', 'n', GND, 1e-15)
        with self.assertRaises(ValidationError) as ctx:
            transient_solve(circuit, dt=1e-10, t_end=2e-9)
        self.assertIn('dt', ctx.exception.message_dict)

    def test_newton_failure_reports_step(self):
        """Test that exhausting Newton and halvings raises with the step index."""
        settings = SolverSettings(newton_max_iter=1, max_halvings=0)
        with self.assertRaises(ConvergenceError) as ctx:
            transient_solve(rc_circuit(), dt=1e-11, t_end=1e-10, initial={'n': 1.0}, settings=settings)
        self.assertEqual(ctx.exception.step_index, 1)
        self.assertIn('n', ctx.exception.last_iterate)


class MeasurementTests(SimpleTestCase):
    """Test trace measurements and export rows."""

    def test_constant_trace_never_crosses(self):
        """Test that a flat trace reports no crossing."""
        trace = transient_solve(charging_circuit(volts=1.0), dt=1e-12, t_end=1e-10, initial={'n': 1.0})
        self.assertIsNone(measure_delay(trace, 'n', 0.5, Edge.FALLING))
        self.assertIsNone(measure_delay(trace, 'n', 1.5, Edge.RISING))

    def test_delay_after_window_start(self):
        """Test that the delay is counted from the window start."""
        rc = 100e3 * 10e-15
        trace = transient_solve(rc_circuit(), dt=rc / 1000, t_end=3 * rc, initial={'n': 1.0})
        full = measure_delay(trace, 'n', np.exp(-2.0))
        shifted = measure_delay(trace, 'n', np.exp(-2.0), start=rc)
        self.assertAlmostEqual(full - shifted, rc, delta=1e-3 * rc)

    def test_unknown_net(self):
        """Test that measuring a missing net is a validation error."""
        trace = transient_solve(rc_circuit(), dt=1e-11, t_end=1e-10, initial={'n': 1.0})
        with self.assertRaises(ValidationError):
            measure_delay(trace, 'ml', 0.5)

    def test_rows_shape(self):
        """Test that N samples of M nets give N rows of M + 1 columns."""
        trace = transient_solve(charging_circuit(), dt=5e-12, t_end=1e-10)
        rows = trace_to_rows(trace, ['src', 'n'])
        self.assertEqual(rows.shape, (len(trace.times), 3))
        np.testing.assert_array_equal(rows[:, 0], trace.times)
