"""
Nodal circuit engine: DC operating point and fixed-step transient.

Every source is ground-referenced, so nets split into driven nets (known
voltages: gnd, fixed supplies, schedule waveforms) and free nets (the
unknowns).  Element currents are evaluated per element kind with numpy and
stamped into a dense residual/Jacobian pair; Newton iterations solve for
the free-net voltages.

Transient integration is implicit Euler.  Energy is metered per branch as
the interval-mean branch voltage times the end-of-interval current, which
makes source energy equal stored plus dissipated energy to rounding.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from django.core.exceptions import ValidationError
from django.db.models import TextChoices
from scipy.optimize import bisect

from .device_model import RramParams, rram_kernel
from .exceptions import ConvergenceError

logger = logging.getLogger(__name__)

GND = 'gnd'


class NetRole(TextChoices):
    CUE = 'cue'
    CUE_BAR = 'cue_bar'
    PSW = 'psw'
    SW = 'sw'
    PRE = 'pre'
    EN = 'en'
    ML = 'ml'
    MID = 'mid'
    CLR = 'clr'
    SEC = 'sec'
    PRI = 'pri'
    SUPSW = 'supsw'
    GND = 'gnd'
    VDD = 'vdd'
    VSEC = 'vsec'
    INTERNAL = 'internal'


class ElementGroup(TextChoices):
    CORE = 'core'
    PERIPHERY = 'periphery'
    SOLVER = 'solver'


class Edge(TextChoices):
    RISING = 'rising'
    FALLING = 'falling'


@dataclass(frozen=True)
class Net:
    id: str
    role: str = NetRole.INTERNAL


@dataclass(frozen=True)
class MosParams:
    """Square-law nMOS parameters."""

    vth: float = 0.5
    k: float = 2e-4
    ioff: float = 0.0
    channel_type: str = 'n'

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        if not self.vth > 0:
            errors['vth'] = 'Threshold voltage must be positive.'
        if not self.k > 0:
            errors['k'] = 'Transconductance factor must be positive.'
        if self.ioff < 0:
            errors['ioff'] = 'Off-state leakage cannot be negative.'
        if self.channel_type != 'n':
            errors['channel_type'] = 'Only nMOS devices are modeled.'
        if errors:
            raise ValidationError(errors)

    def scaled(self, vth_scale=1.0, k_scale=1.0):
        return MosParams(self.vth * vth_scale, self.k * k_scale, self.ioff, self.channel_type)


def square_law(vth, k, ioff, vg, vd, vs):
    """
    Drain-to-source current and its partials with respect to (vg, vd, vs).

    Arguments broadcast; drain and source swap when vd < vs.
    """
    swap = vd < vs
    drain = np.where(swap, vs, vd)
    source = np.where(swap, vd, vs)
    vov = vg - source - vth
    vds = drain - source
    on = vov > 0
    sat = on & (vds >= vov)
    triode = on & ~sat

    current = np.where(
        sat, 0.5 * k * vov ** 2,
        np.where(triode, k * (vov * vds - 0.5 * vds ** 2), np.where(vds > 0, ioff, 0.0)),
    )
    gm = np.where(sat, k * vov, np.where(triode, k * vds, 0.0))
    gds = np.where(triode, k * (vov - vds), 0.0)

    sign = np.where(swap, -1.0, 1.0)
    d_vg = sign * gm
    d_vd = np.where(swap, gm + gds, gds)
    d_vs = np.where(swap, -gds, -gm - gds)
    return sign * current, d_vg, d_vd, d_vs


def mos_current(p, vgs, vds):
    """Drain current (A) of a transistor with its source at 0 V."""
    current, _, _, _ = square_law(p.vth, p.k, p.ioff, float(vgs), float(vds), 0.0)
    return float(current)


@dataclass(frozen=True)
class PwlWaveform:
    """Piecewise-linear waveform; clamps to its end values outside the range."""

    breakpoints: tuple

    def __post_init__(self):
        points = tuple((float(t), float(v)) for t, v in self.breakpoints)
        object.__setattr__(self, 'breakpoints', points)
        self.clean()

    def clean(self):
        if not self.breakpoints:
            raise ValidationError({'breakpoints': 'A waveform needs at least one breakpoint.'})
        times = self.times
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(self.volts)):
            raise ValidationError({'breakpoints': 'Breakpoints must be finite.'})
        if np.any(np.diff(times) <= 0):
            raise ValidationError({'breakpoints': 'Breakpoint times must be strictly increasing.'})

    @classmethod
    def constant(cls, volts):
        return cls(((0.0, volts),))

    @cached_property
    def times(self):
        return np.array([t for t, _ in self.breakpoints])

    @cached_property
    def volts(self):
        return np.array([v for _, v in self.breakpoints])

    def __call__(self, t):
        return np.interp(t, self.times, self.volts)

    @property
    def high_v(self):
        return float(self.volts.max())

    def edges(self):
        """(start time, end time, voltage change) of every sloped segment."""
        points = self.breakpoints
        return [
            (t0, t1, v1 - v0)
            for (t0, v0), (t1, v1) in zip(points, points[1:])
            if v1 != v0
        ]

    def min_edge_s(self):
        durations = [t1 - t0 for t0, t1, _ in self.edges()]
        return min(durations) if durations else np.inf


@dataclass(frozen=True)
class Capacitor:
    name: str
    a: str
    b: str
    c_f: float
    group: str = ElementGroup.PERIPHERY

    def clean(self):
        if not self.c_f > 0:
            raise ValidationError({'c_f': f'{self.name}: capacitance must be positive.'})

    @property
    def nets(self):
        return (self.a, self.b)


@dataclass(frozen=True)
class Resistor:
    """Linear test branch."""

    name: str
    a: str
    b: str
    r_ohms: float
    group: str = ElementGroup.PERIPHERY

    def clean(self):
        if not self.r_ohms > 0:
            raise ValidationError({'r_ohms': f'{self.name}: resistance must be positive.'})

    @property
    def nets(self):
        return (self.a, self.b)


@dataclass(frozen=True)
class Rram:
    """Static RRAM branch; the anode is the positive terminal of the device model."""

    name: str
    anode: str
    cathode: str
    params: RramParams
    group: str = ElementGroup.CORE

    def clean(self):
        self.params.clean()

    @property
    def nets(self):
        return (self.anode, self.cathode)


@dataclass(frozen=True)
class Mosfet:
    name: str
    drain: str
    gate: str
    source: str
    params: MosParams = MosParams()
    group: str = ElementGroup.CORE

    def clean(self):
        self.params.clean()

    @property
    def nets(self):
        return (self.drain, self.gate, self.source)


@dataclass(frozen=True)
class Switch:
    """
    Ideal voltage-controlled switch.

    The conducting fraction moves linearly from 0 to 1 while the control
    voltage crosses [v_low, v_high] (reversed when active_low).
    """

    name: str
    a: str
    b: str
    control: str
    r_on_ohms: float
    active_low: bool = False
    v_low: float = 0.54
    v_high: float = 1.26
    group: str = ElementGroup.PERIPHERY

    def clean(self):
        errors = {}
        if not self.r_on_ohms > 0:
            errors['r_on_ohms'] = f'{self.name}: on-resistance must be positive.'
        if not self.v_high > self.v_low:
            errors['v_high'] = f'{self.name}: transition band must be non-empty.'
        if errors:
            raise ValidationError(errors)

    @property
    def nets(self):
        return (self.a, self.b, self.control)


@dataclass(frozen=True)
class PwlSource:
    name: str
    net: str
    waveform: PwlWaveform
    group: str = ElementGroup.PERIPHERY

    def clean(self):
        self.waveform.clean()

    @property
    def nets(self):
        return (self.net,)


@dataclass(frozen=True)
class FixedSource:
    name: str
    net: str
    volts: float
    group: str = ElementGroup.PERIPHERY

    def clean(self):
        if not np.isfinite(self.volts):
            raise ValidationError({'volts': f'{self.name}: voltage must be finite.'})

    @property
    def nets(self):
        return (self.net,)


SOURCE_KINDS = (PwlSource, FixedSource)


class Circuit:
    """A netlist under construction; gnd always exists and sits at 0 V."""

    def __init__(self, name='circuit'):
        self.name = name
        self.nets = {GND: Net(GND, NetRole.GND)}
        self.elements = []
        self._element_names = set()

    def add_net(self, net_id, role=NetRole.INTERNAL):
        existing = self.nets.get(net_id)
        if existing is not None:
            if existing.role != role:
                raise ValidationError({
                    'role': f'Net {net_id} already exists with role {existing.role}.'
                })
            return net_id
        self.nets[net_id] = Net(net_id, NetRole(role))
        return net_id

    def add(self, element):
        element.clean()
        if element.name in self._element_names:
            raise ValidationError({'name': f'Duplicate element name {element.name}.'})
        missing = [net for net in element.nets if net not in self.nets]
        if missing:
            raise ValidationError({'nets': f'{element.name} references unknown nets {missing}.'})
        if isinstance(element, SOURCE_KINDS) and element.net == GND:
            raise ValidationError({'net': 'gnd is fixed at 0 V and cannot be driven.'})
        if isinstance(element, SOURCE_KINDS) and self.source_for(element.net) is not None:
            raise ValidationError({'net': f'Net {element.net} already has a source.'})
        self._element_names.add(element.name)
        self.elements.append(element)
        return element

    def add_capacitor(self, name, a, b, c_f, group=ElementGroup.PERIPHERY):
        return self.add(Capacitor(name, a, b, c_f, group))

    def add_resistor(self, name, a, b, r_ohms, group=ElementGroup.PERIPHERY):
        return self.add(Resistor(name, a, b, r_ohms, group))

    def add_rram(self, name, anode, cathode, params, group=ElementGroup.CORE):
        return self.add(Rram(name, anode, cathode, params, group))

    def add_mosfet(self, name, drain, gate, source, params, group=ElementGroup.CORE):
        return self.add(Mosfet(name, drain, gate, source, params, group))

    def add_switch(self, name, a, b, control, r_on_ohms, active_low=False,
                   v_low=0.54, v_high=1.26, group=ElementGroup.PERIPHERY):
        return self.add(Switch(name, a, b, control, r_on_ohms, active_low, v_low, v_high, group))

    def add_fixed_source(self, name, net, volts):
        return self.add(FixedSource(name, net, volts))

    def add_pwl_source(self, name, net, waveform):
        return self.add(PwlSource(name, net, waveform))

    def source_for(self, net_id):
        for element in self.elements:
            if isinstance(element, SOURCE_KINDS) and element.net == net_id:
                return element
        return None

    def of_kind(self, kind):
        return [element for element in self.elements if isinstance(element, kind)]

    def element(self, name):
        for element in self.elements:
            if element.name == name:
                return element
        raise KeyError(name)

    def source_waveforms(self):
        waveforms = {}
        for element in self.elements:
            if isinstance(element, FixedSource):
                waveforms[element.net] = PwlWaveform.constant(element.volts)
            elif isinstance(element, PwlSource):
                waveforms[element.net] = element.waveform
        return waveforms

    def __repr__(self):
        return f'<Circuit {self.name}: {len(self.nets)} nets, {len(self.elements)} elements>'


@dataclass(frozen=True)
class SolverSettings:
    """Numerical knobs; dt_s None means clock period / 64."""

    dt_s: float | None = None
    newton_damping: float = 0.7
    newton_max_iter: int = 50
    newton_vtol_v: float = 1e-6
    kcl_tol_a: float = 1e-12
    max_step_v: float = 0.5
    max_halvings: int = 4
    gmin_s: float = 1e-12
    dt_edge_ratio: int = 20

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        if self.dt_s is not None and not self.dt_s > 0:
            errors['dt_s'] = 'Time step must be positive.'
        if not 0 < self.newton_damping < 1:
            errors['newton_damping'] = 'Damping must lie in (0, 1).'
        if self.newton_max_iter < 1:
            errors['newton_max_iter'] = 'At least one Newton iteration is required.'
        if not self.newton_vtol_v > 0:
            errors['newton_vtol_v'] = 'Voltage tolerance must be positive.'
        if self.max_halvings < 0:
            errors['max_halvings'] = 'Halving count cannot be negative.'
        if self.gmin_s < 0:
            errors['gmin_s'] = 'gmin cannot be negative.'
        if errors:
            raise ValidationError(errors)


@dataclass
class _Branches:
    """Currents of one element kind: a -> b, plus partials per controlling node."""

    a: np.ndarray
    b: np.ndarray
    current: np.ndarray
    partials: list
    u_a: np.ndarray = None
    u_b: np.ndarray = None


class _Network:
    """A circuit compiled to index arrays for one solver run."""

    def __init__(self, circuit, waveforms, settings):
        self.settings = settings
        self.net_ids = list(circuit.nets)
        self.index = {net: k for k, net in enumerate(self.net_ids)}
        self.size = len(self.net_ids)

        self.sources = circuit.source_waveforms()
        for net, waveform in (waveforms or {}).items():
            if net not in self.index:
                raise ValidationError({'schedule': f'Waveform for unknown net {net}.'})
            if net == GND:
                raise ValidationError({'schedule': 'gnd cannot be driven.'})
            self.sources[net] = waveform
        self.source_nets = sorted(self.sources, key=self.index.get)
        self.source_idx = np.array([self.index[n] for n in self.source_nets], dtype=int)

        driven = set(self.sources) | {GND}
        self.free_ids = [net for net in self.net_ids if net not in driven]
        self.free = np.array([self.index[n] for n in self.free_ids], dtype=int)
        self.gnd = self.index[GND]

        ix = self.index
        caps = circuit.of_kind(Capacitor)
        self.cap_a = np.array([ix[e.a] for e in caps], dtype=int)
        self.cap_b = np.array([ix[e.b] for e in caps], dtype=int)
        self.cap_c = np.array([e.c_f for e in caps])
        self.capacitors = caps

        res = circuit.of_kind(Resistor)
        self.res_a = np.array([ix[e.a] for e in res], dtype=int)
        self.res_b = np.array([ix[e.b] for e in res], dtype=int)
        self.res_g = np.array([1.0 / e.r_ohms for e in res])

        rrams = circuit.of_kind(Rram)
        self.rr_a = np.array([ix[e.anode] for e in rrams], dtype=int)
        self.rr_b = np.array([ix[e.cathode] for e in rrams], dtype=int)
        self.rr_params = [
            np.array([getattr(e.params, name) for e in rrams])
            for name in ('a_p', 'b_p', 'a_n', 'b_n', 'rs_ohms')
        ]

        mos = circuit.of_kind(Mosfet)
        self.mos_d = np.array([ix[e.drain] for e in mos], dtype=int)
        self.mos_g = np.array([ix[e.gate] for e in mos], dtype=int)
        self.mos_s = np.array([ix[e.source] for e in mos], dtype=int)
        self.mos_vth = np.array([e.params.vth for e in mos])
        self.mos_k = np.array([e.params.k for e in mos])
        self.mos_ioff = np.array([e.params.ioff for e in mos])

        switches = circuit.of_kind(Switch)
        self.sw_a = np.array([ix[e.a] for e in switches], dtype=int)
        self.sw_b = np.array([ix[e.b] for e in switches], dtype=int)
        self.sw_c = np.array([ix[e.control] for e in switches], dtype=int)
        self.sw_g = np.array([1.0 / e.r_on_ohms for e in switches])
        self.sw_low = np.array([e.v_low for e in switches])
        self.sw_high = np.array([e.v_high for e in switches])
        self.sw_active_low = np.array([e.active_low for e in switches], dtype=bool)

        self.dissipative = res + rrams + mos + switches
        self.dissipative_names = [e.name for e in self.dissipative] + ['gmin']
        self.dissipative_groups = [e.group for e in self.dissipative] + [ElementGroup.SOLVER]

    def drive(self, v, t):
        for net, k in zip(self.source_nets, self.source_idx):
            v[k] = self.sources[net](t)
        v[self.gnd] = 0.0
        return v

    def branches(self, v, v_prev=None, dt=None):
        """Element currents at node voltages v; capacitors only when dt is given."""
        out = []
        if dt is not None and self.cap_c.size:
            g = self.cap_c / dt
            u = v[self.cap_a] - v[self.cap_b]
            u_prev = v_prev[self.cap_a] - v_prev[self.cap_b]
            out.append(_Branches(self.cap_a, self.cap_b, g * (u - u_prev),
                                 [(self.cap_a, g), (self.cap_b, -g)]))

        dissipative = []
        if self.res_g.size:
            u = v[self.res_a] - v[self.res_b]
            dissipative.append(_Branches(self.res_a, self.res_b, self.res_g * u,
                                         [(self.res_a, self.res_g), (self.res_b, -self.res_g)],
                                         self.res_a, self.res_b))
        if self.rr_a.size:
            u = v[self.rr_a] - v[self.rr_b]
            current, slope = rram_kernel(u, *self.rr_params)
            dissipative.append(_Branches(self.rr_a, self.rr_b, current,
                                         [(self.rr_a, slope), (self.rr_b, -slope)],
                                         self.rr_a, self.rr_b))
        if self.mos_d.size:
            current, d_vg, d_vd, d_vs = square_law(
                self.mos_vth, self.mos_k, self.mos_ioff,
                v[self.mos_g], v[self.mos_d], v[self.mos_s],
            )
            dissipative.append(_Branches(self.mos_d, self.mos_s, current,
                                         [(self.mos_g, d_vg), (self.mos_d, d_vd), (self.mos_s, d_vs)],
                                         self.mos_d, self.mos_s))
        if self.sw_g.size:
            span = self.sw_high - self.sw_low
            x = (v[self.sw_c] - self.sw_low) / span
            inside = (x > 0) & (x < 1)
            x = np.clip(x, 0.0, 1.0)
            fraction = np.where(self.sw_active_low, 1.0 - x, x)
            slope = np.where(inside, np.where(self.sw_active_low, -1.0, 1.0) / span, 0.0)
            g = fraction * self.sw_g
            u = v[self.sw_a] - v[self.sw_b]
            dissipative.append(_Branches(self.sw_a, self.sw_b, g * u,
                                         [(self.sw_a, g), (self.sw_b, -g), (self.sw_c, slope * self.sw_g * u)],
                                         self.sw_a, self.sw_b))
        if self.free.size and self.settings.gmin_s > 0:
            gnd = np.full(self.free.size, self.gnd)
            gmin = np.full(self.free.size, self.settings.gmin_s)
            dissipative.append(_Branches(self.free, gnd, gmin * v[self.free],
                                         [(self.free, gmin)], self.free, gnd))
        return out, dissipative

    def residual(self, v, v_prev=None, dt=None, jacobian=True):
        capacitive, dissipative = self.branches(v, v_prev, dt)
        f = np.zeros(self.size)
        jac = np.zeros((self.size, self.size)) if jacobian else None
        for branch in capacitive + dissipative:
            np.add.at(f, branch.a, branch.current)
            np.add.at(f, branch.b, -branch.current)
            if jacobian:
                for node, partial in branch.partials:
                    np.add.at(jac, (branch.a, node), partial)
                    np.add.at(jac, (branch.b, node), -partial)
        return f, jac, dissipative

    def newton(self, v, t, v_prev=None, dt=None, kcl_tol=None):
        """Solve the free nets at time t starting from v; returns the solution."""
        s = self.settings
        v = self.drive(v.copy(), t)
        free = self.free
        if not free.size:
            return v
        last_step = None
        for iteration in range(s.newton_max_iter):
            f, jac, _ = self.residual(v, v_prev, dt)
            worst = float(np.max(np.abs(f[free])))
            if last_step is not None and last_step < s.newton_vtol_v and (kcl_tol is None or worst < kcl_tol):
                return v
            try:
                step = np.linalg.solve(jac[np.ix_(free, free)], -f[free])
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError(
                    f'singular Jacobian at t={t:.4e}s', worst, self._iterate(v)
                ) from exc
            peak = float(np.max(np.abs(step)))
            if peak > s.max_step_v:
                step *= s.max_step_v / peak
            norm = np.linalg.norm(f[free])
            for _ in range(8):
                trial = v.copy()
                trial[free] += step
                trial_f, _, _ = self.residual(trial, v_prev, dt, jacobian=False)
                if np.linalg.norm(trial_f[free]) <= norm or float(np.max(np.abs(step))) < s.newton_vtol_v:
                    break
                step = step * s.newton_damping
            last_step = float(np.max(np.abs(trial[free] - v[free])))
            v = trial
            logger.debug('newton t=%.4e iteration=%d step_v=%.3e residual_a=%.3e', t, iteration, last_step, worst)
        f, _, _ = self.residual(v, v_prev, dt, jacobian=False)
        worst = float(np.max(np.abs(f[free])))
        if last_step is not None and last_step < s.newton_vtol_v and (kcl_tol is None or worst < kcl_tol):
            return v
        raise ConvergenceError(
            f'Newton did not converge in {s.newton_max_iter} iterations at t={t:.4e}s',
            worst, self._iterate(v),
        )

    def _iterate(self, v):
        return {net: float(v[self.index[net]]) for net in self.free_ids}


def _connected_to_drive(circuit, driven, charged):
    """Free nets with no non-capacitive path to a driven or pre-charged net."""
    parent = {net: net for net in circuit.nets}

    def find(net):
        while parent[net] != net:
            parent[net] = parent[parent[net]]
            net = parent[net]
        return net

    for element in circuit.elements:
        if isinstance(element, Resistor):
            pair = (element.a, element.b)
        elif isinstance(element, Rram):
            pair = (element.anode, element.cathode)
        elif isinstance(element, Mosfet):
            pair = (element.drain, element.source)
        elif isinstance(element, Switch):
            pair = (element.a, element.b)
        else:
            continue
        parent[find(pair[0])] = find(pair[1])

    anchored = {find(net) for net in set(driven) | set(charged)}
    return [net for net in circuit.nets if net not in driven and find(net) not in anchored]


def dc_operating_point(circuit, fixed_biases=None, initial=None, settings=None, t=0.0):
    """
    Node voltages with capacitors open.

    Sources are evaluated at time t; fixed_biases pins additional nets (or
    overrides sources); nets listed in `initial` that have no resistive path
    to a bias keep their initial charge as a fixed voltage.

    When Newton fails on a network with exactly one unknown, that unknown is
    bracketed between the extreme bias voltages and bisected.  Networks with
    more unknowns have no fallback: the ConvergenceError propagates.
    """
    settings = settings or SolverSettings()
    fixed_biases = dict(fixed_biases or {})
    initial = dict(initial or {})

    driven = set(circuit.source_waveforms()) | set(fixed_biases) | {GND}
    isolated = _connected_to_drive(circuit, driven, initial)
    if isolated:
        raise ValidationError({'nets': f'No DC path to a bias for nets {sorted(isolated)}.'})
    floating_charged = [
        net for net in _connected_to_drive(circuit, driven, {}) if net in initial
    ]
    pins = {net: PwlWaveform.constant(volts) for net, volts in fixed_biases.items()}
    pins.update({net: PwlWaveform.constant(initial[net]) for net in floating_charged})

    network = _Network(circuit, pins, settings)
    v = np.zeros(network.size)
    for net, volts in initial.items():
        v[network.index[net]] = volts
    try:
        v = network.newton(v, t, kcl_tol=settings.kcl_tol_a)
    except ConvergenceError as exc:
        if network.free.size != 1:
            raise
        v = _bisect_single(network, v, t, exc)
    return {net: float(v[network.index[net]]) for net in network.net_ids}


def _bisect_single(network, v, t, error):
    """Fallback for one unknown: bracket it between the extreme bias voltages."""
    v = network.drive(v.copy(), t)
    k = network.free[0]
    bias = v[network.source_idx] if network.source_idx.size else np.zeros(1)
    low, high = min(0.0, float(bias.min())), max(0.0, float(bias.max()))

    def kcl(x):
        trial = v.copy()
        trial[k] = x
        f, _, _ = network.residual(trial, jacobian=False)
        return f[k]

    if kcl(low) * kcl(high) > 0:
        raise error
    logger.warning('dc fallback=bisection net=%s', network.net_ids[k])
    v[k] = bisect(kcl, low, high, xtol=network.settings.newton_vtol_v * 1e-3, maxiter=200)
    return v


@dataclass
class TransientTrace:
    """
    Sampled result of a transient run.

    Source maps are keyed by the driven net; element_energy is the cumulative
    dissipation of every resistive element (plus the aggregated 'gmin').
    """

    times: np.ndarray
    node_voltages: dict
    source_charge: dict
    source_energy: dict
    source_current: dict
    element_energy: dict
    element_group: dict
    net_roles: dict
    markers: dict = field(default_factory=dict)
    waveforms: dict = field(default_factory=dict)

    def voltage(self, net):
        return self.node_voltages[net]

    def at(self, net, t):
        return float(np.interp(t, self.times, self.node_voltages[net]))

    def index_at(self, t):
        return int(np.clip(np.searchsorted(self.times, t - 1e-18), 0, len(self.times) - 1))

    def cumulative_at(self, series, t):
        return float(np.interp(t, self.times, series))

    @property
    def t_end(self):
        return float(self.times[-1])


def _min_edge(waveforms):
    edges = [waveform.min_edge_s() for waveform in waveforms.values()]
    return min(edges) if edges else np.inf


def transient_solve(circuit, schedule=None, dt=None, t_end=None, initial=None, settings=None):
    """
    Fixed-step implicit-Euler transient.

    `schedule` is a PhaseSchedule (or a plain net -> PwlWaveform mapping, or
    None); its waveforms drive their nets for this run only.
    """
    settings = settings or SolverSettings()
    waveforms = dict(getattr(schedule, 'waveforms', schedule) or {})
    markers = dict(getattr(schedule, 'markers', {}) or {})
    dt = dt or settings.dt_s
    if t_end is None:
        t_end = getattr(schedule, 't_end', None)
    errors = {}
    if dt is None or not dt > 0:
        errors['dt'] = 'Time step must be positive.'
    if t_end is None or not t_end > 0:
        errors['t_end'] = 'Window end must be positive.'
    if errors:
        raise ValidationError(errors)

    network = _Network(circuit, waveforms, settings)
    edge = _min_edge(network.sources)
    if dt > edge / settings.dt_edge_ratio * (1 + 1e-9):
        raise ValidationError({
            'dt': f'Time step {dt:.4e}s exceeds 1/{settings.dt_edge_ratio} of the fastest edge {edge:.4e}s.'
        })

    n_steps = max(1, int(round(t_end / dt)))
    dt = t_end / n_steps
    times = np.linspace(0.0, t_end, n_steps + 1)

    v = np.zeros(network.size)
    for net, volts in (initial or {}).items():
        if net not in network.index:
            raise ValidationError({'initial': f'Unknown net {net}.'})
        v[network.index[net]] = volts
    v = network.drive(v, 0.0)

    n_src = network.source_idx.size
    n_diss = len(network.dissipative_names)
    volts = np.zeros((n_steps + 1, network.size))
    charge = np.zeros((n_steps + 1, n_src))
    energy = np.zeros((n_steps + 1, n_src))
    current = np.zeros((n_steps + 1, n_src))
    dissipated = np.zeros((n_steps + 1, n_diss))
    volts[0] = v

    for step in range(1, n_steps + 1):
        v_next, increments = _advance(network, v, times[step - 1], dt, 0, step)
        d_charge, d_energy, i_src, d_diss = increments
        volts[step] = v_next
        charge[step] = charge[step - 1] + d_charge
        energy[step] = energy[step - 1] + d_energy
        current[step] = i_src
        dissipated[step] = dissipated[step - 1] + d_diss
        v = v_next

    logger.debug('transient circuit=%s steps=%d dt=%.3e', circuit.name, n_steps, dt)
    return TransientTrace(
        times=times,
        node_voltages={net: volts[:, k] for net, k in network.index.items()},
        source_charge={net: charge[:, j] for j, net in enumerate(network.source_nets)},
        source_energy={net: energy[:, j] for j, net in enumerate(network.source_nets)},
        source_current={net: current[:, j] for j, net in enumerate(network.source_nets)},
        element_energy={name: dissipated[:, j] for j, name in enumerate(network.dissipative_names)},
        element_group=dict(zip(network.dissipative_names, network.dissipative_groups)),
        net_roles={net: circuit.nets[net].role for net in network.net_ids},
        markers=markers,
        waveforms={net: network.sources[net] for net in network.source_nets},
    )


def _advance(network, v, t0, dt, depth, step_index):
    """One implicit-Euler interval, halving dt on Newton failure."""
    try:
        v_next = network.newton(v, t0 + dt, v_prev=v, dt=dt)
    except ConvergenceError as exc:
        if depth >= network.settings.max_halvings:
            raise ConvergenceError(
                f'transient step failed after {depth} halvings',
                exc.worst_residual_a, exc.last_iterate, step_index,
            ) from exc
        logger.warning('transient step=%d halving depth=%d dt_s=%.3e', step_index, depth + 1, dt / 2)
        v_mid, first = _advance(network, v, t0, dt / 2, depth + 1, step_index)
        v_next, second = _advance(network, v_mid, t0 + dt / 2, dt / 2, depth + 1, step_index)
        return v_next, (
            first[0] + second[0],
            first[1] + second[1],
            second[2],
            first[3] + second[3],
        )
    return v_next, _interval_energy(network, v, v_next, dt)


def _interval_energy(network, v0, v1, dt):
    f, _, dissipative = network.residual(v1, v0, dt, jacobian=False)
    i_src = f[network.source_idx]
    v_src = 0.5 * (v0[network.source_idx] + v1[network.source_idx])
    d_charge = i_src * dt
    d_energy = v_src * i_src * dt

    parts = []
    for branch in dissipative:
        u = 0.5 * ((v0[branch.u_a] - v0[branch.u_b]) + (v1[branch.u_a] - v1[branch.u_b]))
        parts.append(u * branch.current * dt)
    per_element = np.concatenate(parts) if parts else np.zeros(0)
    gmin_count = network.free.size if network.settings.gmin_s > 0 else 0
    n_elements = len(network.dissipative)
    d_diss = np.zeros(n_elements + 1)
    d_diss[:n_elements] = per_element[:n_elements]
    d_diss[n_elements] = per_element[n_elements:n_elements + gmin_count].sum()
    return d_charge, d_energy, i_src, d_diss


def stored_energy(trace, circuit, index=-1):
    """Energy held by every capacitor of `circuit` at a trace sample."""
    total = 0.0
    for cap in circuit.of_kind(Capacitor):
        u = trace.node_voltages[cap.a][index] - trace.node_voltages[cap.b][index]
        total += 0.5 * cap.c_f * u ** 2
    return total


def element_current(element, voltages):
    """Branch current of a resistive element for a map of node voltages."""
    if isinstance(element, Resistor):
        return (voltages[element.a] - voltages[element.b]) / element.r_ohms
    if isinstance(element, Rram):
        current, _ = rram_kernel(
            np.asarray(voltages[element.anode] - voltages[element.cathode]),
            element.params.a_p, element.params.b_p, element.params.a_n, element.params.b_n,
            element.params.rs_ohms,
        )
        return float(current)
    if isinstance(element, Mosfet):
        current, _, _, _ = square_law(
            element.params.vth, element.params.k, element.params.ioff,
            voltages[element.gate], voltages[element.drain], voltages[element.source],
        )
        return float(current)
    raise ValidationError({'element': f'{element.name} is not a resistive element.'})


def measure_delay(trace, net, threshold, direction=Edge.FALLING, start=0.0):
    """
    Time after `start` at which `net` first crosses `threshold` in the given
    direction, linearly interpolated; None when it never does.
    """
    if net not in trace.node_voltages:
        raise ValidationError({'net': f'Net {net} is not in the trace.'})
    times = trace.times
    values = trace.node_voltages[net]
    keep = times > start
    t = np.concatenate([[start], times[keep]])
    v = np.concatenate([[np.interp(start, times, values)], values[keep]])
    if direction == Edge.FALLING:
        hits = np.nonzero((v[:-1] > threshold) & (v[1:] <= threshold))[0]
    else:
        hits = np.nonzero((v[:-1] < threshold) & (v[1:] >= threshold))[0]
    if not hits.size:
        return None
    k = hits[0]
    fraction = (threshold - v[k]) / (v[k + 1] - v[k])
    return float(t[k] + fraction * (t[k + 1] - t[k]) - start)


def trace_to_rows(trace, nets):
    """Rows of (time, v(net)...) for CSV export."""
    missing = [net for net in nets if net not in trace.node_voltages]
    if missing:
        raise ValidationError({'nets': f'Nets not in trace: {missing}.'})
    columns = [trace.times] + [trace.node_voltages[net] for net in nets]
    return np.column_stack(columns)
