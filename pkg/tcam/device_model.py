"""
RRAM static IV model, calibration and fitting.

Model
=====
Each polarity of the device follows a saturating exponential

    i(v) = sign(v) * (a / RS) * (1 - exp(-b * |v|))

with (a, b) = (a_p, b_p) for v > 0 and (a_n, b_n) for v < 0.  RS is the
resistance of the stored state at the 0.2 V read-out point, so a calibrated
record satisfies a * (1 - exp(-0.2 * b)) = 0.2 on both branches.

The negative branch is written on |v|: each polarity is fitted on its own
magnitudes in the log domain, and mirrored defaults give an odd curve.

Fitting
=======
For a fixed b the optimal log(a) is the mean log-residual, so a log-spaced
grid over b gives a cheap global start; a bounded trust-region least-squares
refinement on (log a, log b) finishes the job.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.db.models import TextChoices
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer
from scipy.optimize import least_squares

from .exceptions import FitError

logger = logging.getLogger(__name__)

READOUT_V = 0.2
READOUT_TOLERANCE = 0.005
DEFAULT_B_PER_V = 5.0
DEFAULT_C_MR_F = 2.2e-15
B_BOUNDS = (0.01, 100.0)
B_GRID_POINTS = 241
MIN_POINTS_PER_POLARITY = 8

LRS_OHMS = 112e3
HRS_OHMS = 8.04e6
PRISTINE_OHMS = 218e3


class StateLabel(TextChoices):
    LRS = 'LRS', 'Low resistance state'
    HRS = 'HRS', 'High resistance state'
    CUSTOM = 'Custom', 'Custom state'


class Polarity(TextChoices):
    BOTH = 'both', 'Both branches'
    POSITIVE = 'positive', 'Positive branch only'
    NEGATIVE = 'negative', 'Negative branch only'


def _positive(value):
    return value is not None and np.isfinite(value) and value > 0


@dataclass(frozen=True)
class ResistiveState:
    """
    A stored resistance level.

    HRS encodes binary 1 and LRS binary 0; Custom states (e.g. a pristine
    device) carry no bit.
    """

    label: str
    rs_ohms: float

    def __post_init__(self):
        self.clean()
        object.__setattr__(self, 'label', StateLabel(self.label))

    def clean(self):
        errors = {}
        if self.label not in StateLabel.values:
            errors['label'] = f'Unknown resistive state {self.label!r}.'
        if not _positive(self.rs_ohms):
            errors['rs_ohms'] = 'Resistance must be a positive finite value.'
        if errors:
            raise ValidationError(errors)

    @property
    def bit(self):
        if self.label == StateLabel.HRS:
            return 1
        if self.label == StateLabel.LRS:
            return 0
        return None

    def __str__(self):
        return f'{self.label} ({self.rs_ohms:.4g} ohm)'


LRS_STATE = ResistiveState(StateLabel.LRS, LRS_OHMS)
HRS_STATE = ResistiveState(StateLabel.HRS, HRS_OHMS)
PRISTINE_STATE = ResistiveState(StateLabel.CUSTOM, PRISTINE_OHMS)


def calibrate_prefactor(b_p, rs_ohms):
    """Prefactor that pins i(0.2 V) to exactly 0.2 / rs_ohms."""
    errors = {}
    if not _positive(b_p):
        errors['b_p'] = 'Curvature must be positive.'
    if not _positive(rs_ohms):
        errors['rs_ohms'] = 'Resistance must be positive.'
    if errors:
        raise ValidationError(errors)
    return READOUT_V / -np.expm1(-READOUT_V * b_p)


@dataclass(frozen=True)
class RramParams:
    """
    Fit parameters for one resistive state plus the MIM parasitic.

    `fit_rms_log` is set on records produced by `fit_iv_params`; those are
    exempt from the read-out consistency check because their prefactor comes
    from data rather than from the 0.2 V definition.
    """

    state: ResistiveState
    a_p: float
    b_p: float
    a_n: float
    b_n: float
    c_mr_f: float = DEFAULT_C_MR_F
    fit_rms_log: float | None = None

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        if not isinstance(self.state, ResistiveState):
            errors['state'] = 'A ResistiveState is required.'
        for name in ('a_p', 'b_p', 'a_n', 'b_n', 'c_mr_f'):
            if not _positive(getattr(self, name)):
                errors[name] = f'{name} must be a positive finite number.'
        if errors:
            raise ValidationError(errors)

    def readout_error(self):
        """Worst relative deviation of a*(1-exp(-0.2 b)) from 0.2 over both branches."""
        return max(
            abs(self.a_p * -np.expm1(-READOUT_V * self.b_p) - READOUT_V) / READOUT_V,
            abs(self.a_n * -np.expm1(-READOUT_V * self.b_n) - READOUT_V) / READOUT_V,
        )

    def clean_readout(self):
        if self.fit_rms_log is None and self.readout_error() > READOUT_TOLERANCE:
            raise ValidationError({
                'a_p': 'Prefactor is inconsistent with the 0.2 V read-out definition.'
            })

    @property
    def rs_ohms(self):
        return self.state.rs_ohms

    @classmethod
    def calibrated(cls, state, b_p=DEFAULT_B_PER_V, b_n=None, c_mr_f=DEFAULT_C_MR_F):
        b_n = b_p if b_n is None else b_n
        return cls(
            state=state,
            a_p=calibrate_prefactor(b_p, state.rs_ohms),
            b_p=b_p,
            a_n=calibrate_prefactor(b_n, state.rs_ohms),
            b_n=b_n,
            c_mr_f=c_mr_f,
        )

    def to_card(self):
        return {
            'state': str(self.state.label),
            'rs_ohms': self.state.rs_ohms,
            'a_p': self.a_p,
            'b_p': self.b_p,
            'a_n': self.a_n,
            'b_n': self.b_n,
            'c_mr_f': self.c_mr_f,
            'fit_rms_log': self.fit_rms_log,
        }

    @classmethod
    def from_card(cls, card):
        try:
            return cls(
                state=ResistiveState(card['state'], float(card['rs_ohms'])),
                a_p=float(card['a_p']),
                b_p=float(card['b_p']),
                a_n=float(card['a_n']),
                b_n=float(card['b_n']),
                c_mr_f=float(card.get('c_mr_f', DEFAULT_C_MR_F)),
                fit_rms_log=card.get('fit_rms_log'),
            )
        except KeyError as exc:
            raise ValidationError({exc.args[0]: 'This field is required.'}) from exc


@dataclass(frozen=True)
class DeviceCards:
    """The LRS/HRS records a cell switches between on write events."""

    lrs: RramParams
    hrs: RramParams

    def __post_init__(self):
        self.clean()

    def clean(self):
        errors = {}
        if self.lrs.state.label != StateLabel.LRS:
            errors['lrs'] = 'The LRS card must carry an LRS state.'
        if self.hrs.state.label != StateLabel.HRS:
            errors['hrs'] = 'The HRS card must carry an HRS state.'
        if self.lrs.rs_ohms >= self.hrs.rs_ohms:
            errors['rs_ohms'] = 'LRS resistance must be below HRS resistance.'
        if errors:
            raise ValidationError(errors)
        self.lrs.clean_readout()
        self.hrs.clean_readout()

    @classmethod
    def default(cls):
        return cls(lrs=RramParams.calibrated(LRS_STATE), hrs=RramParams.calibrated(HRS_STATE))

    def for_state(self, label):
        if label == StateLabel.LRS:
            return self.lrs
        if label == StateLabel.HRS:
            return self.hrs
        raise ValidationError({'state': f'No card for state {label!r}.'})


def _checked_voltage(v):
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError({'v': 'Voltage must be finite.'})
    return arr


def _scalar_or_array(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def rram_kernel(u, a_p, b_p, a_n, b_n, rs_ohms):
    """
    Element-wise branch current and slope for arrays of devices.

    Parameter arguments broadcast against `u`, so one call evaluates every
    RRAM branch of a netlist.
    """
    forward = u >= 0
    a = np.where(forward, a_p, a_n)
    b = np.where(forward, b_p, b_n)
    decay = np.exp(-b * np.abs(u))
    current = np.sign(u) * (a / rs_ohms) * -np.expm1(-b * np.abs(u))
    slope = np.where(u == 0, 0.5 * (a_p * b_p + a_n * b_n) / rs_ohms, a * b / rs_ohms * decay)
    return current, slope


def iv_current(params, v):
    """Branch current (A) at voltage v (V); scalar in, scalar out."""
    v = _checked_voltage(v)
    current, _ = rram_kernel(v, params.a_p, params.b_p, params.a_n, params.b_n, params.rs_ohms)
    return _scalar_or_array(current)


def small_signal_conductance(params, v):
    """di/dv (S); at exactly 0 V the mean of the two one-sided slopes."""
    v = _checked_voltage(v)
    _, slope = rram_kernel(v, params.a_p, params.b_p, params.a_n, params.b_n, params.rs_ohms)
    return _scalar_or_array(slope)


@dataclass(frozen=True)
class IvSweep:
    """A measured bipolar IV sweep; voltages strictly increasing."""

    voltages_v: tuple
    currents_a: tuple
    noise_floor_a: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, 'voltages_v', tuple(float(x) for x in self.voltages_v))
        object.__setattr__(self, 'currents_a', tuple(float(x) for x in self.currents_a))
        self.clean()

    def clean(self):
        v, i = self.voltages, self.currents
        if len(v) != len(i):
            raise ValidationError({'points': 'Voltage and current columns differ in length.'})
        if len(v) < 2:
            raise ValidationError({'points': 'A sweep needs at least two points.'})
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(i))):
            raise ValidationError({'points': 'Sweep values must be finite.'})
        if np.any(np.diff(v) <= 0):
            raise ValidationError({'voltages_v': 'Voltages must be strictly increasing.'})
        if np.any((v == 0) & (np.abs(i) > self.noise_floor_a)):
            raise ValidationError({'currents_a': 'Current at 0 V exceeds the declared noise floor.'})

    @property
    def voltages(self):
        return np.asarray(self.voltages_v)

    @property
    def currents(self):
        return np.asarray(self.currents_a)

    def branch(self, sign):
        """Magnitudes (|v|, |i|) of the points on one polarity with consistent sign."""
        v, i = self.voltages, self.currents
        keep = (np.sign(v) == sign) & (np.sign(i) == sign)
        return np.abs(v[keep]), np.abs(i[keep])

    @classmethod
    def from_csv(cls, path, noise_floor_a=1e-12):
        """Two columns (volts, amperes); '#' comments and a header line are skipped."""
        try:
            table = np.genfromtxt(path, delimiter=',', comments='#', dtype=float)
        except OSError as exc:
            raise ValidationError({'path': f'Cannot read IV sweep {path}: {exc}'}) from exc
        table = np.atleast_2d(table)
        if table.shape[1] < 2:
            raise ValidationError({'path': f'{path} must hold two columns (volts, amperes).'})
        table = table[~np.isnan(table[:, :2]).any(axis=1)]
        return cls(table[:, 0], table[:, 1], noise_floor_a)

    def to_csv(self, path):
        np.savetxt(
            path,
            np.column_stack([self.voltages, self.currents]),
            delimiter=',',
            fmt='%.12g',
            header='voltage_v,current_a',
            comments='# ',
        )


def generate_sweep(params, voltages, noise_sigma=0.0, seed=None):
    """Synthetic sweep from known parameters with optional log-normal noise."""
    v = np.asarray(voltages, dtype=float)
    i = np.asarray(iv_current(params, v), dtype=float)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        i = i * rng.lognormal(0.0, noise_sigma, size=i.shape)
    return IvSweep(v, i)


def profile_log_ssr(v_mag, i_mag, rs_ohms, b_values):
    """
    Log-domain sum of squared residuals for each candidate b, with log(a)
    at its closed-form optimum. Returns (ssr, log_a) arrays.
    """
    y = np.log(i_mag) + np.log(rs_ohms)
    shapes = np.log(-np.expm1(-np.outer(np.asarray(b_values, dtype=float), v_mag)))
    log_a = (y - shapes).mean(axis=1)
    ssr = ((y - shapes - log_a[:, None]) ** 2).sum(axis=1)
    return ssr, log_a


@dataclass
class BranchFit:
    a: float
    b: float
    rms_log: float
    n_points: int
    boundary_hit: bool


@dataclass
class FitResult:
    params: RramParams
    positive: BranchFit | None
    negative: BranchFit | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def fit_rms_log(self):
        return self.params.fit_rms_log

    @property
    def boundary_hit(self):
        return any(branch.boundary_hit for branch in (self.positive, self.negative) if branch)


def _fit_branch(v_mag, i_mag, rs_ohms, name):
    if v_mag.size < MIN_POINTS_PER_POLARITY:
        raise FitError(
            f'{name} branch has {v_mag.size} usable points, '
            f'{MIN_POINTS_PER_POLARITY} are required.',
            {'branch': name, 'n_points': int(v_mag.size)},
        )
    log_i = np.log(i_mag)
    if np.ptp(log_i) < 1e-12:
        raise FitError(
            f'{name} branch is degenerate: all currents are equal.',
            {'branch': name, 'current_a': float(i_mag[0])},
        )

    grid = np.geomspace(B_BOUNDS[0], B_BOUNDS[1], B_GRID_POINTS)
    ssr, log_a = profile_log_ssr(v_mag, i_mag, rs_ohms, grid)
    start = int(np.argmin(ssr))

    y = log_i + np.log(rs_ohms)
    lower = np.array([-np.inf, np.log(B_BOUNDS[0])])
    upper = np.array([np.inf, np.log(B_BOUNDS[1])])

    def residuals(x):
        return x[0] + np.log(-np.expm1(-np.exp(x[1]) * v_mag)) - y

    x0 = np.array([log_a[start], np.clip(np.log(grid[start]), lower[1] + 1e-9, upper[1] - 1e-9)])
    solution = least_squares(residuals, x0, bounds=(lower, upper), method='trf', x_scale='jac')
    if not solution.success:
        raise FitError(f'{name} branch refinement failed: {solution.message}', {'branch': name})

    b = float(np.exp(solution.x[1]))
    rms = float(np.sqrt(np.mean(solution.fun ** 2)))
    boundary = bool(np.isclose(b, B_BOUNDS[0], rtol=1e-3) or np.isclose(b, B_BOUNDS[1], rtol=1e-3))
    if boundary:
        logger.warning('fit branch=%s boundary_hit b=%.4g', name, b)
    return BranchFit(float(np.exp(solution.x[0])), b, rms, int(v_mag.size), boundary)


def fit_iv_params(sweep, rs_ohms, state=None, polarity=Polarity.BOTH, c_mr_f=DEFAULT_C_MR_F):
    """
    Fit both branches of the model to a sweep in the log domain.

    With a single-polarity request the other branch mirrors the fitted one.
    """
    if not _positive(rs_ohms):
        raise ValidationError({'rs_ohms': 'Resistance must be positive.'})
    state = state or ResistiveState(StateLabel.CUSTOM, rs_ohms)
    diagnostics = {'n_points_total': len(sweep.voltages_v)}

    positive = negative = None
    if polarity in (Polarity.BOTH, Polarity.POSITIVE):
        positive = _fit_branch(*sweep.branch(1), rs_ohms, 'positive')
    if polarity in (Polarity.BOTH, Polarity.NEGATIVE):
        negative = _fit_branch(*sweep.branch(-1), rs_ohms, 'negative')

    p = positive or negative
    n = negative or positive
    total_points = (positive.n_points if positive else 0) + (negative.n_points if negative else 0)
    diagnostics['n_points_dropped'] = diagnostics['n_points_total'] - total_points
    rms = float(np.sqrt(sum(
        branch.rms_log ** 2 * branch.n_points for branch in (positive, negative) if branch
    ) / total_points))

    params = RramParams(state, p.a, p.b, n.a, n.b, c_mr_f, fit_rms_log=rms)
    logger.info(
        'fit state=%s b_p=%.5g b_n=%.5g rms_log=%.3e boundary_hit=%s',
        state.label, params.b_p, params.b_n, rms, p.boundary_hit or n.boundary_hit,
    )
    return FitResult(params, positive, negative, diagnostics)


def dump_model_card(params, path):
    """Write a model card as JSON."""
    payload = JSONRenderer().render(params.to_card(), renderer_context={'indent': 2})
    Path(path).write_bytes(payload + b'\n')


def load_model_card(path):
    try:
        card = JSONParser().parse(io.BytesIO(Path(path).read_bytes()))
    except OSError as exc:
        raise ValidationError({'path': f'Cannot read model card {path}: {exc}'}) from exc
    except ParseError as exc:
        raise ValidationError({'path': f'{path} is not a JSON model card: {exc}'}) from exc
    if not isinstance(card, dict):
        raise ValidationError({'path': f'{path} must hold a JSON object.'})
    return RramParams.from_card(card)
