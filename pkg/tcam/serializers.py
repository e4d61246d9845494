"""
Serializers for run configurations and experiment reports.

Config documents are validated with strict serializers: unknown keys are
rejected at every nesting level and unit-suffixed fields are range-checked
before any dataclass is built.  Report serializers are read-only and take
the experiment dataclasses as instances.
"""

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import serializers
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer

from .array import ArrayConfig
from .cell import Supplies, Timing
from .circuit import SolverSettings
from .device_model import DeviceCards, RramParams, StateLabel, load_model_card

logger = logging.getLogger(__name__)


class StrictSerializer(serializers.Serializer):
    """Serializer that refuses keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: 'Unknown field.' for key in unknown})
        return super().to_internal_value(data)


class ModelCardSerializer(StrictSerializer):
    state = serializers.ChoiceField(choices=StateLabel.choices)
    rs_ohms = serializers.FloatField(min_value=1.0, max_value=1e12)
    a_p = serializers.FloatField(min_value=0.0)
    b_p = serializers.FloatField(min_value=1e-3, max_value=1e3)
    a_n = serializers.FloatField(min_value=0.0)
    b_n = serializers.FloatField(min_value=1e-3, max_value=1e3)
    c_mr_f = serializers.FloatField(min_value=1e-18, max_value=1e-12, required=False)
    fit_rms_log = serializers.FloatField(min_value=0.0, required=False, allow_null=True)

    def validate(self, data):
        """Prefactors must be strictly positive."""
        for name in ('a_p', 'a_n'):
            if data[name] <= 0:
                raise serializers.ValidationError({name: 'Prefactor must be positive.'})
        return data


class ModelCardField(serializers.Field):
    """A model card given inline or as a path to a card file."""

    default_error_messages = {
        'missing': 'Model card file {path} does not exist.',
        'invalid': 'Expected a model card object or a file path.',
    }

    def to_internal_value(self, data):
        if isinstance(data, str):
            if not Path(data).is_file():
                self.fail('missing', path=data)
            try:
                return load_model_card(data)
            except DjangoValidationError as exc:
                raise serializers.ValidationError(exc.messages)
        if isinstance(data, dict):
            card = ModelCardSerializer(data=data)
            card.is_valid(raise_exception=True)
            try:
                return RramParams.from_card(card.validated_data)
            except DjangoValidationError as exc:
                raise serializers.ValidationError(exc.messages)
        self.fail('invalid')

    def to_representation(self, value):
        return value.to_card()


class DeviceSerializer(StrictSerializer):
    lrs = ModelCardField(required=False)
    hrs = ModelCardField(required=False)
    rram = ModelCardField(required=False)


class MosSerializer(StrictSerializer):
    vth_v = serializers.FloatField(min_value=0.05, max_value=1.5, required=False)
    k_a_per_v2 = serializers.FloatField(min_value=1e-7, max_value=1e-1, required=False)
    ioff_a = serializers.FloatField(min_value=0.0, max_value=1e-6, required=False)


class SuppliesSerializer(StrictSerializer):
    vdd_v = serializers.FloatField(min_value=0.5, max_value=5.0, required=False)
    vsec_v = serializers.FloatField(min_value=1.0, max_value=1.4, required=False)


class TimingSerializer(StrictSerializer):
    clock_period_s = serializers.FloatField(min_value=1e-11, max_value=1e-6, required=False)
    edge_s = serializers.FloatField(min_value=1e-13, max_value=1e-7, required=False)
    cue_rise_s = serializers.FloatField(min_value=1e-13, max_value=1e-6, required=False)
    en_start_cycles = serializers.FloatField(min_value=0.0, max_value=10.0, required=False)
    sample_cycles = serializers.FloatField(min_value=0.5, max_value=20.0, required=False)
    settle_s = serializers.FloatField(min_value=0.0, max_value=1e-6, required=False)
    sec_pulse_s = serializers.FloatField(min_value=1e-12, max_value=1e-6, required=False)
    aar_sample_delay_s = serializers.FloatField(min_value=1e-12, max_value=1e-6, required=False)
    write_pulse_cycles = serializers.FloatField(min_value=0.1, max_value=100.0, required=False)


class SolverSerializer(StrictSerializer):
    dt_s = serializers.FloatField(min_value=1e-15, max_value=1e-8, required=False, allow_null=True)
    newton_damping = serializers.FloatField(min_value=0.01, max_value=0.99, required=False)
    newton_max_iter = serializers.IntegerField(min_value=1, max_value=1000, required=False)
    newton_vtol_v = serializers.FloatField(min_value=1e-12, max_value=1e-2, required=False)
    kcl_tol_a = serializers.FloatField(min_value=1e-18, max_value=1e-6, required=False)
    max_step_v = serializers.FloatField(min_value=1e-3, max_value=10.0, required=False)
    max_halvings = serializers.IntegerField(min_value=0, max_value=20, required=False)
    gmin_s = serializers.FloatField(min_value=0.0, max_value=1e-6, required=False)
    dt_edge_ratio = serializers.IntegerField(min_value=1, max_value=1000, required=False)


class CellSerializer(StrictSerializer):
    c_b_f = serializers.FloatField(min_value=1e-18, max_value=1e-12, required=False)
    c_stack_f = serializers.FloatField(min_value=1e-19, max_value=1e-12, required=False)
    c_ml_cell_f = serializers.FloatField(min_value=1e-19, max_value=1e-11, required=False)
    precharge_r_on_ohms = serializers.FloatField(min_value=1.0, max_value=1e9, required=False)
    sec_r_on_ohms = serializers.FloatField(min_value=1.0, max_value=1e9, required=False)
    set_threshold_v = serializers.FloatField(min_value=0.01, max_value=5.0, required=False)
    reset_threshold_v = serializers.FloatField(min_value=0.01, max_value=5.0, required=False)
    q1 = MosSerializer(required=False)
    q2 = MosSerializer(required=False)
    q3 = MosSerializer(required=False)
    q5 = MosSerializer(required=False)
    supplies = SuppliesSerializer(required=False)
    timing = TimingSerializer(required=False)


class ArraySerializer(StrictSerializer):
    rows = serializers.IntegerField(min_value=1, max_value=1024, required=False)
    cols = serializers.IntegerField(min_value=1, max_value=1024, required=False)
    c_ml_f = serializers.FloatField(min_value=1e-18, max_value=1e-10, required=False)
    c_psw_f = serializers.FloatField(min_value=1e-18, max_value=1e-10, required=False)
    driver_load_f = serializers.FloatField(min_value=1e-18, max_value=1e-10, required=False)
    vref_car_v = serializers.FloatField(min_value=0.0, max_value=5.0, required=False, allow_null=True)
    vref_aar_v = serializers.FloatField(min_value=0.0, max_value=5.0, required=False, allow_null=True)
    comparator_offset_v = serializers.FloatField(min_value=-1.0, max_value=1.0, required=False)
    comparator_sigma_v = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    comparator_energy_j = serializers.FloatField(min_value=0.0, max_value=1e-9, required=False)
    aar_min_separation_v = serializers.FloatField(min_value=1e-6, max_value=1.0, required=False)


class RunConfigSerializer(StrictSerializer):
    device = DeviceSerializer(required=False)
    cell = CellSerializer(required=False)
    array = ArraySerializer(required=False)
    solver = SolverSerializer(required=False)
    experiment = serializers.CharField(required=False, allow_null=True)
    out = serializers.CharField(required=False, allow_null=True)
    seed = serializers.IntegerField(min_value=0, required=False)
    jobs = serializers.IntegerField(min_value=1, max_value=256, required=False, allow_null=True)


# (document key, dataclass field) pairs for every unit-suffixed section.
MOS_KEYS = (('vth_v', 'vth'), ('k_a_per_v2', 'k'), ('ioff_a', 'ioff'))
SUPPLY_KEYS = (('vdd_v', 'vdd'), ('vsec_v', 'vsec'))
ARRAY_KEYS = (
    ('rows', 'rows'), ('cols', 'cols'), ('c_ml_f', 'c_ml_f'), ('c_psw_f', 'c_psw_f'),
    ('driver_load_f', 'driver_load_f'), ('vref_car_v', 'vref_car'), ('vref_aar_v', 'vref_aar'),
    ('comparator_offset_v', 'comparator_offset_v'), ('comparator_sigma_v', 'comparator_sigma_v'),
    ('comparator_energy_j', 'comparator_energy_j'), ('aar_min_separation_v', 'aar_min_separation_v'),
)
CELL_KEYS = (
    'c_b_f', 'c_stack_f', 'c_ml_cell_f', 'precharge_r_on_ohms', 'sec_r_on_ohms',
    'set_threshold_v', 'reset_threshold_v',
)
TIMING_KEYS = tuple(name for name in TimingSerializer._declared_fields)
SOLVER_KEYS = tuple(name for name in SolverSerializer._declared_fields)


@dataclass(frozen=True)
class RunConfig:
    array: ArrayConfig = field(default_factory=ArrayConfig)
    experiment: str | None = None
    out: str | None = None
    jobs: int | None = None


def _mapped(section, keys):
    return {attr: section[key] for key, attr in keys if key in section}


def _build(validated):
    """Dataclasses from a validated RunConfig document."""
    base = ArrayConfig()
    cell = base.cell

    device = validated.get('device', {})
    cards = DeviceCards(
        lrs=device.get('lrs', cell.cards.lrs),
        hrs=device.get('hrs', cell.cards.hrs),
    )
    cell = replace(cell, cards=cards, rram=device.get('rram', cards.hrs))

    cell_doc = validated.get('cell', {})
    updates = {name: cell_doc[name] for name in CELL_KEYS if name in cell_doc}
    for name in ('q1', 'q2', 'q3', 'q5'):
        if name in cell_doc:
            updates[name] = replace(getattr(cell, name), **_mapped(cell_doc[name], MOS_KEYS))
    if 'supplies' in cell_doc:
        updates['supplies'] = Supplies(**{**vars(cell.supplies), **_mapped(cell_doc['supplies'], SUPPLY_KEYS)})
    if 'timing' in cell_doc:
        updates['timing'] = Timing(**{**vars(cell.timing), **cell_doc['timing']})
    if 'solver' in validated:
        updates['solver'] = SolverSettings(**{**vars(cell.solver), **validated['solver']})
    cell = replace(cell, **updates)

    array_doc = validated.get('array', {})
    array = replace(base, cell=cell, seed=validated.get('seed', base.seed), **_mapped(array_doc, ARRAY_KEYS))
    return RunConfig(
        array=array,
        experiment=validated.get('experiment'),
        out=validated.get('out'),
        jobs=validated.get('jobs'),
    )


def parse_run_config(document):
    """Validate a RunConfig document; raises rest_framework ValidationError."""
    serializer = RunConfigSerializer(data=document)
    serializer.is_valid(raise_exception=True)
    try:
        return _build(serializer.validated_data)
    except DjangoValidationError as exc:
        raise serializers.ValidationError(exc.message_dict if hasattr(exc, 'error_dict') else exc.messages)


def run_config_document(run):
    """Inverse of parse_run_config: a document that loads back to `run`."""
    array, cell = run.array, run.array.cell
    document = {
        'device': {
            'lrs': cell.cards.lrs.to_card(),
            'hrs': cell.cards.hrs.to_card(),
            'rram': cell.rram.to_card(),
        },
        'cell': {
            **{name: getattr(cell, name) for name in CELL_KEYS},
            **{
                name: {key: getattr(getattr(cell, name), attr) for key, attr in MOS_KEYS}
                for name in ('q1', 'q2', 'q3', 'q5')
            },
            'supplies': {key: getattr(cell.supplies, attr) for key, attr in SUPPLY_KEYS},
            'timing': {name: getattr(cell.timing, name) for name in TIMING_KEYS},
        },
        'array': {key: getattr(array, attr) for key, attr in ARRAY_KEYS},
        'solver': {name: getattr(cell.solver, name) for name in SOLVER_KEYS},
        'seed': array.seed,
    }
    for name in ('experiment', 'out', 'jobs'):
        if getattr(run, name) is not None:
            document[name] = getattr(run, name)
    return document


def load_run_config(path):
    """Read and validate a JSON RunConfig document."""
    try:
        document = JSONParser().parse(io.BytesIO(Path(path).read_bytes()))
    except OSError as exc:
        raise DjangoValidationError({'config': f'Cannot read config {path}: {exc}'}) from exc
    except ParseError as exc:
        raise DjangoValidationError({'config': f'{path} is not valid JSON: {exc}'}) from exc
    logger.info('config loaded path=%s', path)
    return parse_run_config(document)


def dump_run_config(run, path=None):
    """JSON bytes for `run` with model cards inlined; also written to `path` if given."""
    payload = JSONRenderer().render(run_config_document(run), renderer_context={'indent': 2}) + b'\n'
    if path is not None:
        Path(path).write_bytes(payload)
    return payload


class BranchFitSerializer(serializers.Serializer):
    a = serializers.FloatField()
    b_per_v = serializers.FloatField(source='b')
    rms_log = serializers.FloatField()
    n_points = serializers.IntegerField()
    boundary_hit = serializers.BooleanField()


class FitResultSerializer(serializers.Serializer):
    card = ModelCardField(source='params')
    positive = BranchFitSerializer(allow_null=True)
    negative = BranchFitSerializer(allow_null=True)
    fit_rms_log = serializers.FloatField()
    boundary_hit = serializers.BooleanField()
    diagnostics = serializers.DictField()


class TruthRowSerializer(serializers.Serializer):
    cue = serializers.CharField()
    stored = serializers.CharField()
    mid_level = serializers.CharField()
    ml_level = serializers.CharField()
    mid_v = serializers.FloatField()
    ml_v = serializers.FloatField()
    obeys_or_rule = serializers.BooleanField()


class EnergyReportSerializer(serializers.Serializer):
    phase_j = serializers.DictField(child=serializers.FloatField())
    driver_j = serializers.DictField(child=serializers.FloatField())
    core_j = serializers.FloatField()
    periphery_j = serializers.FloatField()
    row_overhead_j = serializers.FloatField()
    total_j = serializers.FloatField()
    per_bit_j = serializers.FloatField()
    core_share = serializers.FloatField()
    bits = serializers.IntegerField()
    searches = serializers.IntegerField()


class SearchOutcomeSerializer(serializers.Serializer):
    column = serializers.IntegerField()
    data = serializers.CharField()
    cue = serializers.CharField()
    ml_sample_v = serializers.FloatField()
    vref_car_v = serializers.FloatField()
    decision = serializers.CharField()
    miss_count_truth = serializers.IntegerField()
    correct = serializers.BooleanField()
    energy = EnergyReportSerializer()


class AarSuiteReportSerializer(serializers.Serializer):
    vref_aar_v = serializers.FloatField(allow_null=True)
    lrs_v = serializers.FloatField(allow_null=True)
    hrs_v = serializers.FloatField(allow_null=True)
    all_correct = serializers.BooleanField()
    calibration_error = serializers.CharField(allow_null=True)
    reads = serializers.ListField(child=serializers.DictField())
    misreads = serializers.ListField(child=serializers.DictField())
    config = serializers.DictField()


class EsrPointSerializer(serializers.Serializer):
    r_ohms = serializers.FloatField()
    v_across_v = serializers.FloatField(allow_null=True)
    current_a = serializers.FloatField(allow_null=True)
    error = serializers.CharField(allow_null=True)


class EsrSweepSerializer(serializers.Serializer):
    direction = serializers.CharField()
    points = EsrPointSerializer(many=True)


class GapReportSerializer(serializers.Serializer):
    min_hit_v = serializers.FloatField()
    max_worst_miss_v = serializers.FloatField()
    gap_v = serializers.FloatField()
    reference_gap_v = serializers.FloatField()
    levels = serializers.SerializerMethodField()

    def get_levels(self, obj):
        return [
            {'cue': cue, 'data': data, 'ml_sample_v': level}
            for (cue, data), level in obj.levels.items()
        ]


class Table2ReportSerializer(serializers.Serializer):
    patterns = serializers.ListField(child=serializers.CharField())
    levels_v = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    decisions = serializers.ListField(child=serializers.ListField(child=serializers.CharField()))
    expected = serializers.ListField(child=serializers.ListField(child=serializers.CharField()))
    vref_car_v = serializers.FloatField()
    gap = GapReportSerializer()
    misclassified = serializers.ListField(child=serializers.DictField())
    matches_reference = serializers.BooleanField()
    config = serializers.DictField()


class SweepResultSerializer(serializers.Serializer):
    parameter = serializers.CharField()
    corner = serializers.CharField()
    values = serializers.ListField(child=serializers.FloatField())
    gaps_v = serializers.ListField(child=serializers.FloatField(allow_null=True))
    errors = serializers.SerializerMethodField()
    argmax_value = serializers.SerializerMethodField()
    max_gap_v = serializers.SerializerMethodField()
    unimodal = serializers.BooleanField()

    def get_errors(self, obj):
        return {str(index): message for index, message in sorted(obj.errors.items())}

    def get_argmax_value(self, obj):
        return None if obj.argmax is None else obj.argmax[0]

    def get_max_gap_v(self, obj):
        return None if obj.argmax is None else obj.argmax[1]


class TimingReportSerializer(serializers.Serializer):
    ml_developing_delay_hrs_s = serializers.FloatField(allow_null=True)
    ml_developing_delay_lrs_s = serializers.FloatField(allow_null=True)
    search_delay_s = serializers.FloatField(allow_null=True)
    pre_charge_s = serializers.FloatField()
    evaluation_s = serializers.FloatField(allow_null=True)
    reference_delay_hrs_s = serializers.FloatField()
    reference_delay_lrs_s = serializers.FloatField()
    reference_search_delay_s = serializers.FloatField()
    config = serializers.DictField()


class CellEnergyRowSerializer(serializers.Serializer):
    search = serializers.CharField()
    stored = serializers.CharField()
    pre_charge_j = serializers.FloatField()
    evaluate_j = serializers.FloatField()
    total_j = serializers.FloatField()
    miss = serializers.BooleanField()


class EnergyMapSerializer(serializers.Serializer):
    patterns = serializers.ListField(child=serializers.CharField())
    per_bit_j = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    breakdown_j = serializers.DictField(child=serializers.FloatField())
    core_j = serializers.FloatField()
    periphery_j = serializers.FloatField()
    core_share = serializers.FloatField()
    array_per_bit_j = serializers.FloatField()
    isolated_per_bit_j = serializers.FloatField()
    worst_cell = serializers.ListField(child=serializers.CharField())
    best_cell = serializers.ListField(child=serializers.CharField())
    reference_worst_cell = serializers.ListField(child=serializers.CharField())
    reference_best_cell = serializers.ListField(child=serializers.CharField())
    config = serializers.DictField()


REPORT_SERIALIZERS = {
    'device_card': FitResultSerializer,
    'truth_table': TruthRowSerializer,
    'search': SearchOutcomeSerializer,
    'aar_suite': AarSuiteReportSerializer,
    'write_sweep': EsrSweepSerializer,
    'table2': Table2ReportSerializer,
    'vsec_sweep': SweepResultSerializer,
    'energy_map': EnergyMapSerializer,
    'timing': TimingReportSerializer,
    'cell_energy': CellEnergyRowSerializer,
}


def serialize_report(kind, report):
    """Primitive data for a report; lists of records serialize with many=True."""
    try:
        serializer_class = REPORT_SERIALIZERS[kind]
    except KeyError:
        raise DjangoValidationError({'kind': f'Unknown report kind {kind!r}.'})
    return serializer_class(report, many=isinstance(report, (list, tuple))).data
