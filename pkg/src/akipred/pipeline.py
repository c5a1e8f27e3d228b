"""Glue between stages: cohort labelling, featurization, splits, schema fitting, model evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ehr import DEFAULT_RATIOS, CohortSplit, EventStore, ExclusionReport, Partition, apply_exclusions, split_cohort
from .evalkit import MetricReport, ScoredRows, evaluate_rows, fit_isotonic, reliability_bins, youden_threshold
from .features import (EncounterTensor, FeatureConfig, FeatureSchema, RawEncounter, RuleSets, apply_schema,
                       default_rules, featurize_encounter, fit_schema_for)
from .model import Checkpoint, TrainConfig, predict, train, train_logistic_baseline
from .phenotype import StageTimeline, WindowLabel, build_stage_timeline, label_windows
from .renal import DEFAULT_CONSTANTS, RenalConstants

log = logging.getLogger(__name__)


@dataclass
class LabeledCohort:
    store: EventStore
    exclusions: ExclusionReport
    stages: dict[str, StageTimeline]
    labels: dict[str, list[WindowLabel]]


def label_cohort(store: EventStore, consts: RenalConstants = DEFAULT_CONSTANTS,
                 day_offset_hours: float = 0.0) -> LabeledCohort:
    kept, report = apply_exclusions(store, consts, day_offset_hours=day_offset_hours)
    stages, labels = {}, {}
    for tl in kept.timelines():
        st = build_stage_timeline(tl, consts, day_offset_hours)
        stages[tl.encounter_id] = st
        labels[tl.encounter_id] = label_windows(st)
    return LabeledCohort(kept, report, stages, labels)


def featurize_cohort(cohort: LabeledCohort, split: CohortSplit | None = None,
                     config: FeatureConfig = FeatureConfig(), rules: RuleSets | None = None,
                     consts: RenalConstants = DEFAULT_CONSTANTS) -> list[RawEncounter]:
    rules = rules or default_rules()
    out = []
    for tl in cohort.store.timelines():
        part = ""
        if split is not None:
            p = split.assignment.get(tl.encounter.patient_id)
            part = p.value if p is not None else ""
        out.append(featurize_encounter(tl, cohort.labels[tl.encounter_id], config, rules, consts,
                                       site=cohort.store.site, partition=part))
    return out


@dataclass
class SiteData:
    name: str
    raws: list[RawEncounter]
    split: CohortSplit
    cohort: LabeledCohort | None = None

    def partition(self, part: Partition | str) -> list[RawEncounter]:
        part = Partition(part).value
        return [r for r in self.raws if r.partition == part]


def prepare_site(store: EventStore, split_seed: int = 0, ratios: Sequence[float] = DEFAULT_RATIOS,
                 config: FeatureConfig = FeatureConfig(), rules: RuleSets | None = None,
                 consts: RenalConstants = DEFAULT_CONSTANTS, keep_cohort: bool = False) -> SiteData:
    cohort = label_cohort(store, consts, config.day_offset_hours)
    split = split_cohort(cohort.store, ratios, split_seed)
    raws = featurize_cohort(cohort, split, config, rules, consts)
    return SiteData(store.site, raws, split, cohort if keep_cohort else None)


def tensorize(raws: Sequence[RawEncounter], schema: FeatureSchema) -> list[EncounterTensor]:
    return [apply_schema(r, schema) for r in raws if len(r.labels)]


@dataclass
class Partitions:
    """Finalized tensors for one training population, under that population's schema."""

    schema: FeatureSchema
    dev: list[EncounterTensor]
    val: list[EncounterTensor]
    cal: list[EncounterTensor]
    test: dict[str, list[EncounterTensor]] = field(default_factory=dict)


def build_partitions(train_sites: Sequence[SiteData], test_sites: Sequence[SiteData],
                     config: FeatureConfig = FeatureConfig(), rules: RuleSets | None = None) -> Partitions:
    """Fit the schema on the pooled development partitions of ``train_sites`` and apply it everywhere."""
    dev_raw = [r for s in train_sites for r in s.partition(Partition.DEVELOPMENT)]
    schema = fit_schema_for(dev_raw, config, rules)
    parts = Partitions(schema, tensorize(dev_raw, schema),
                       tensorize([r for s in train_sites for r in s.partition(Partition.VALIDATION)], schema),
                       tensorize([r for s in train_sites for r in s.partition(Partition.CALIBRATION)], schema))
    for s in test_sites:
        parts.test[s.name] = tensorize(s.partition(Partition.TEST), schema)
    return parts


def scored(ckpt: Checkpoint, tensors: Sequence[EncounterTensor], calibrated: bool = True) -> ScoredRows:
    return ScoredRows.from_predictions(tensors, predict(ckpt, tensors, calibrated))


def calibrate(ckpt: Checkpoint, cal: Sequence[EncounterTensor]) -> Checkpoint:
    """Attach an isotonic calibrator fitted on the eval-masked calibration windows."""
    rows = scored(ckpt, cal, calibrated=False).evaluable()
    ckpt.calibrator = fit_isotonic(rows.score, rows.label)
    return ckpt


def fit_model(parts: Partitions, config: TrainConfig = TrainConfig(), baseline: bool = False,
              with_calibration: bool = True) -> Checkpoint:
    fit = train_logistic_baseline if baseline else train
    ckpt = fit(parts.dev, parts.val, config, parts.schema.version_hash)
    if with_calibration and parts.cal:
        calibrate(ckpt, parts.cal)
    return ckpt


def evaluate(ckpt: Checkpoint, val: Sequence[EncounterTensor], test: Sequence[EncounterTensor], name: str,
             n_boot: int = 500, seed: int = 0, unit: str = "encounter", subgroups: bool = True) -> MetricReport:
    """Youden threshold from validation predictions, metrics on the test predictions."""
    v = scored(ckpt, val).evaluable()
    threshold = youden_threshold(v.score, v.label) if len(v) else None
    return evaluate_rows(scored(ckpt, test), threshold, name, n_boot, seed, unit, subgroups)


def calibration_tables(ckpt: Checkpoint, tensors: Sequence[EncounterTensor], bins: int = 20):
    """(raw, calibrated) reliability tables on eval-masked windows."""
    raw = scored(ckpt, tensors, calibrated=False).evaluable()
    cal = scored(ckpt, tensors, calibrated=True).evaluable()
    return reliability_bins(raw.score, raw.label, bins), reliability_bins(cal.score, cal.label, bins)


CROSS_SITE_ORDER = (("A", "A"), ("A", "B"), ("B", "A"), ("B", "B"), ("AB", "A"), ("AB", "B"))


def cross_site(sites: dict[str, SiteData], config: TrainConfig = TrainConfig(),
               feature_config: FeatureConfig = FeatureConfig(), n_boot: int = 500, seed: int = 0,
               subgroups: bool = True) -> tuple[dict[tuple[str, str], MetricReport], dict[str, Checkpoint]]:
    """Train on each site and on both pooled, test each on every site's test partition."""
    names = sorted(sites)
    if len(names) != 2:
        raise ValueError("cross-site evaluation needs exactly two sites")
    a, b = names
    pools = {a: [sites[a]], b: [sites[b]], a + b: [sites[a], sites[b]]}
    reports, ckpts = {}, {}
    for train_name, members in pools.items():
        parts = build_partitions(members, [sites[a], sites[b]], feature_config)
        ckpt = fit_model(parts, config)
        ckpts[train_name] = ckpt
        for test_name in (a, b):
            rep_name = f"train_{train_name}_test_{test_name}"
            reports[(train_name, test_name)] = evaluate(ckpt, parts.val, parts.test[test_name], rep_name,
                                                        n_boot, seed, subgroups=subgroups)
            log.info("event=cross_site train=%s test=%s auroc=%s", train_name, test_name,
                     reports[(train_name, test_name)].metrics["auroc"].point)
    return reports, ckpts
