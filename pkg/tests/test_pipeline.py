import numpy as np
import pytest

from akipred.ehr import Partition
from akipred.features import fit_schema_for
from akipred.model import TrainConfig
from akipred.pipeline import (build_partitions, calibrate, calibration_tables, cross_site, evaluate, fit_model,
                              label_cohort, prepare_site, scored)
from akipred.synth import generate_site, site_a, site_b

SMALL = TrainConfig(max_epochs=4, hidden=8, static_hidden=8, head_hidden=8, batch_size=16)


@pytest.fixture(scope="module")
def sites():
    return {p.name: prepare_site(generate_site(p).store, split_seed=1)
            for p in (site_a(n_encounters=150, seed=6), site_b(n_encounters=150, seed=6))}


def test_label_cohort_matches_exclusions():
    store = generate_site(site_a(n_encounters=80, seed=2)).store
    cohort = label_cohort(store)
    assert set(cohort.stages) == set(cohort.store.encounter_ids()) == set(cohort.labels)
    assert len(cohort.stages) == cohort.exclusions.included
    for eid, labs in cohort.labels.items():
        assert [w.window_index for w in labs] == list(range(len(labs)))


def test_partitions_follow_patient_split(sites):
    s = sites["A"]
    for r in s.raws:
        assert r.partition == s.split.assignment[r.patient_id].value
    assert {r.partition for r in s.raws} <= {p.value for p in Partition}


def test_schema_fit_on_development_only(sites):
    parts = build_partitions([sites["A"]], [sites["A"], sites["B"]])
    dev = sites["A"].partition(Partition.DEVELOPMENT)
    assert parts.schema.version_hash == fit_schema_for(dev).version_hash
    assert set(parts.test) == {"A", "B"}
    assert len(parts.dev) == sum(len(r.labels) > 0 for r in dev)


def test_pooled_schema_differs_from_single_site(sites):
    one = build_partitions([sites["A"]], [])
    both = build_partitions([sites["A"], sites["B"]], [])
    assert one.schema.version_hash != both.schema.version_hash
    assert len(both.dev) > len(one.dev)


def test_fit_calibrate_evaluate(sites):
    parts = build_partitions([sites["B"]], [sites["B"]])
    ckpt = fit_model(parts, SMALL)
    assert ckpt.calibrator is not None
    rep = evaluate(ckpt, parts.val, parts.test["B"], "t", n_boot=10, subgroups=False)
    assert 0 <= rep.metrics["auroc"].point <= 1 and rep.threshold is not None
    raw, cal = calibration_tables(ckpt, parts.cal)
    assert cal.ece <= raw.ece + 1e-12


def test_calibration_is_monotone_post_map(sites):
    parts = build_partitions([sites["B"]], [sites["B"]])
    ckpt = fit_model(parts, SMALL, with_calibration=False)
    raw = scored(ckpt, parts.test["B"], calibrated=False).score
    calibrate(ckpt, parts.cal)
    cal = scored(ckpt, parts.test["B"]).score
    order = np.argsort(raw, kind="stable")
    assert np.all(np.diff(cal[order]) >= 0)


def test_cross_site_matrix(sites):
    reports, ckpts = cross_site(sites, SMALL, n_boot=0, subgroups=False)
    assert list(reports) == [("A", "A"), ("A", "B"), ("B", "A"), ("B", "B"), ("AB", "A"), ("AB", "B")]
    assert set(ckpts) == {"A", "B", "AB"}
    with pytest.raises(ValueError):
        cross_site({"A": sites["A"]}, SMALL)
