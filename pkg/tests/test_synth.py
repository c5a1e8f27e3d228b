import filecmp
import json

import numpy as np
import pytest
from scipy import optimize

from akipred.ehr import apply_exclusions
from akipred.phenotype import build_stage_timeline
from akipred.synth import (DEFAULT_PROFILES, ProfileError, SiteProfile, generate_site, planted_signal,
                           read_ground_truth, site_a, site_b, validate_marginals)


def _kept(site):
    return [g for g in site.truth if g.exclusion is None]


def test_default_profiles_mirror_cohort_table():
    a, b = site_a(), site_b()
    assert (a.age_mean, a.age_sd, a.female, a.race["AFRICAN_AMERICAN"]) == (55.0, 19.0, 0.55, 0.22)
    assert (b.age_mean, b.age_sd, b.female, b.race["AFRICAN_AMERICAN"]) == (71.0, 14.0, 0.54, 0.11)
    assert a.worst_stage_target[0] == pytest.approx(0.86, abs=0.005)
    assert b.worst_stage_target[0] == pytest.approx(0.64, abs=0.005)
    # mild concept shift on the planted coefficients
    assert b.beta_burden / a.beta_burden == pytest.approx(1.2) and b.beta_kegfr / a.beta_kegfr == pytest.approx(0.8)
    assert set(DEFAULT_PROFILES) == {"A", "B", "P"}


@pytest.mark.parametrize("bad", [dict(female=1.2), dict(race={"WHITE": 0.5}), dict(n_encounters=-1),
                                 dict(stage_up=(0.1, 0.1)), dict(routine_panel="x"), dict(egfr_q25=200.0),
                                 dict(age_sd=0.0), dict(exclude_eskd=0.6, exclude_short_los=0.6)])
def test_invalid_profiles(bad):
    with pytest.raises(ProfileError):
        site_a(**bad)


def test_profile_mapping_round_trip():
    p = site_b(seed=9)
    again = SiteProfile.from_mapping(json.loads(json.dumps(p.to_dict())))
    assert again == p
    with pytest.raises(ProfileError):
        SiteProfile.from_mapping({"nope": 1})


def test_byte_identical_output(tmp_path):
    p = site_a(n_encounters=40, seed=5)
    a = generate_site(p).write(tmp_path / "a", "seed=5")
    b = generate_site(p).write(tmp_path / "b", "seed=5")
    for k in a:
        assert filecmp.cmp(a[k], b[k], shallow=False)
    assert [g.to_json() for g in read_ground_truth(a["ground_truth"])] == \
        [g.to_json() for g in generate_site(p).truth]


def test_subset_reproduces_encounters():
    p = site_b(n_encounters=60, seed=2)
    full = generate_site(p)
    part = generate_site(p, indices=[41, 3, 17])
    for g in part.truth:
        eid = g.encounter_id
        assert part.store.timeline(eid) == full.store.timeline(eid)
        assert g == next(x for x in full.truth if x.encounter_id == eid)
    with pytest.raises(ProfileError):
        generate_site(p, indices=[60])


def test_seed_changes_output():
    a = generate_site(site_a(n_encounters=10, seed=1)).truth
    b = generate_site(site_a(n_encounters=10, seed=2)).truth
    assert [g.latent_stages for g in a] != [g.latent_stages for g in b]


def test_planted_exclusions_are_found():
    site = generate_site(site_a(n_encounters=300, seed=8))
    _, report = apply_exclusions(site.store)
    planted = {g.encounter_id: g.exclusion for g in site.truth if g.exclusion}
    assert dict(report.excluded) == planted


@pytest.mark.parametrize("make", [site_a, site_b, planted_signal])
def test_latent_worst_stage_recovered(make):
    site = generate_site(make(n_encounters=800, seed=3))
    kept, _ = apply_exclusions(site.store)
    truth = {g.encounter_id: g.worst_stage for g in site.truth}
    hits = [int(build_stage_timeline(tl).worst_stage) == truth[tl.encounter.encounter_id] for tl in kept.timelines()]
    assert np.mean(hits) >= 0.95


def test_site_a_no_aki_fraction():
    kept = _kept(generate_site(site_a(n_encounters=5000, seed=1)))
    frac = np.mean([g.worst_stage == 0 for g in kept])
    assert abs(frac - 0.86) <= 0.04


def _logit_z(x, y):
    """Wald z of the slope in an independent two-parameter logistic fit."""
    X = np.column_stack([np.ones_like(x), (x - x.mean()) / x.std()])
    b = optimize.minimize(lambda b: np.sum(np.logaddexp(0, X @ b)) - y @ (X @ b), np.zeros(2), method="BFGS").x
    p = 1 / (1 + np.exp(-X @ b))
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    return b[1] / np.sqrt(cov[1, 1])


def test_null_signal_independent_of_burden():
    kept = _kept(generate_site(site_a(n_encounters=5000, seed=1, beta_burden=0.0, beta_kegfr=0.0)))
    x = np.array([g.mean_daily_burden for g in kept])
    y = np.array([g.worst_stage >= 2 for g in kept], float)
    assert abs(_logit_z(x, y)) < 3


def test_planted_signal_detected_by_same_fit():
    kept = _kept(generate_site(site_a(n_encounters=5000, seed=1)))
    x = np.array([g.mean_daily_burden for g in kept])
    y = np.array([g.worst_stage >= 2 for g in kept], float)
    assert _logit_z(x, y) > 3


def test_beta_burden_monotone():
    rates = []
    for b1 in (0.0, 0.15, 0.3):
        kept = _kept(generate_site(site_a(n_encounters=5000, seed=1, beta_burden=b1)))
        rates.append(np.mean([g.worst_stage >= 2 for g in kept]))
    assert rates[0] < rates[1] < rates[2]


@pytest.mark.parametrize("make", [site_a, site_b])
def test_marginals_at_10000(make):
    rep = validate_marginals(generate_site(make(n_encounters=10000, seed=1)))
    assert rep.ok, rep.format()
    assert all(c.status == "PASS" for c in rep.checks)


def test_small_and_empty_marginals():
    rep = validate_marginals(generate_site(site_a(n_encounters=10, seed=1)))
    assert rep.checks and all(c.status == "UNDERPOWERED" for c in rep.checks) and rep.ok
    assert validate_marginals(generate_site(site_a(n_encounters=0))).checks == []


def test_ground_truth_fields():
    for g in generate_site(site_b(n_encounters=30, seed=4)).truth:
        assert g.worst_stage == max(g.latent_stages, default=0)
        assert len(g.latent_stages) == len(g.measurement_hours)
        assert g.site == "B" and g.beta_burden == pytest.approx(0.18)
