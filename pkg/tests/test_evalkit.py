import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from akipred.evalkit import (AA, NON_AA, Confusion, IsotonicCalibrator, MetricValue, ScoredRows, auprc, auroc,
                             bootstrap_ci, confusion, confusion_metrics, evaluate_rows,
                             expected_calibration_error, fit_isotonic, pava, reliability_bins, subgroup_eval,
                             youden_threshold)
from oracles import (all_subsets, enumerated_ap, exhaustive_youden, grid_isotonic_sse, pairwise_auroc,
                     percentile_linear, threshold_ap)


def rows_of(scores, labels, eids=None, sex=None, race=None, mask=None):
    n = len(scores)
    eids = eids if eids is not None else [f"E{i}" for i in range(n)]
    return ScoredRows(np.array(eids, dtype=object), np.zeros(n, int), np.asarray(scores, float),
                      np.asarray(labels, int), np.ones(n, int) if mask is None else np.asarray(mask, int),
                      np.array(sex or ["MALE"] * n, dtype=object), np.array(race or [NON_AA] * n, dtype=object),
                      np.array(["A"] * n, dtype=object))


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75
    assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auroc([0.1, 0.2], [1, 1]) is None


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0
    assert auprc([0.9, 0.8], [0, 1]) == 0.5
    assert auprc([0.1, 0.2], [0, 0]) is None
    rng = np.random.default_rng(0)
    s, y = rng.random(5), np.array([1, 0, 1, 1, 0])
    assert auprc(s, y) == pytest.approx(threshold_ap(list(s), list(y)), abs=1e-15)
    # tied scores keep input order
    assert auprc([0.5, 0.5], [0, 1]) == 0.5 and auprc([0.5, 0.5], [1, 0]) == 1.0


def test_youden_examples():
    s = [0.1, 0.2, 0.3, 0.6, 0.7, 0.8]
    assert youden_threshold(s, [0, 0, 0, 1, 1, 1]) == 0.6
    hand = [0.1, 0.4, 0.35, 0.8, 0.65, 0.5]
    lab = [0, 0, 1, 1, 0, 1]
    assert youden_threshold(hand, lab) == exhaustive_youden(hand, lab)
    assert youden_threshold([0.2, 0.3], [1, 1]) is None


def test_confusion_examples():
    s = [0.9] * 3 + [0.1] * 2 + [0.9] + [0.1] * 4
    y = [1] * 3 + [1] * 2 + [0] + [0] * 4
    c = confusion(s, y, 0.5)
    assert c == Confusion(3, 1, 2, 4)
    m = confusion_metrics(s, y, 0.5)
    assert m == {"sensitivity": 0.6, "specificity": 0.8, "ppv": 0.75, "npv": 4 / 6, "accuracy": 0.7}
    perfect = confusion_metrics([0.9, 0.1], [1, 0], 0.5)
    assert all(v == 1.0 for v in perfect.values())
    neg = confusion_metrics([0.1] * 4, [1, 0, 0, 0], 0.5)
    assert neg["sensitivity"] == 0 and neg["specificity"] == 1 and neg["npv"] == 0.75 and neg["ppv"] is None


def _instance(rng, max_rows=200, ties=True):
    n = int(rng.integers(2, max_rows + 1))
    s = rng.random(n)
    if ties:
        s = np.round(s, int(rng.integers(1, 3)))
    y = (rng.random(n) < rng.uniform(0.05, 0.6)).astype(int)
    return s, y


def test_auroc_pairwise_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        s, y = _instance(rng)
        assert auroc(s, y) == pairwise_auroc(list(s), list(y))


def test_auprc_oracles():
    rng = np.random.default_rng(12)
    for _ in range(200):
        s, y = _instance(rng, ties=False)
        if y.sum() == 0:
            continue
        assert auprc(s, y) == pytest.approx(threshold_ap(list(s), list(y)), rel=1e-13)
        s, y = _instance(rng, ties=True)
        assert auprc(s, y) == pytest.approx(enumerated_ap(list(s), list(y)), rel=1e-13) or y.sum() == 0


def test_youden_exhaustive_oracle():
    rng = np.random.default_rng(13)
    for _ in range(200):
        s, y = _instance(rng, 60)
        assert youden_threshold(s, y) == exhaustive_youden(list(s), list(y))


@given(st.lists(st.tuples(st.floats(0, 1).map(lambda v: round(v, 6)), st.integers(0, 1)), min_size=2, max_size=40))
def test_rank_invariance(pairs):
    s = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    if y.min() == y.max():
        return
    f = lambda v: np.exp(3 * v) + v  # strictly increasing
    assert auroc(f(s), y) == auroc(s, y)
    i = np.flatnonzero(s == youden_threshold(s, y))[0]
    assert f(s)[i] == youden_threshold(f(s), y)


def test_bootstrap_examples():
    s, y = np.array([0.9, 0.1, 0.8, 0.2]), np.array([1, 0, 1, 0])
    ci = bootstrap_ci(lambda a, b: 0.42, s, y, ["a", "b", "c", "d"], n=50)
    assert (ci.low, ci.high) == (0.42, 0.42)
    a = bootstrap_ci(auroc, s, y, ["a", "a", "b", "b"], n=100, seed=3)
    assert a == bootstrap_ci(auroc, s, y, ["a", "a", "b", "b"], n=100, seed=3)
    rare = lambda a, b: 1.0 if b.sum() >= 3 else None  # defined only when 3+ positives are drawn
    undefined = bootstrap_ci(rare, [0.1, 0.9, 0.5], [0, 1, 0], ["a", "b", "c"], n=40, seed=1)
    assert undefined.low is None and "undefined" in undefined.diagnostic


def _oracle_bootstrap(metric, s, y, groups, n, seed):
    ids = sorted(set(groups))
    rows = {g: [i for i in range(len(s)) if groups[i] == g] for g in ids}
    vals = []
    for b in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        pick = rng.integers(0, len(ids), size=len(ids))
        idx = [i for j in pick for i in rows[ids[j]]]
        v = metric(s[idx], y[idx])
        if v is not None:
            vals.append(v)
    return percentile_linear(vals, 2.5), percentile_linear(vals, 97.5)


def test_bootstrap_matches_duplicate_oracle():
    rng = np.random.default_rng(4)
    groups = ["e3", "e1", "e1", "e5", "e2", "e2", "e2", "e4", "e3", "e5"]
    s, y = rng.random(10), np.array([1, 0, 0, 1, 0, 1, 0, 1, 0, 0])
    ci = bootstrap_ci(auroc, s, y, groups, n=200, seed=9)
    lo, hi = _oracle_bootstrap(auroc, s, y, groups, 200, 9)
    assert ci.low == pytest.approx(lo, abs=1e-15) and ci.high == pytest.approx(hi, abs=1e-15)


def test_bootstrap_independent_of_row_order():
    rng = np.random.default_rng(5)
    groups = np.array([f"e{i // 3}" for i in range(30)])
    s, y = rng.random(30), (rng.random(30) < 0.4).astype(int)
    # keep within-encounter order: permute whole encounters only
    enc_perm = np.concatenate([np.flatnonzero(groups == g) for g in rng.permutation(np.unique(groups))])
    a = bootstrap_ci(auroc, s, y, groups, n=100, seed=2)
    b = bootstrap_ci(auroc, s[enc_perm], y[enc_perm], groups[enc_perm], n=100, seed=2)
    assert a == b


def test_window_unit_bootstrap():
    rng = np.random.default_rng(6)
    s, y = rng.random(40), (rng.random(40) < 0.5).astype(int)
    ci = bootstrap_ci(auroc, s, y, None, n=100, unit="window")
    assert ci.low <= auroc(s, y) <= ci.high
    with pytest.raises(ValueError):
        bootstrap_ci(auroc, s, y, ["x"] * 40, unit="patient")


def test_subgroups():
    r = rows_of([0.9, 0.2, 0.7, 0.1], [1, 0, 1, 0], sex=["FEMALE"] * 4, race=[AA, AA, NON_AA, NON_AA])
    out = subgroup_eval(r, n_boot=0)
    assert out["male"] is None and out["female"].metrics["auroc"].point == 1.0
    assert set(out) == {"female", "male", "african_american", "non_african_american", "female_african_american",
                        "female_non_african_american", "male_african_american", "male_non_african_american"}
    rep = evaluate_rows(r, 0.5, "x", n_boot=0)
    assert rep.metrics["auroc"].point == auroc(r.score, r.label)


def test_report_masks_and_formats(tmp_path):
    rng = np.random.default_rng(7)
    n = 300
    r = rows_of(rng.random(n), (rng.random(n) < 0.3).astype(int), eids=[f"E{i // 5}" for i in range(n)],
                sex=list(rng.choice(["MALE", "FEMALE"], n)), race=list(rng.choice([AA, NON_AA], n)),
                mask=(rng.random(n) < 0.9).astype(int))
    rep = evaluate_rows(r, 0.5, "demo", n_boot=50, seed=1)
    assert rep.n_rows == int(r.eval_mask.sum())
    for m, v in rep.metrics.items():
        assert v.low is None or v.low <= v.high
    for sub in rep.subgroups.values():
        assert 0 <= sub.metrics["auroc"].point <= 1
    rep.write(tmp_path, "hdr")
    assert (tmp_path / "demo.tsv").read_text().startswith("# hdr\ndemo\tN=")
    kv = (tmp_path / "demo.kv").read_text()
    assert "demo.auroc=" in kv and "demo.female.auroc=" in kv
    assert MetricValue(0.5, 0.6, 0.7).ordered is False and MetricValue(None).format() == "absent"


def test_isotonic_examples():
    cal = fit_isotonic([0.2, 0.8], [1, 0])
    assert np.array_equal(cal.apply([0.2, 0.8]), [0.5, 0.5])
    cal = fit_isotonic([0.1, 0.1, 0.5, 0.5, 0.9], [0, 1, 0, 1, 1])
    assert np.array_equal(cal.apply([0.1, 0.5, 0.9]), [0.5, 0.5, 1.0])
    assert cal.apply([0.0])[0] == 0.5 and cal.apply([2.0])[0] == 1.0  # clamped at both ends
    with pytest.raises(ValueError):
        fit_isotonic([0.3], [1])
    with pytest.raises(ValueError):
        IsotonicCalibrator(np.array([0.1, 0.2]), np.array([0.5, 0.4]))


def test_pava_beats_grid_oracle():
    rng = np.random.default_rng(14)
    for _ in range(50):
        s = np.round(rng.random(20), 1)
        y = (rng.random(20) < s).astype(int)
        cal = fit_isotonic(s, y)
        sse = float(((cal.apply(s) - y) ** 2).sum())
        assert sse <= grid_isotonic_sse(list(s), list(y)) + 1e-12


def test_pava_small_exhaustive():
    # on 6 points every monotone fit is a partition into consecutive blocks; PAVA attains the minimum
    rng = np.random.default_rng(15)
    for _ in range(30):
        v = rng.random(6)
        fit = pava(v)
        assert np.all(np.diff(fit) >= 0)
        best = math.inf
        for cuts in all_subsets(5):
            bounds = [0] + [c + 1 for c in cuts] + [6]
            means = [v[a:b].mean() for a, b in zip(bounds, bounds[1:])]
            if all(x <= y for x, y in zip(means, means[1:])):
                best = min(best, sum(((v[a:b] - m) ** 2).sum() for (a, b), m in zip(zip(bounds, bounds[1:]), means)))
        assert ((fit - v) ** 2).sum() <= best + 1e-12


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=60))
def test_isotonic_properties(pairs):
    s = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    cal = fit_isotonic(s, y)
    assert np.all(np.diff(cal.values) >= 0)
    once = cal.apply(cal.breakpoints)
    assert np.array_equal(once, cal.values)


def test_reliability_examples():
    t = reliability_bins([0.51, 0.52, 0.53], [1, 0, 1])
    assert (t.counts == 0).sum() == 19 and t.counts[10] == 3
    assert reliability_bins([1.0], [1]).counts[-1] == 1
    assert "bin_low" in t.format()
    rng = np.random.default_rng(16)
    s = rng.random(50_000)
    assert expected_calibration_error(s, rng.random(50_000) < s) < 0.05


def test_isotonic_reduces_ece_on_its_fitting_set():
    rng = np.random.default_rng(17)
    for _ in range(20):
        s = rng.random(500)
        y = (rng.random(500) < s ** 2).astype(int)
        cal = fit_isotonic(s, y)
        assert expected_calibration_error(cal.apply(s), y) <= expected_calibration_error(s, y) + 1e-12
