import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from akipred.ehr import DAY, ClinicalEvent, EventKind
from akipred.nephrotox import (NephrotoxinEntry, Registry, RegistryError, accumulated_burden, burden_series,
                               daily_burden, load_registry, weight_from_nxp)
from akipred.features import data_path
from conftest import T0, med
from oracles import sliding_burden


def _registry(**weights):
    return Registry({c: NephrotoxinEntry(c, c, 1.0, w) for c, w in weights.items()})


def test_weight_mapping():
    assert weight_from_nxp(1.0) == 0.2 and weight_from_nxp(3.0) == 1.0
    assert weight_from_nxp("NEW") == 0.2 and weight_from_nxp(2.0) == 0.6
    with pytest.raises(RegistryError):
        weight_from_nxp(0.5)


def test_registry_file_rules(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("C1\tcombo\t1.0+2.5\t\tintravenous\n"
                 "C2\teye drops\t2.0\t\tophthalmic\n"
                 "C3\tbad weight\t2.0\t1.5\toral\n"
                 "C4\tfirst\t1.0\t\toral\n"
                 "C4\tsecond\t3.0\t\toral\n"
                 "C5\tnew drug\tNEW\t\toral\n")
    reg = load_registry(p)
    assert reg.weight("C1") == 0.8
    assert "C2" not in reg and "C3" not in reg
    assert reg.entries["C4"].name == "second" and reg.weight("C4") == 1.0
    assert reg.weight("C5") == 0.2
    assert len(reg.warnings) == 3


def test_empty_registry_warns(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("")
    reg = load_registry(p)
    assert len(reg) == 0 and reg.warnings


def test_shipped_registry_loads():
    reg = load_registry(data_path("nephrotoxins.tsv"))
    assert len(reg) >= 15
    assert all(0.2 <= e.weight <= 1.0 for e in reg.entries.values())


def test_daily_examples():
    reg = _registry(A=0.2, B=1.0)
    assert daily_burden([med("P", "E", 1, "A"), med("P", "E", 2, "B"), med("P", "E", 3, "B")], reg) == 1.2
    assert daily_burden([med("P", "E", 1, "RX1")], reg) == 0.0
    five = _registry(**{f"D{i}": 0.2 for i in range(5)})
    assert daily_burden([med("P", "E", i, f"D{i}") for i in range(5)], five) == 1.0


def test_accumulated_examples():
    reg = _registry(A=0.2, B=1.0)
    s = burden_series("E", [med("P", "E", 24 * d + 8, "A") for d in range(10)], reg)
    d0 = T0 // DAY
    assert accumulated_burden(s, d0 + 9) == pytest.approx(1.4, abs=1e-12)
    s = burden_series("E", [med("P", "E", 8, "B")], reg)
    assert [accumulated_burden(s, d0 + k) for k in range(8)] == [1.0] * 7 + [0.0]


def test_preadmission_days_count():
    reg = _registry(B=1.0)
    s = burden_series("E", [med("P", "", -30, "B"), med("P", "E", 5, "B")], reg)
    assert accumulated_burden(s, T0 // DAY) == 2.0


def _random_pattern(rng, days, codes):
    evs, truth = [], {}
    for d in range(days):
        given_today = rng.choice(len(codes), size=int(rng.integers(0, 5)), replace=True)
        for j in given_today:
            evs.append(med("P", "E", 24 * d + int(rng.integers(0, 24)), codes[j]))
        truth[T0 // DAY + d] = sorted(set(codes[j] for j in given_today))
    return evs, truth


def test_sliding_window_oracle_60_day_patterns():
    rng = np.random.default_rng(3)
    weights = {f"D{i}": float(rng.choice([0.2, 0.4, 0.6, 0.8, 1.0])) for i in range(12)}
    reg = _registry(**weights)
    codes = list(weights) + ["RX1", "RX2"]
    for _ in range(200):
        evs, truth = _random_pattern(rng, 60, codes)
        s = burden_series("E", evs, reg)
        daily = {d: [weights[c] for c in cs if c in weights] for d, cs in truth.items()}
        for d in range(T0 // DAY - 2, T0 // DAY + 68):
            assert accumulated_burden(s, d) == sliding_burden(daily, d)


@given(st.lists(st.tuples(st.integers(0, 23), st.sampled_from(["A", "B", "C", "RX"])), max_size=12),
       st.randoms(use_true_random=False))
def test_permutation_invariance(items, rnd):
    reg = _registry(A=0.2, B=0.6, C=1.0)
    evs = [med("P", "E", h, c) for h, c in items]
    shuffled = list(evs)
    rnd.shuffle(shuffled)
    assert daily_burden(evs, reg) == daily_burden(shuffled, reg)


@given(st.lists(st.tuples(st.integers(0, 40), st.sampled_from(["A", "B", "C"])), max_size=40),
       st.integers(-3, 45))
def test_increment_identity_and_range(items, day):
    reg = _registry(A=0.2, B=0.6, C=1.0)
    s = burden_series("E", [med("P", "E", 24 * d + 6, c) for d, c in items], reg)
    d = T0 // DAY + day
    daily = s.daily
    inc = accumulated_burden(s, d + 1) - accumulated_burden(s, d)
    assert math.isclose(inc, daily.get(d + 1, 0.0) - daily.get(d - 6, 0.0), abs_tol=1e-12)
    acc = accumulated_burden(s, d)
    assert acc >= 0
    n = sum(len(s.daily_weights.get(k, ())) for k in range(d - 6, d + 1))
    assert 0.2 * n - 1e-12 <= acc <= 1.0 * n + 1e-12


def test_non_medication_events_ignored():
    reg = _registry(A=1.0)
    lab_like = ClinicalEvent("P", "E", T0, EventKind.LAB, "A", 1.0)
    assert daily_burden([lab_like], reg) == 0.0
