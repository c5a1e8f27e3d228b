import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from akipred.ehr import HOUR, ClinicalEvent, EncounterRecord, EventKind, EventStore, Race
from akipred.renal import Sex

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

T0 = 1_600_000_000 - 1_600_000_000 % 86400  # a UTC midnight


def lab(pid, eid, hour, value, code="creatinine", base=T0):
    return ClinicalEvent(pid, eid, base + int(round(hour * HOUR)), EventKind.LAB, code, float(value), "mg/dL")


def med(pid, eid, hour, code, base=T0):
    return ClinicalEvent(pid, eid, base + int(round(hour * HOUR)), EventKind.MEDICATION, code)


def encounter(eid="E1", pid="P1", los_hours=96, age=60.0, sex=Sex.MALE, race=Race.WHITE, admit=T0, **kw):
    return EncounterRecord(eid, pid, admit, admit + los_hours * HOUR, age, sex, race, **kw)


def store_of(records, events, site=""):
    by_pid = {}
    for ev in sorted(events, key=lambda e: e.timestamp):
        by_pid.setdefault(ev.patient_id, []).append(ev)
    return EventStore(by_pid, {r.encounter_id: r for r in records}, site=site)


def timeline(scr_hours_values, los_hours=96, pre=(), extra=(), **kw):
    """One-encounter timeline: in-admission SCr (hour, value) pairs plus preadmission SCr pairs."""
    rec = encounter(los_hours=los_hours, **kw)
    evs = [lab(rec.patient_id, rec.encounter_id, h, v) for h, v in scr_hours_values]
    evs += [lab(rec.patient_id, "", h, v) for h, v in pre]
    evs += list(extra)
    return store_of([rec], evs).timeline(rec.encounter_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stay(rng, i, rrt_rate=0.1):
    """Randomized encounter on whole hours: SCr random walk with jumps, optional prior SCr and RRT."""
    from akipred.ehr import DAY, ClinicalEvent, EventKind
    pid, eid = f"P{i}", f"E{i}"
    admit = T0 + int(rng.integers(0, 400)) * DAY + int(rng.integers(0, 24)) * HOUR
    los = int(rng.integers(48, 240))
    rec = encounter(eid, pid, los_hours=los, age=float(rng.integers(18, 95)),
                    sex=Sex.FEMALE if rng.random() < 0.5 else Sex.MALE, admit=admit)
    base = float(rng.uniform(0.5, 1.6))
    events, adm, pre = [], [], []
    for _ in range(int(rng.integers(0, 3))):
        h = -int(rng.integers(1, 12 * 24))
        v = round(base * float(rng.uniform(0.8, 1.3)), 2)
        events.append(lab(pid, "", h, v, base=admit))
        pre.append((admit + h * HOUR, v))
    level = base
    h = int(rng.integers(0, 20))
    while h <= los:
        level = max(0.3, level * float(np.exp(rng.normal(0, 0.12))) + (rng.random() < 0.12) * float(rng.uniform(0.3, 2.0))
                    - (rng.random() < 0.1) * 0.4 * level)
        v = round(level, 2)
        events.append(lab(pid, eid, h, v, base=admit))
        adm.append((admit + h * HOUR, v))
        h += int(rng.integers(1, 30))
    rrt = None
    if rng.random() < rrt_rate:
        rrt = admit + int(rng.integers(1, los)) * HOUR
        events.append(ClinicalEvent(pid, eid, rrt, EventKind.DIALYSIS, "rrt"))
    return rec, events, adm, pre, rrt


# acceptance verdicts, printed as one block at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
