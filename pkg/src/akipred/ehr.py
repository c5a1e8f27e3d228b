"""Event data model, tab-separated ingestion, exclusion rules and patient-level splits.

Timestamps are integer seconds since the Unix epoch (UTC). Files carry them
as ISO-8601 strings.
"""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import codes
from .renal import DEFAULT_CONSTANTS, RenalConstants, Sex, egfr_ckdepi_2021

log = logging.getLogger(__name__)

HOUR = 3600
DAY = 86400
PREADMISSION_LOOKBACK = 365 * DAY

EVENT_FIELDS = ("patient_id", "encounter_id", "timestamp", "kind", "code", "value", "unit")
ENCOUNTER_FIELDS = ("encounter_id", "patient_id", "admit_time", "discharge_time", "age_years", "sex",
                    "race", "ethnicity", "admission_source", "insurance", "language")


class EventKind(str, Enum):
    LAB = "LAB"
    VITAL = "VITAL"
    MEDICATION = "MEDICATION"
    DIALYSIS = "DIALYSIS"
    DIAGNOSIS = "DIAGNOSIS"


class Race(str, Enum):
    WHITE = "WHITE"
    AFRICAN_AMERICAN = "AFRICAN_AMERICAN"
    OTHER = "OTHER"
    MISSING = "MISSING"


class Ethnicity(str, Enum):
    HISPANIC = "HISPANIC"
    NON_HISPANIC = "NON_HISPANIC"
    MISSING = "MISSING"


class Partition(str, Enum):
    DEVELOPMENT = "DEVELOPMENT"
    VALIDATION = "VALIDATION"
    CALIBRATION = "CALIBRATION"
    TEST = "TEST"


PARTITION_ORDER = (Partition.DEVELOPMENT, Partition.VALIDATION, Partition.CALIBRATION, Partition.TEST)
DEFAULT_RATIOS = (0.70, 0.10, 0.05, 0.15)


def parse_time(text: str) -> int:
    text = text.strip()
    if not text:
        raise ValueError("empty timestamp")
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_time(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def day_index(ts: int, day_offset_hours: float = 0.0) -> int:
    """Calendar day number of ``ts`` for a site whose day starts ``day_offset_hours`` after UTC midnight."""
    return int((ts - day_offset_hours * HOUR) // DAY)


@dataclass(frozen=True, slots=True)
class ClinicalEvent:
    patient_id: str
    encounter_id: str
    timestamp: int
    kind: EventKind
    code: str
    value: float | None = None
    unit: str | None = None

    def key(self):
        return (self.patient_id, self.timestamp, self.kind, self.code, self.value)


@dataclass(frozen=True)
class EncounterRecord:
    encounter_id: str
    patient_id: str
    admit_time: int
    discharge_time: int
    age_years: float
    sex: Sex
    race: Race = Race.MISSING
    ethnicity: Ethnicity = Ethnicity.MISSING
    admission_source: int = 0
    insurance: str = "MISSING"
    language: int | None = None

    def __post_init__(self):
        if not self.discharge_time > self.admit_time:
            raise ValueError(f"encounter {self.encounter_id}: discharge must follow admission")
        if not self.age_years >= 18:
            raise ValueError(f"encounter {self.encounter_id}: age {self.age_years} < 18")

    @property
    def los_hours(self) -> float:
        return (self.discharge_time - self.admit_time) / HOUR


@dataclass(frozen=True)
class EncounterTimeline:
    encounter: EncounterRecord
    preadmission_events: tuple[ClinicalEvent, ...]
    admission_events: tuple[ClinicalEvent, ...]

    @property
    def encounter_id(self) -> str:
        return self.encounter.encounter_id

    def hours(self, ts: int) -> float:
        return (ts - self.encounter.admit_time) / HOUR

    def labs(self, code: str, preadmission: bool = False) -> list[ClinicalEvent]:
        src = self.preadmission_events if preadmission else self.admission_events
        return [e for e in src if e.kind is EventKind.LAB and e.code == code]


@dataclass
class ParseReport:
    lines: int = 0
    accepted: int = 0
    duplicates: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def reject_count(self) -> int:
        return len(self.rejects)


class EventStore:
    """Events grouped by patient plus encounter records; timelines are built on demand."""

    def __init__(self, events: dict[str, list[ClinicalEvent]] | None = None,
                 encounters: dict[str, EncounterRecord] | None = None,
                 report: ParseReport | None = None, site: str = ""):
        self.events = events or {}
        self.encounters = encounters or {}
        self.report = report or ParseReport()
        self.site = site
        self._timelines: dict[str, EncounterTimeline] = {}

    def __len__(self):
        return len(self.encounters)

    def __eq__(self, other):
        if not isinstance(other, EventStore):
            return NotImplemented
        return self.events == other.events and self.encounters == other.encounters

    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.encounters.values()})

    def encounter_ids(self) -> list[str]:
        return sorted(self.encounters)

    def timeline(self, encounter_id: str) -> EncounterTimeline:
        tl = self._timelines.get(encounter_id)
        if tl is None:
            tl = _build_timeline(self.encounters[encounter_id], self.events.get(
                self.encounters[encounter_id].patient_id, []))
            self._timelines[encounter_id] = tl
        return tl

    def timelines(self) -> Iterator[EncounterTimeline]:
        for eid in self.encounter_ids():
            yield self.timeline(eid)

    def subset(self, encounter_ids: Iterable[str]) -> "EventStore":
        keep = {eid: self.encounters[eid] for eid in encounter_ids}
        patients = {r.patient_id for r in keep.values()}
        store = EventStore({p: ev for p, ev in self.events.items() if p in patients}, keep,
                           self.report, self.site)
        store._timelines = {eid: tl for eid, tl in self._timelines.items() if eid in keep}
        return store

    @classmethod
    def from_timelines(cls, timelines: Iterable[EncounterTimeline], site: str = "") -> "EventStore":
        events: dict[str, list[ClinicalEvent]] = defaultdict(list)
        encounters = {}
        seen = set()
        for tl in timelines:
            encounters[tl.encounter_id] = tl.encounter
            for ev in tl.preadmission_events + tl.admission_events:
                k = ev.key()
                if k not in seen:
                    seen.add(k)
                    events[ev.patient_id].append(ev)
        for evs in events.values():
            evs.sort(key=lambda e: e.timestamp)
        return cls(dict(events), encounters, site=site)


def _build_timeline(rec: EncounterRecord, patient_events: Sequence[ClinicalEvent]) -> EncounterTimeline:
    start = rec.admit_time - PREADMISSION_LOOKBACK
    pre, adm = [], []
    for ev in patient_events:
        if ev.encounter_id == rec.encounter_id:
            if rec.admit_time <= ev.timestamp <= rec.discharge_time:
                adm.append(ev)
        elif start <= ev.timestamp < rec.admit_time:
            pre.append(ev)
    return EncounterTimeline(rec, tuple(pre), tuple(adm))


# -- ingestion ---------------------------------------------------------------------------------

def _parse_event(parts: list[str]) -> ClinicalEvent:
    if len(parts) < 5 or len(parts) > 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}")
    parts = parts + [""] * (7 - len(parts))
    pid, eid, ts, kind, code, value, unit = parts
    if not pid:
        raise ValueError("missing patient_id")
    if not ts.strip():
        raise ValueError("missing timestamp")
    timestamp = parse_time(ts)
    try:
        kind_ = EventKind(kind)
    except ValueError:
        raise ValueError(f"unknown kind {kind!r}") from None
    if not code:
        raise ValueError("missing code")
    val = None
    if value.strip():
        val = float(value)
        if not math.isfinite(val):
            raise ValueError("non-finite value")
    if kind_ in (EventKind.LAB, EventKind.VITAL) and val is None:
        raise ValueError(f"{kind_.value} event without value")
    return ClinicalEvent(pid, eid, timestamp, kind_, code, val, unit or None)


def _parse_encounter(parts: list[str]) -> EncounterRecord:
    if len(parts) != len(ENCOUNTER_FIELDS):
        raise ValueError(f"expected {len(ENCOUNTER_FIELDS)} fields, got {len(parts)}")
    (eid, pid, admit, discharge, age, sex, race, eth, src, ins, lang) = parts
    return EncounterRecord(
        encounter_id=eid, patient_id=pid, admit_time=parse_time(admit),
        discharge_time=parse_time(discharge), age_years=float(age), sex=Sex(sex),
        race=Race(race or "MISSING"), ethnicity=Ethnicity(eth or "MISSING"),
        admission_source=int(src or 0), insurance=ins or "MISSING",
        language=int(lang) if lang else None)


def _records(path: Path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_encounters(path: str | Path, report: ParseReport | None = None) -> dict[str, EncounterRecord]:
    report = report if report is not None else ParseReport()
    out: dict[str, EncounterRecord] = {}
    for lineno, parts in _records(Path(path)):
        try:
            rec = _parse_encounter(parts)
        except ValueError as exc:
            report.rejects.append((lineno, f"encounter: {exc}"))
            continue
        out[rec.encounter_id] = rec
    return out


def ingest_events(path: str | Path, encounters: str | Path | dict[str, EncounterRecord] | None = None,
                  site: str = "") -> EventStore:
    """Read an event file (and optionally an encounter file) into an :class:`EventStore`.

    Malformed lines are skipped and recorded in ``store.report``; exact duplicates
    of (patient, timestamp, kind, code, value) are kept once.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"event file not found: {path}")
    report = ParseReport()
    events: dict[str, list[ClinicalEvent]] = defaultdict(list)
    seen = set()
    for lineno, parts in _records(path):
        report.lines += 1
        try:
            ev = _parse_event(parts)
        except ValueError as exc:
            report.rejects.append((lineno, str(exc)))
            continue
        k = ev.key()
        if k in seen:
            report.duplicates += 1
            continue
        seen.add(k)
        report.accepted += 1
        events[ev.patient_id].append(ev)
    for evs in events.values():
        evs.sort(key=lambda e: e.timestamp)  # stable: ties keep file order
    if isinstance(encounters, (str, Path)):
        encounters = load_encounters(encounters, report)
    if report.rejects:
        log.warning("event=ingest_rejects path=%s count=%d", path, report.reject_count)
    return EventStore(dict(events), dict(encounters or {}), report, site)


def _fmt_value(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_events(store: EventStore, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("#" + "\t".join(EVENT_FIELDS) + "\n")
        for pid in sorted(store.events):
            for e in store.events[pid]:
                fh.write("\t".join((e.patient_id, e.encounter_id, format_time(e.timestamp), e.kind.value,
                                    e.code, _fmt_value(e.value), e.unit or "")) + "\n")


def write_encounters(store: EventStore, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("#" + "\t".join(ENCOUNTER_FIELDS) + "\n")
        for eid in store.encounter_ids():
            r = store.encounters[eid]
            fh.write("\t".join((r.encounter_id, r.patient_id, format_time(r.admit_time),
                                format_time(r.discharge_time), repr(float(r.age_years)), r.sex.value,
                                r.race.value, r.ethnicity.value, str(r.admission_source), r.insurance,
                                "" if r.language is None else str(r.language))) + "\n")


# -- exclusions --------------------------------------------------------------------------------

ESKD_REASON = "ESKD/eGFR<15"
NO_EARLY_SCR_REASON = "no-early-SCr"
SHORT_LOS_REASON = "LOS<48h"
EXCLUSION_REASONS = (ESKD_REASON, NO_EARLY_SCR_REASON, SHORT_LOS_REASON)


@dataclass
class ExclusionReport:
    total: int = 0
    excluded: list[tuple[str, str]] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(reason for _, reason in self.excluded)
        return {r: c.get(r, 0) for r in EXCLUSION_REASONS}

    @property
    def included(self) -> int:
        return self.total - len(self.excluded)

    def write(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            for eid, reason in self.excluded:
                fh.write(f"{eid}\t{reason}\n")
            fh.write(f"# total_encounters={self.total}\n")
            for reason, n in self.counts.items():
                fh.write(f"# excluded[{reason}]={n}\n")
            fh.write(f"# final_cohort={self.included}\n")


def has_eskd_code(tl: EncounterTimeline, eskd_codes: Sequence[str] = codes.ESKD_CODES) -> bool:
    for ev in tl.preadmission_events + tl.admission_events:
        if ev.kind is EventKind.DIAGNOSIS and ev.code.startswith(tuple(eskd_codes)):
            return True
    return False


def exclusion_reason(tl: EncounterTimeline, consts: RenalConstants = DEFAULT_CONSTANTS,
                     eskd_codes: Sequence[str] = codes.ESKD_CODES, day_offset_hours: float = 0.0,
                     min_egfr: float = 15.0, min_los_hours: float = 48.0) -> str | None:
    """First matching exclusion reason for one encounter, or ``None`` if it stays in the cohort."""
    from .phenotype import initial_reference_creatinine

    rec = tl.encounter
    if has_eskd_code(tl, eskd_codes):
        return ESKD_REASON
    ref = initial_reference_creatinine(tl, consts, day_offset_hours)
    if egfr_ckdepi_2021(ref.value, rec.age_years, rec.sex, consts) < min_egfr:
        return ESKD_REASON
    scrs = tl.labs(codes.SCR)
    admit_day = day_index(rec.admit_time, day_offset_hours)
    if not any(day_index(e.timestamp, day_offset_hours) - admit_day <= 1 for e in scrs):
        return NO_EARLY_SCR_REASON
    if rec.los_hours < min_los_hours:
        return SHORT_LOS_REASON
    return None


def apply_exclusions(store: EventStore, consts: RenalConstants = DEFAULT_CONSTANTS,
                     eskd_codes: Sequence[str] = codes.ESKD_CODES,
                     day_offset_hours: float = 0.0) -> tuple[EventStore, ExclusionReport]:
    report = ExclusionReport(total=len(store))
    keep = []
    for tl in store.timelines():
        reason = exclusion_reason(tl, consts, eskd_codes, day_offset_hours)
        if reason is None:
            keep.append(tl.encounter_id)
        else:
            report.excluded.append((tl.encounter_id, reason))
    return store.subset(keep), report


# -- splitting ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortSplit:
    assignment: dict[str, Partition]
    seed: int
    ratios: tuple[float, float, float, float]

    def patients(self, part: Partition | str) -> list[str]:
        part = Partition(part)
        return sorted(p for p, a in self.assignment.items() if a is part)

    def sizes(self) -> dict[Partition, int]:
        c = Counter(self.assignment.values())
        return {p: c.get(p, 0) for p in PARTITION_ORDER}

    def encounters(self, store: EventStore, part: Partition | str) -> list[str]:
        part = Partition(part)
        return [eid for eid in store.encounter_ids()
                if self.assignment.get(store.encounters[eid].patient_id) is part]

    def write(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(f"# seed={self.seed} ratios={','.join(repr(r) for r in self.ratios)}\n")
            for pid in sorted(self.assignment):
                fh.write(f"{pid}\t{self.assignment[pid].value}\n")

    @classmethod
    def read(cls, path: str | Path) -> "CohortSplit":
        assignment, seed, ratios = {}, 0, DEFAULT_RATIOS
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("# seed="):
                    s, r = line[2:].split(" ")
                    seed = int(s.split("=")[1])
                    ratios = tuple(float(x) for x in r.split("=")[1].split(","))
                elif line and not line.startswith("#"):
                    pid, part = line.split("\t")
                    assignment[pid] = Partition(part)
        return cls(assignment, seed, ratios)


def split_cohort(store: EventStore | Iterable[str], ratios: Sequence[float] = DEFAULT_RATIOS,
                 seed: int = 0) -> CohortSplit:
    """Assign whole patients to development/validation/calibration/test partitions.

    Sorted patient ids are shuffled by a seeded generator, then cut at
    ``round(cumulative_ratio * n_patients)``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 4:
        raise ValueError("need four split ratios")
    if any(r < 0 for r in ratios):
        raise ValueError(f"negative split ratio in {ratios}")
    if abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {math.fsum(ratios)}")
    ids = store.patient_ids() if isinstance(store, EventStore) else sorted(set(store))
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    bounds = []
    for i in range(4):
        b = n if i == 3 else int(math.floor(math.fsum(ratios[: i + 1]) * n + 0.5))
        bounds.append(min(max(b, bounds[-1] if bounds else 0), n))
    if n and ratios[0] > 0 and bounds[0] == 0:
        bounds[0] = 1
        bounds[1:] = [max(b, 1) for b in bounds[1:]]
    assignment = {}
    start = 0
    for part, stop in zip(PARTITION_ORDER, bounds):
        for j in order[start:stop]:
            assignment[ids[j]] = part
        start = stop
    return CohortSplit(assignment, seed, ratios)
