"""Nephrotoxin registry, daily nephrotoxic burden and its 7-day accumulation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .ehr import ClinicalEvent, EventKind, day_index

log = logging.getLogger(__name__)

NEW = "NEW"
NXP_WEIGHTS = {1.0: 0.2, 1.5: 0.4, 2.0: 0.6, 2.5: 0.8, 3.0: 1.0}
NEW_WEIGHT = 0.2
EXCLUDED_ROUTES = frozenset({"ophthalmic", "intraocular", "otic", "transdermal", "topical", "inhalation"})
BURDEN_DAYS = 7


class RegistryError(ValueError):
    pass


def weight_from_nxp(score) -> float:
    """Map an NxP score (1.0..3.0 in 0.5 steps, or ``"NEW"``) to a weight in [0.2, 1.0]."""
    if isinstance(score, str):
        if score.strip().upper() == NEW:
            return NEW_WEIGHT
        score = float(score)
    try:
        return NXP_WEIGHTS[float(score)]
    except KeyError:
        raise RegistryError(f"NxP score {score!r} is not one of 1.0, 1.5, 2.0, 2.5, 3.0 or NEW") from None


@dataclass(frozen=True)
class NephrotoxinEntry:
    drug_code: str
    name: str
    nxp_score: float | str
    weight: float
    routes: frozenset[str] = frozenset()

    def __post_init__(self):
        if not 0.2 <= self.weight <= 1.0:
            raise RegistryError(f"{self.drug_code}: weight {self.weight} outside [0.2, 1.0]")


@dataclass
class Registry:
    entries: dict[str, NephrotoxinEntry] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, code):
        return code in self.entries

    def weight(self, code: str) -> float:
        entry = self.entries.get(code)
        return entry.weight if entry else 0.0


def _parse_score(text: str) -> float | str:
    """NxP cell: a score, ``NEW``, or ``+``-joined component scores of a combination product."""
    parts = [p.strip() for p in text.split("+") if p.strip()]
    if not parts:
        raise RegistryError("missing NxP score")
    scores = []
    for p in parts:
        if p.upper() == NEW:
            scores.append(NEW)
            continue
        v = float(p)
        if v < 1.0:
            raise RegistryError(f"NxP score {v} < 1 is not nephrotoxic enough to include")
        scores.append(v)
    numeric = [s for s in scores if s != NEW]
    return max(numeric) if numeric else NEW


def load_registry(path: str | Path) -> Registry:
    """Read ``drug_code, name, nxp_score, weight, routes`` rows.

    Rows whose listed routes are all excluded routes are dropped; a bad row is
    rejected with a warning rather than failing the load.
    """
    reg = Registry()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t") + [""] * 5
            code, name, score_txt, weight_txt, routes_txt = (p.strip() for p in parts[:5])
            try:
                score = _parse_score(score_txt)
                weight = float(weight_txt) if weight_txt else weight_from_nxp(score)
                routes = frozenset(r.strip().lower() for r in routes_txt.split(",") if r.strip())
                entry = NephrotoxinEntry(code, name, score, weight, routes - EXCLUDED_ROUTES)
            except (RegistryError, ValueError) as exc:
                reg.warnings.append(f"line {lineno}: rejected {code!r}: {exc}")
                continue
            if routes and not routes - EXCLUDED_ROUTES:
                reg.warnings.append(f"line {lineno}: dropped {code!r}: only excluded routes {sorted(routes)}")
                continue
            if code in reg.entries:
                reg.warnings.append(f"line {lineno}: duplicate drug code {code!r}, keeping last")
            reg.entries[code] = entry
    if not reg.entries:
        reg.warnings.append(f"registry {path} is empty")
    for w in reg.warnings:
        log.warning("event=registry_warning detail=%r", w)
    return reg


def daily_burden(med_events: Iterable[ClinicalEvent], registry: Registry) -> float:
    """Sum of weights over the distinct registry drugs given on one day."""
    drugs = {e.code for e in med_events if e.kind is EventKind.MEDICATION and e.code in registry}
    return math.fsum(registry.weight(c) for c in drugs)


@dataclass
class BurdenSeries:
    encounter_id: str
    daily_weights: dict[int, tuple[float, ...]]  # day index -> weights of distinct drugs that day

    @property
    def daily(self) -> dict[int, float]:
        return {d: math.fsum(w) for d, w in sorted(self.daily_weights.items())}

    @property
    def accumulated(self) -> dict[int, float]:
        if not self.daily_weights:
            return {}
        first, last = min(self.daily_weights), max(self.daily_weights)
        return {d: accumulated_burden(self, d) for d in range(first, last + BURDEN_DAYS)}


def burden_series(encounter_id: str, med_events: Iterable[ClinicalEvent], registry: Registry,
                  day_offset_hours: float = 0.0) -> BurdenSeries:
    by_day: dict[int, set[str]] = {}
    for e in med_events:
        if e.kind is EventKind.MEDICATION and e.code in registry:
            by_day.setdefault(day_index(e.timestamp, day_offset_hours), set()).add(e.code)
    return BurdenSeries(encounter_id, {d: tuple(registry.weight(c) for c in sorted(codes))
                                       for d, codes in sorted(by_day.items())})


def accumulated_burden(series: BurdenSeries, day: int) -> float:
    """Burden summed over days ``day-6 .. day``; days without nephrotoxins contribute 0."""
    weights = []
    for d in range(day - BURDEN_DAYS + 1, day + 1):
        weights.extend(series.daily_weights.get(d, ()))
    return math.fsum(weights)
