"""KDIGO creatinine phenotyping: reference creatinine, stage timelines, 48-hour outcome labels."""
from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import codes
from .ehr import DAY, HOUR, EncounterTimeline, EventKind, day_index
from .renal import DEFAULT_CONSTANTS, RenalConstants, backcalc_scr

WINDOW_HOURS = 12
HORIZON_HOURS = 48
REFERENCE_LOOKBACK = 7 * DAY
RISE_LOOKBACK = 48 * HOUR

# Float slack on the >= comparisons so 1.1 -> 1.4 counts as a 0.3 mg/dL rise.
TOL = 1e-9


class AkiStage(IntEnum):
    NONE = 0
    STAGE1 = 1
    STAGE2 = 2
    STAGE3 = 3
    STAGE3_RRT = 4


STAGE_LABELS = ("No AKI", "Stage 1", "Stage 2", "Stage 3", "Stage 3 + RRT")


class ReferenceSource(str, Enum):
    MEASURED_PREADMISSION = "MEASURED_PREADMISSION"
    ESTIMATED_BACKCALC = "ESTIMATED_BACKCALC"
    ROLLING_UPDATE = "ROLLING_UPDATE"


@dataclass(frozen=True)
class ReferenceCreatinine:
    value: float
    source: ReferenceSource
    as_of: int

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("reference creatinine must be positive")


@dataclass(frozen=True)
class Breakpoint:
    time: int
    stage: AkiStage
    scr: float | None  # None marks RRT initiation


@dataclass
class StageTimeline:
    encounter_id: str
    admit_time: int
    discharge_time: int
    breakpoints: list[Breakpoint]

    def __post_init__(self):
        self._times = [b.time for b in self.breakpoints]

    @property
    def worst_stage(self) -> AkiStage:
        return max((b.stage for b in self.breakpoints), default=AkiStage.NONE)

    def stage_at(self, t: int) -> AkiStage:
        """Stage carried forward from the last breakpoint at or before ``t``."""
        i = bisect_right(self._times, t)
        return self.breakpoints[i - 1].stage if i else AkiStage.NONE

    def breakpoints_in(self, start: int, stop: int) -> list[Breakpoint]:
        """Breakpoints with ``start < time <= stop``."""
        return self.breakpoints[bisect_right(self._times, start):bisect_right(self._times, stop)]


@dataclass(frozen=True)
class WindowLabel:
    encounter_id: str
    window_index: int
    label: int
    already_severe: int
    censored: int


def _scr_events(tl: EncounterTimeline, preadmission: bool = False):
    return tl.labs(codes.SCR, preadmission=preadmission)


def initial_reference_creatinine(tl: EncounterTimeline, consts: RenalConstants = DEFAULT_CONSTANTS,
                                 day_offset_hours: float = 0.0) -> ReferenceCreatinine:
    """Admission reference creatinine.

    With any creatinine in the 7 days before admission, the reference is the
    minimum of those values and the first in-admission creatinine when that
    one falls on the admission day. Otherwise it is back-calculated from the
    assumed eGFR.
    """
    rec = tl.encounter
    prior = [e.value for e in _scr_events(tl, preadmission=True)
             if e.timestamp >= rec.admit_time - REFERENCE_LOOKBACK]
    if prior:
        adm = _scr_events(tl)
        if adm and day_index(adm[0].timestamp, day_offset_hours) == day_index(rec.admit_time, day_offset_hours):
            prior.append(adm[0].value)
        return ReferenceCreatinine(min(prior), ReferenceSource.MEASURED_PREADMISSION, rec.admit_time)
    value = backcalc_scr(consts.assumed_egfr_for_backcalc, rec.age_years, rec.sex, consts)
    return ReferenceCreatinine(value, ReferenceSource.ESTIMATED_BACKCALC, rec.admit_time)


def rolling_reference(ref: ReferenceCreatinine, scr_history: Iterable, t: int) -> ReferenceCreatinine:
    """Lower the reference to the in-admission minimum over ``[t - 7 days, t]`` when that is smaller."""
    lo = t - REFERENCE_LOOKBACK
    window = [e.value for e in scr_history if lo <= e.timestamp <= t]
    if window and min(window) < ref.value:
        return ReferenceCreatinine(min(window), ReferenceSource.ROLLING_UPDATE, t)
    return ref


def stage_at_measurement(scr: float, t: int, ref: ReferenceCreatinine, scr_48h_lookback: Iterable[float],
                         rrt_active: bool = False) -> AkiStage:
    if not scr > 0:
        raise ValueError(f"serum creatinine must be positive, got {scr}")
    if rrt_active:
        return AkiStage.STAGE3_RRT
    ratio = scr / ref.value
    lookback = [float(v) for v in scr_48h_lookback]
    rise_48h = scr - min(lookback) if lookback else 0.0
    aki = (rise_48h >= 0.3 - TOL) or (scr - ref.value >= 0.3 - TOL) or (ratio >= 1.5 - TOL)
    if not aki:
        return AkiStage.NONE
    if ratio >= 3.0 - TOL or scr >= 4.0 - TOL:
        return AkiStage.STAGE3
    if ratio >= 2.0 - TOL:
        return AkiStage.STAGE2
    return AkiStage.STAGE1


def build_stage_timeline(tl: EncounterTimeline, consts: RenalConstants = DEFAULT_CONSTANTS,
                         day_offset_hours: float = 0.0) -> StageTimeline:
    rec = tl.encounter
    adm_scr = _scr_events(tl)
    if not adm_scr:
        raise ValueError(f"encounter {rec.encounter_id} has no in-admission creatinine")
    all_scr = _scr_events(tl, preadmission=True) + adm_scr
    all_times = [e.timestamp for e in all_scr]
    all_values = [e.value for e in all_scr]
    rrt_start = next((e.timestamp for e in tl.admission_events if e.kind is EventKind.DIALYSIS), None)

    init_ref = initial_reference_creatinine(tl, consts, day_offset_hours)
    points: list[Breakpoint] = []
    for ev in adm_scr:
        t = ev.timestamp
        ref = rolling_reference(init_ref, adm_scr, t)
        lo, hi = bisect_left(all_times, t - RISE_LOOKBACK), bisect_right(all_times, t)
        rrt = rrt_start is not None and t >= rrt_start
        points.append(Breakpoint(t, stage_at_measurement(ev.value, t, ref, all_values[lo:hi], rrt), ev.value))
    if rrt_start is not None:
        points.append(Breakpoint(rrt_start, AkiStage.STAGE3_RRT, None))
        # RRT marker sorts before same-time creatinine so the creatinine breakpoint stays last.
        points.sort(key=lambda b: (b.time, b.scr is not None))
    return StageTimeline(rec.encounter_id, rec.admit_time, rec.discharge_time, points)


def window_ends(admit_time: int, discharge_time: int, step_hours: int = WINDOW_HOURS) -> list[int]:
    """End instants ``admit + step*(k+1)`` of every complete window before discharge."""
    n = (discharge_time - admit_time) // (step_hours * HOUR)
    return [admit_time + step_hours * HOUR * (k + 1) for k in range(int(n))]


def label_windows(st: StageTimeline, discharge_time: int | None = None) -> list[WindowLabel]:
    discharge = st.discharge_time if discharge_time is None else discharge_time
    out = []
    for k, e in enumerate(window_ends(st.admit_time, discharge)):
        stop = min(e + HORIZON_HOURS * HOUR, discharge)
        current = st.stage_at(e)
        future = max((b.stage for b in st.breakpoints_in(e, stop)), default=AkiStage.NONE)
        label = int(stop > e and max(current, future) >= AkiStage.STAGE2)
        censored = int(discharge - e < HORIZON_HOURS * HOUR and not label)
        out.append(WindowLabel(st.encounter_id, k, label, int(current >= AkiStage.STAGE2), censored))
    return out


@dataclass
class TransitionTable:
    counts: np.ndarray  # 5x5 ints, rows = current stage, cols = stage within horizon

    @property
    def probabilities(self) -> np.ndarray:
        """Row-normalised counts; rows with no observations are NaN (undefined)."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sums > 0, self.counts / sums, np.nan)

    def format(self) -> str:
        probs = self.probabilities
        lines = ["Current AKI stage\t" + "\t".join(STAGE_LABELS)]
        for i, name in enumerate(STAGE_LABELS):
            cells = []
            for j in range(5):
                pct = "" if np.isnan(probs[i, j]) else f" ({100 * probs[i, j]:.1f}%)"
                cells.append(f"{self.counts[i, j]}{pct}")
            lines.append(f"{name} (n={int(self.counts[i].sum())})\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(self.format())


def transition_table(timelines: Iterable[StageTimeline], horizon_hours: int = HORIZON_HOURS,
                     step_hours: int = WINDOW_HOURS) -> TransitionTable:
    """Stage at each window end against the worst stage measured within the horizon.

    When no creatinine is measured in ``(t, t + horizon]`` the current stage is
    carried forward, so the column equals the row.
    """
    counts = np.zeros((5, 5), dtype=np.int64)
    for st in timelines:
        for e in window_ends(st.admit_time, st.discharge_time, step_hours):
            stop = min(e + horizon_hours * HOUR, st.discharge_time)
            if stop <= e:
                continue
            row = st.stage_at(e)
            future = st.breakpoints_in(e, stop)
            col = max(b.stage for b in future) if future else row
            counts[row, col] += 1
    return TransitionTable(counts)


def write_labels(labels: Sequence[WindowLabel], path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("#encounter_id\twindow_index\tlabel\talready_severe\tcensored\n")
        for w in labels:
            fh.write(f"{w.encounter_id}\t{w.window_index}\t{w.label}\t{w.already_severe}\t{w.censored}\n")


def read_labels(path: str | Path) -> list[WindowLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            eid, k, lab, sev, cen = line.rstrip("\n").split("\t")
            out.append(WindowLabel(eid, int(k), int(lab), int(sev), int(cen)))
    return out
