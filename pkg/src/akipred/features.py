"""Static and 12-hour dynamic feature derivation, preprocessing schema, tensor assembly."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import codes
from .ehr import DAY, HOUR, EncounterTimeline, EventKind, Partition, Race, Ethnicity, day_index
from .nephrotox import Registry, accumulated_burden, burden_series, load_registry
from .phenotype import WINDOW_HOURS, StageTimeline, WindowLabel, initial_reference_creatinine
from .renal import DEFAULT_CONSTANTS, RenalConstants, Sex, egfr_ckdepi_2021, kegfr

log = logging.getLogger(__name__)

NUMERIC, BINARY, ONEHOT = "numeric", "binary", "onehot"
STATS = ("count", "mean", "var", "min", "max")
SUBWINDOWS = ("h0_6", "h6_12")
KEGFR_MIN_GAP = 12 * HOUR


class SchemaError(ValueError):
    pass


# -- rule files --------------------------------------------------------------------------------

def _rows(path) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.strip() and not line.startswith("#"):
                out.append([p.strip() for p in line.split("\t")])
    return out


def load_comorbidity_rules(path) -> list[tuple[str, str]]:
    """(flag, diagnosis code prefix) pairs."""
    return [(r[0], r[1]) for r in _rows(path)]


def load_charlson_weights(path) -> dict[str, int]:
    return {r[0]: int(r[1]) for r in _rows(path)}


def load_medication_classes(path) -> dict[str, str]:
    return {r[0]: r[1] for r in _rows(path)}


def data_path(name: str) -> Path:
    return Path(str(resources.files("akipred") / "data" / name))


@dataclass
class RuleSets:
    comorbidity: list[tuple[str, str]]
    charlson: dict[str, int]
    medication_classes: dict[str, str]
    nephrotoxins: Registry

    @classmethod
    def from_paths(cls, comorbidity=None, charlson=None, medication_classes=None, nephrotoxins=None):
        return cls(
            load_comorbidity_rules(comorbidity or data_path("comorbidity_rules.tsv")),
            load_charlson_weights(charlson or data_path("charlson_weights.tsv")),
            load_medication_classes(medication_classes or data_path("medication_classes.tsv")),
            load_registry(nephrotoxins or data_path("nephrotoxins.tsv")),
        )

    @property
    def comorbidity_flags(self) -> list[str]:
        return list(dict.fromkeys(flag for flag, _ in self.comorbidity))

    @property
    def medication_class_names(self) -> list[str]:
        return sorted(set(self.medication_classes.values()))


_DEFAULT_RULES: RuleSets | None = None


def default_rules() -> RuleSets:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = RuleSets.from_paths()
    return _DEFAULT_RULES


def charlson_index(flags: Mapping[str, int | bool], weights: Mapping[str, int]) -> int:
    return int(sum(w for name, w in weights.items() if flags.get(name)))


# -- feature layout ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    insurance_levels: tuple[str, ...] = ("MEDICARE", "MEDICAID", "PRIVATE", "SELF_PAY", "OTHER")
    history_labs: tuple[str, ...] = codes.HISTORY_LABS
    dynamic_labs: tuple[str, ...] = codes.DYNAMIC_LABS
    panel_count_labs: tuple[str, ...] = codes.PANEL_COUNT_LABS
    vitals: tuple[str, ...] = codes.VITALS
    day_offset_hours: float = 0.0

    def static_layout(self, rules: RuleSets) -> list[tuple[str, str]]:
        out = [("age", NUMERIC), ("sex_female", BINARY)]
        out += [(f"race={r.value}", ONEHOT) for r in Race]
        out += [(f"ethnicity={e.value}", ONEHOT) for e in Ethnicity]
        out += [("language", BINARY)]
        out += [(f"insurance={lvl}", ONEHOT) for lvl in self.insurance_levels + ("MISSING",)]
        out += [("admission_source", BINARY)]
        out += [(n, NUMERIC) for n in ("admit_month_sin", "admit_month_cos",
                                       "admit_weekday_sin", "admit_weekday_cos")]
        out += [(f"comorbidity_{f}", BINARY) for f in rules.comorbidity_flags]
        out += [("charlson_index", NUMERIC)]
        out += [(f"medclass_{c}", BINARY) for c in rules.medication_class_names]
        out += [("nephrotoxic_history", BINARY), ("medication_type_count", NUMERIC)]
        out += [(f"pre_{lab}_{s}", NUMERIC) for lab in self.history_labs for s in STATS]
        return out

    def dynamic_layout(self) -> list[tuple[str, str]]:
        out = [("kegfr_mean", NUMERIC)]
        out += [(f"{v}_{w}_{s}", NUMERIC) for v in self.vitals for w in SUBWINDOWS for s in STATS]
        out += [(f"{lab}_mean", NUMERIC) for lab in self.dynamic_labs]
        out += [(f"{lab}_count", NUMERIC) for lab in self.panel_count_labs]
        out += [("nephrotoxic_burden_7d", NUMERIC), ("los_hours", NUMERIC)]
        return out


def _summary(values: Sequence[float]) -> list[float]:
    """count, mean, population variance, min, max; statistics are NaN when empty."""
    n = len(values)
    if n == 0:
        return [0.0, math.nan, math.nan, math.nan, math.nan]
    a = np.asarray(values, dtype=float)
    mean = float(a.mean())
    return [float(n), mean, float(((a - mean) ** 2).mean()), float(a.min()), float(a.max())]


def derive_static(tl: EncounterTimeline, config: FeatureConfig = FeatureConfig(),
                  rules: RuleSets | None = None) -> np.ndarray:
    """Raw static vector in ``config.static_layout`` order; missing numerics are NaN."""
    rules = rules or default_rules()
    rec = tl.encounter
    values: dict[str, float] = {
        "age": float(rec.age_years),
        "sex_female": float(rec.sex is Sex.FEMALE),
        f"race={rec.race.value}": 1.0,
        f"ethnicity={rec.ethnicity.value}": 1.0,
        "language": math.nan if rec.language is None else float(rec.language),
        "admission_source": float(rec.admission_source),
    }
    ins = rec.insurance if rec.insurance in config.insurance_levels else (
        "MISSING" if rec.insurance in ("", "MISSING") else "OTHER")
    values[f"insurance={ins}"] = 1.0
    admit = datetime.fromtimestamp(rec.admit_time - config.day_offset_hours * HOUR, tz=timezone.utc)
    values["admit_month_sin"] = math.sin(2 * math.pi * admit.month / 12)
    values["admit_month_cos"] = math.cos(2 * math.pi * admit.month / 12)
    values["admit_weekday_sin"] = math.sin(2 * math.pi * admit.weekday() / 7)
    values["admit_weekday_cos"] = math.cos(2 * math.pi * admit.weekday() / 7)

    flags = {}
    prefixes = defaultdict(list)
    for flag, prefix in rules.comorbidity:
        prefixes[flag].append(prefix)
    dx = [e.code for e in tl.preadmission_events if e.kind is EventKind.DIAGNOSIS]
    for flag, pre in prefixes.items():
        flags[flag] = any(c.startswith(tuple(pre)) for c in dx)
        values[f"comorbidity_{flag}"] = float(flags[flag])
    values["charlson_index"] = float(charlson_index(flags, rules.charlson))

    meds = {e.code for e in tl.preadmission_events if e.kind is EventKind.MEDICATION}
    classes = {rules.medication_classes[m] for m in meds if m in rules.medication_classes}
    for c in rules.medication_class_names:
        values[f"medclass_{c}"] = float(c in classes)
    values["nephrotoxic_history"] = float(any(m in rules.nephrotoxins for m in meds))
    values["medication_type_count"] = float(len(meds))

    labs = defaultdict(list)
    for e in tl.preadmission_events:
        if e.kind is EventKind.LAB:
            labs[e.code].append(e.value)
    for lab in config.history_labs:
        for s, v in zip(STATS, _summary(labs.get(lab, ()))):
            values[f"pre_{lab}_{s}"] = v

    layout = config.static_layout(rules)
    out = np.zeros(len(layout))
    for i, (name, kind) in enumerate(layout):
        out[i] = values.get(name, 0.0 if kind != NUMERIC else math.nan)
    return out


def kegfr_series(tl: EncounterTimeline, consts: RenalConstants = DEFAULT_CONSTANTS,
                 day_offset_hours: float = 0.0) -> list[tuple[int, float]]:
    """Kinetic eGFR at each creatinine at least 12 h after the previous calculation point.

    The first in-admission creatinine anchors the series with its steady-state eGFR.
    """
    rec = tl.encounter
    scr = tl.labs(codes.SCR)
    if not scr:
        return []
    ref = initial_reference_creatinine(tl, consts, day_offset_hours).value
    ref_egfr = egfr_ckdepi_2021(ref, rec.age_years, rec.sex, consts)
    last = scr[0]
    out = [(last.timestamp, egfr_ckdepi_2021(last.value, rec.age_years, rec.sex, consts))]
    for ev in scr[1:]:
        dt = ev.timestamp - last.timestamp
        if dt >= KEGFR_MIN_GAP:
            out.append((ev.timestamp, kegfr(last.value, ev.value, dt / HOUR, ref, ref_egfr, consts)))
            last = ev
    return out


def _binned_stats(bins: np.ndarray, vals: np.ndarray, n_bins: int) -> np.ndarray:
    """Per-bin count/mean/population variance/min/max, shape (n_bins, 5)."""
    out = np.full((n_bins, 5), np.nan)
    ok = (bins >= 0) & (bins < n_bins)
    bins, vals = bins[ok], vals[ok]
    cnt = np.bincount(bins, minlength=n_bins).astype(float)
    out[:, 0] = cnt
    has = cnt > 0
    if has.any():
        s = np.bincount(bins, weights=vals, minlength=n_bins)
        mean = np.divide(s, cnt, out=np.full(n_bins, np.nan), where=has)
        dev = (vals - mean[bins]) ** 2
        var = np.bincount(bins, weights=dev, minlength=n_bins)
        out[has, 1] = mean[has]
        out[has, 2] = var[has] / cnt[has]
        mn = np.full(n_bins, np.inf)
        mx = np.full(n_bins, -np.inf)
        np.minimum.at(mn, bins, vals)
        np.maximum.at(mx, bins, vals)
        out[has, 3] = mn[has]
        out[has, 4] = mx[has]
    return out


def n_windows(tl: EncounterTimeline, step_hours: int = WINDOW_HOURS) -> int:
    rec = tl.encounter
    return int((rec.discharge_time - rec.admit_time) // (step_hours * HOUR))


def derive_dynamic(tl: EncounterTimeline, config: FeatureConfig = FeatureConfig(),
                   rules: RuleSets | None = None, consts: RenalConstants = DEFAULT_CONSTANTS,
                   kegfr_points: list[tuple[int, float]] | None = None) -> np.ndarray:
    """Raw dynamic features for every complete 12-hour window, shape (n_windows, n_dynamic).

    Only events strictly before a window's end contribute to it. Missing
    statistics are NaN; carry-forward happens later in :func:`apply_schema`.
    """
    rules = rules or default_rules()
    rec = tl.encounter
    T = n_windows(tl)
    layout = config.dynamic_layout()
    col = {name: i for i, (name, _) in enumerate(layout)}
    out = np.full((T, len(layout)), np.nan)
    if T == 0:
        return out

    series = defaultdict(lambda: ([], []))
    for e in tl.admission_events:
        if e.kind in (EventKind.LAB, EventKind.VITAL):
            ts, vs = series[e.code]
            ts.append(e.timestamp)
            vs.append(e.value)

    def arrays(code):
        ts, vs = series.get(code, ((), ()))
        return (np.asarray(ts, dtype=np.int64) - rec.admit_time) / HOUR, np.asarray(vs, dtype=float)

    if kegfr_points is None:
        kegfr_points = kegfr_series(tl, consts, config.day_offset_hours)
    if kegfr_points:
        h = (np.array([t for t, _ in kegfr_points]) - rec.admit_time) / HOUR
        v = np.array([x for _, x in kegfr_points])
        out[:, col["kegfr_mean"]] = _binned_stats(np.floor(h / WINDOW_HOURS).astype(int), v, T)[:, 1]

    for vital in config.vitals:
        h, v = arrays(vital)
        stats = _binned_stats(np.floor(h / 6).astype(int), v, 2 * T)
        for w, sub in enumerate(SUBWINDOWS):
            for j, s in enumerate(STATS):
                out[:, col[f"{vital}_{sub}_{s}"]] = stats[w::2, j]

    panel = set(config.panel_count_labs)
    for lab in dict.fromkeys(config.dynamic_labs + config.panel_count_labs):
        h, v = arrays(lab)
        stats = _binned_stats(np.floor(h / WINDOW_HOURS).astype(int), v, T)
        if lab in config.dynamic_labs:
            out[:, col[f"{lab}_mean"]] = stats[:, 1]
        if lab in panel:
            out[:, col[f"{lab}_count"]] = stats[:, 0]

    meds = [e for e in tl.preadmission_events + tl.admission_events if e.kind is EventKind.MEDICATION]
    med_times = np.array([e.timestamp for e in meds], dtype=np.int64)
    for k in range(T):
        end = rec.admit_time + WINDOW_HOURS * HOUR * (k + 1)
        upto = int(np.searchsorted(med_times, end, side="left"))
        d = day_index(end - 1, config.day_offset_hours)
        first = day_index(end - 1 - 6 * DAY, config.day_offset_hours)
        recent = [e for e in meds[:upto] if day_index(e.timestamp, config.day_offset_hours) >= first]
        bs = burden_series(rec.encounter_id, recent, rules.nephrotoxins, config.day_offset_hours)
        out[k, col["nephrotoxic_burden_7d"]] = accumulated_burden(bs, d)
        out[k, col["los_hours"]] = float(WINDOW_HOURS * (k + 1))
    return out


# -- raw and finalized encounter containers ----------------------------------------------------

@dataclass
class RawEncounter:
    encounter_id: str
    patient_id: str
    static: np.ndarray
    dynamic: np.ndarray
    labels: np.ndarray
    already_severe: np.ndarray
    censored: np.ndarray
    sex: str
    race_group: str
    site: str = ""
    partition: str = ""


@dataclass
class EncounterTensor:
    encounter_id: str
    static_vec: np.ndarray
    steps: np.ndarray
    labels: np.ndarray
    eval_mask: np.ndarray
    sex: str
    race_group: str
    site: str = ""
    patient_id: str = ""
    censored: np.ndarray | None = None
    schema_hash: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.labels)


def race_group(race: Race) -> str:
    return "AFRICAN_AMERICAN" if race is Race.AFRICAN_AMERICAN else "NON_AFRICAN_AMERICAN"


def featurize_encounter(tl: EncounterTimeline, labels: Sequence[WindowLabel], config: FeatureConfig = FeatureConfig(),
                        rules: RuleSets | None = None, consts: RenalConstants = DEFAULT_CONSTANTS,
                        site: str = "", partition: str = "") -> RawEncounter:
    rules = rules or default_rules()
    dyn = derive_dynamic(tl, config, rules, consts)
    if len(labels) != len(dyn):
        raise SchemaError(f"{tl.encounter_id}: {len(labels)} labels for {len(dyn)} windows")
    rec = tl.encounter
    return RawEncounter(
        encounter_id=rec.encounter_id, patient_id=rec.patient_id,
        static=derive_static(tl, config, rules), dynamic=dyn,
        labels=np.array([w.label for w in labels], dtype=np.int8),
        already_severe=np.array([w.already_severe for w in labels], dtype=np.int8),
        censored=np.array([w.censored for w in labels], dtype=np.int8),
        sex=rec.sex.value, race_group=race_group(rec.race), site=site, partition=partition)


# -- schema ------------------------------------------------------------------------------------

@dataclass
class FeatureSchema:
    raw_static: list[str]
    raw_dynamic: list[str]
    static_features: list[tuple[str, str]]
    dynamic_features: list[tuple[str, str]]
    scaling: dict[str, tuple[float, float]]
    caps: dict[str, tuple[float, float]]
    medians: dict[str, float]
    version_hash: str = ""

    def __post_init__(self):
        if not self.version_hash:
            self.version_hash = self.compute_hash()
        self._compile()

    def _payload(self) -> dict:
        return {
            "raw_static": list(self.raw_static), "raw_dynamic": list(self.raw_dynamic),
            "static_features": [list(x) for x in self.static_features],
            "dynamic_features": [list(x) for x in self.dynamic_features],
            "scaling": {k: list(v) for k, v in sorted(self.scaling.items())},
            "caps": {k: list(v) for k, v in sorted(self.caps.items())},
            "medians": dict(sorted(self.medians.items())),
        }

    def compute_hash(self) -> str:
        blob = json.dumps(self._payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def static_names(self) -> list[str]:
        return [n for n, _ in self.static_features]

    @property
    def dynamic_names(self) -> list[str]:
        return [n for n, _ in self.dynamic_features]

    def _compile(self):
        self._static_plan = self._plan(self.raw_static, self.static_features)
        self._dynamic_plan = self._plan(self.raw_dynamic, self.dynamic_features)

    def _plan(self, raw_names, features):
        pos = {n: i for i, n in enumerate(raw_names)}
        idx, lo, hi, med, mean, std, numeric = [], [], [], [], [], [], []
        for name, kind in features:
            if name not in pos:
                raise SchemaError(f"schema feature {name!r} missing from raw layout")
            idx.append(pos[name])
            c = self.caps.get(name, (-np.inf, np.inf))
            lo.append(c[0])
            hi.append(c[1])
            med.append(self.medians.get(name, 0.0))
            m, s = self.scaling.get(name, (0.0, 1.0))
            mean.append(m)
            std.append(s)
            numeric.append(kind == NUMERIC)
        return tuple(np.asarray(a) for a in (idx, lo, hi, med, mean, std)) + (np.asarray(numeric, bool),)

    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        doc = dict(self._payload(), version_hash=self.version_hash)
        if extra:
            doc["provenance"] = dict(extra)
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        schema = cls(doc["raw_static"], doc["raw_dynamic"],
                     [tuple(x) for x in doc["static_features"]], [tuple(x) for x in doc["dynamic_features"]],
                     {k: tuple(v) for k, v in doc["scaling"].items()},
                     {k: tuple(v) for k, v in doc["caps"].items()}, dict(doc["medians"]))
        if schema.version_hash != doc["version_hash"]:
            raise SchemaError("schema file hash does not match its contents")
        return schema


class ImputationState:
    """Last observed (capped) value per dynamic feature within one encounter."""

    def __init__(self, n_features: int):
        self.last = np.full(n_features, np.nan)

    def fill(self, row: np.ndarray, medians: np.ndarray) -> np.ndarray:
        seen = ~np.isnan(row)
        self.last[seen] = row[seen]
        out = np.where(seen, row, self.last)
        return np.where(np.isnan(out), medians, out)


def _cap(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.where(np.isnan(x), np.nan, np.clip(x, lo, hi))


def _finalize_static(raw: np.ndarray, plan) -> np.ndarray:
    idx, lo, hi, med, mean, std, numeric = plan
    x = _cap(raw[idx], lo, hi)
    x = np.where(np.isnan(x), med, x)
    return np.where(numeric, (x - mean) / std, x)


def _finalize_dynamic(raw: np.ndarray, plan, state: ImputationState | None = None) -> np.ndarray:
    idx, lo, hi, med, mean, std, numeric = plan
    x = _cap(raw[:, idx], lo, hi)
    state = state or ImputationState(len(idx))
    out = np.empty_like(x)
    for k in range(len(x)):
        out[k] = state.fill(x[k], med)
    return np.where(numeric, (out - mean) / std, out)


def apply_schema(raw: RawEncounter, schema: FeatureSchema, state: ImputationState | None = None) -> EncounterTensor:
    """Cap, impute (carry forward, then training median) and z-score one encounter."""
    if raw.static.shape[0] != len(schema.raw_static) or raw.dynamic.shape[1] != len(schema.raw_dynamic):
        raise SchemaError(f"{raw.encounter_id}: raw feature layout does not match schema")
    static = _finalize_static(raw.static, schema._static_plan)
    steps = _finalize_dynamic(raw.dynamic, schema._dynamic_plan, state)
    if not (np.isfinite(static).all() and np.isfinite(steps).all()):
        raise SchemaError(f"{raw.encounter_id}: non-finite value after preprocessing")
    return EncounterTensor(raw.encounter_id, static, steps, raw.labels.astype(float),
                           (1 - raw.already_severe).astype(float), raw.sex, raw.race_group, raw.site,
                           raw.patient_id, raw.censored.astype(float), schema.version_hash)


def fit_schema(raws: Sequence[RawEncounter], raw_static: Sequence[str], raw_dynamic: Sequence[str],
               static_kinds: Sequence[str], dynamic_kinds: Sequence[str]) -> FeatureSchema:
    """Fit caps, medians and scaling on development encounters only.

    Features that are constant (or never observed) after imputation are dropped.
    """
    if not raws:
        raise SchemaError("cannot fit a schema on an empty training set")
    for r in raws:
        if r.partition and r.partition != Partition.DEVELOPMENT.value:
            raise SchemaError(f"encounter {r.encounter_id} is in {r.partition}, not DEVELOPMENT")
    S = np.vstack([r.static for r in raws])
    D = np.vstack([r.dynamic for r in raws if len(r.dynamic)]) if any(len(r.dynamic) for r in raws) \
        else np.empty((0, len(raw_dynamic)))

    def stats(mat, names, kinds):
        caps, medians = {}, {}
        for j, (name, kind) in enumerate(zip(names, kinds)):
            col = mat[:, j]
            col = col[~np.isnan(col)]
            if not len(col):
                continue
            if kind == NUMERIC:
                p1, p99 = np.percentile(col, [1, 99])
                caps[name] = (float(p1), float(p99))
                col = np.clip(col, p1, p99)
            medians[name] = float(np.median(col))
        return caps, medians

    s_caps, s_med = stats(S, raw_static, static_kinds)
    d_caps, d_med = stats(D, raw_dynamic, dynamic_kinds)
    caps = {**s_caps, **d_caps}
    medians = {**s_med, **d_med}

    # Impute with every observed feature kept, then drop constants and compute scaling.
    def all_features(names, kinds):
        return [(n, k) for n, k in zip(names, kinds) if n in medians]

    pre = FeatureSchema(list(raw_static), list(raw_dynamic), all_features(raw_static, static_kinds),
                        all_features(raw_dynamic, dynamic_kinds), {}, caps, medians)
    S_imp = np.vstack([_finalize_static(r.static, pre._static_plan) for r in raws])
    D_imp = [_finalize_dynamic(r.dynamic, pre._dynamic_plan) for r in raws if len(r.dynamic)]
    D_imp = np.vstack(D_imp) if D_imp else np.empty((0, len(pre.dynamic_features)))

    scaling = {}

    def keep(mat, features):
        kept = []
        for j, (name, kind) in enumerate(features):
            col = mat[:, j]
            if not len(col) or np.ptp(col) == 0:
                log.warning("event=feature_dropped feature=%s reason=constant", name)
                continue
            if kind == NUMERIC:
                scaling[name] = (float(col.mean()), float(col.std()))
            kept.append((name, kind))
        return kept

    static_features = keep(S_imp, pre.static_features)
    dynamic_features = keep(D_imp, pre.dynamic_features)
    kept_names = {n for n, _ in static_features + dynamic_features}
    return FeatureSchema(list(raw_static), list(raw_dynamic), static_features, dynamic_features, scaling,
                         {k: v for k, v in caps.items() if k in kept_names},
                         {k: v for k, v in medians.items() if k in kept_names})


def fit_schema_for(raws: Sequence[RawEncounter], config: FeatureConfig = FeatureConfig(),
                   rules: RuleSets | None = None) -> FeatureSchema:
    rules = rules or default_rules()
    s_layout = config.static_layout(rules)
    d_layout = config.dynamic_layout()
    return fit_schema(raws, [n for n, _ in s_layout], [n for n, _ in d_layout],
                      [k for _, k in s_layout], [k for _, k in d_layout])


# -- persistence -------------------------------------------------------------------------------

_META_FIELDS = ("encounter_id", "patient_id", "sex", "race_group", "site", "partition")


def save_raw(raws: Sequence[RawEncounter], path: str | Path, provenance: str | None = None) -> None:
    lengths = np.array([len(r.labels) for r in raws], dtype=np.int64)
    n_dyn = raws[0].dynamic.shape[1] if raws else 0
    arrays = {
        "lengths": lengths,
        "static": np.vstack([r.static for r in raws]) if raws else np.empty((0, 0)),
        "dynamic": np.vstack([r.dynamic for r in raws]) if raws and lengths.sum() else np.empty((0, n_dyn)),
        "labels": np.concatenate([r.labels for r in raws]) if raws else np.empty(0, np.int8),
        "already_severe": np.concatenate([r.already_severe for r in raws]) if raws else np.empty(0, np.int8),
        "censored": np.concatenate([r.censored for r in raws]) if raws else np.empty(0, np.int8),
    }
    for f in _META_FIELDS:
        arrays[f] = np.array([getattr(r, f) for r in raws], dtype=str)
    if provenance:
        arrays["provenance"] = np.array([provenance])
    # np.savez stamps the wall clock into each zip entry; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_raw(path: str | Path) -> list[RawEncounter]:
    with np.load(path) as z:
        lengths = z["lengths"]
        offs = np.concatenate([[0], np.cumsum(lengths)])
        out = []
        for i in range(len(lengths)):
            a, b = offs[i], offs[i + 1]
            out.append(RawEncounter(
                encounter_id=str(z["encounter_id"][i]), patient_id=str(z["patient_id"][i]),
                static=z["static"][i].copy(), dynamic=z["dynamic"][a:b].copy(),
                labels=z["labels"][a:b].copy(), already_severe=z["already_severe"][a:b].copy(),
                censored=z["censored"][a:b].copy(), sex=str(z["sex"][i]), race_group=str(z["race_group"][i]),
                site=str(z["site"][i]), partition=str(z["partition"][i])))
    return out


def export_tensors_jsonl(tensors: Iterable[EncounterTensor], schema: FeatureSchema, path: str | Path) -> None:
    """One JSON record per (encounter, window) for inspection."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tensors:
            static = dict(zip(schema.static_names, map(float, t.static_vec)))
            for k in range(t.n_steps):
                rec = {"encounter_id": t.encounter_id, "window_index": k, "label": int(t.labels[k]),
                       "eval_mask": int(t.eval_mask[k]), "static": static,
                       "dynamic": dict(zip(schema.dynamic_names, map(float, t.steps[k])))}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
