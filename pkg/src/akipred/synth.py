"""Two-site synthetic EHR cohorts with a planted, recoverable AKI risk signal.

Each encounter has a latent kidney stage that moves on a 12-hour Markov chain.
The hazard of moving up is multiplied by ``exp(b1 * burden + b2 * (1 - KeGFR / baseline))``,
so nephrotoxin exposure and falling kinetic eGFR both carry signal. Serum
creatinine is drawn inside ratio bands that the KDIGO phenotyper maps back to
the latent stage, which makes the latent worst stage recoverable.

Unmeasured acute illness episodes add a third hazard term. Each site has its
own ordering habits: one lab panel is repeated when the patient is in AKI or
ill, the other is ordered at random. The habits differ between the two default
sites, so a model partly learns practice patterns that do not transfer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import codes
from .ehr import (DAY, HOUR, ClinicalEvent, EncounterRecord, Ethnicity, EventKind, EventStore, Race,
                  day_index, write_encounters, write_events)
from .features import data_path
from .nephrotox import Registry, accumulated_burden, burden_series, load_registry
from .renal import DEFAULT_CONSTANTS, Sex, backcalc_scr, egfr_ckdepi_2021, kegfr

EPOCH_START = 1420070400  # 2015-01-01T00:00:00Z
STAGES = 5
MIN_LOS_DAYS = 2.0
EGFR_CLIP = (20.0, 150.0)
MAX_BASELINE_SCR = 1.9  # keeps the stage-2 creatinine band below the 4.0 mg/dL stage-3 cut
MIN_BASELINE_SCR = 0.3  # caps baseline eGFR at a physiologic value for the age
UNDERPOWERED_N = 100


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class SiteProfile:
    name: str = "A"
    n_encounters: int = 5000
    seed: int = 1
    age_mean: float = 55.0
    age_sd: float = 19.0
    female: float = 0.55
    race: Mapping[str, float] = field(default_factory=lambda: {
        "WHITE": 0.715, "AFRICAN_AMERICAN": 0.22, "OTHER": 0.055, "MISSING": 0.01})
    hispanic: float = 0.04
    insurance: Mapping[str, float] = field(default_factory=lambda: {
        "MEDICARE": 0.35, "MEDICAID": 0.2, "PRIVATE": 0.35, "SELF_PAY": 0.05, "OTHER": 0.05})
    english: float = 0.95
    emergency_admission: float = 0.6
    comorbidity: Mapping[str, float] = field(default_factory=lambda: {
        "hypertension": 0.19, "congestive_heart_failure": 0.15, "myocardial_infarction": 0.1,
        "peripheral_vascular_disease": 0.08, "cerebrovascular_disease": 0.07, "diabetes": 0.28,
        "cancer": 0.26, "metastatic_carcinoma": 0.06, "liver_disease": 0.21, "chronic_pulmonary_disease": 0.2,
        "obesity": 0.15, "depression": 0.15, "chronic_anemia": 0.1, "fluid_electrolyte_disorders": 0.2})
    egfr_median: float = 97.15
    egfr_q25: float = 78.47
    egfr_q75: float = 111.81
    los_median: float = 5.0
    los_q25: float = 3.0
    los_q75: float = 7.0
    # per-12h base intensities: up[s] from stage s to s+1, down[s] from stage s to s-1
    stage_up: tuple[float, float, float, float] = (0.003348, 0.002564, 0.001548, 0.000057)
    stage_down: tuple[float, float, float, float] = (0.0, 0.25, 0.2, 0.15)
    beta_burden: float = 0.15
    beta_kegfr: float = 2.0
    # unmeasured acute illness episodes: onset/resolution per 12 h and their hazard coefficient
    illness_onset: float = 0.03
    illness_resolve: float = 0.3
    beta_illness: float = 3.0
    nephrotoxin_rate: float = 0.35  # mean new nephrotoxin courses per patient-day
    propensity_shape: float = 0.8
    prior_scr_rate: float = 0.6
    history_rate: float = 0.6
    lab_noise: float = 1.0
    vital_noise: float = 1.0
    scr_noise: float = 0.05
    missing_rate: float = 0.05
    lab_scale: Mapping[str, float] = field(default_factory=dict)  # per-lab reporting multiplier
    aki_extra_panel: str = "bmp"
    aki_extra_panel_rate: float = 0.9
    # the other panel, ordered at random regardless of patient state
    routine_panel: str = "cbc_lft"
    routine_panel_rate: float = 0.5
    exclude_eskd: float = 0.02
    exclude_no_early_scr: float = 0.02
    exclude_short_los: float = 0.06
    worst_stage_target: tuple[float, float, float, float, float] = (0.859, 0.103, 0.023, 0.014, 0.001)
    worst_stage_tolerance: float = 0.04

    def __post_init__(self):
        for name in ("stage_up", "stage_down", "worst_stage_target"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_encounters < 0:
            raise ProfileError("n_encounters must be >= 0")
        for label, dist in (("race", self.race), ("insurance", self.insurance)):
            if any(not 0 <= p <= 1 for p in dist.values()) or abs(math.fsum(dist.values()) - 1) > 1e-9:
                raise ProfileError(f"{label} proportions must lie in [0, 1] and sum to 1")
        if any(k not in Race.__members__ for k in self.race):
            raise ProfileError(f"unknown race category in {sorted(self.race)}")
        probs = {"female": self.female, "hispanic": self.hispanic, "english": self.english,
                 "emergency_admission": self.emergency_admission, "prior_scr_rate": self.prior_scr_rate,
                 "history_rate": self.history_rate, "missing_rate": self.missing_rate,
                 "aki_extra_panel_rate": self.aki_extra_panel_rate,
                 "routine_panel_rate": self.routine_panel_rate, "illness_onset": self.illness_onset,
                 "illness_resolve": self.illness_resolve,
                 "exclude_eskd": self.exclude_eskd, "exclude_no_early_scr": self.exclude_no_early_scr,
                 "exclude_short_los": self.exclude_short_los, **{f"comorbidity.{k}": v for k, v in
                                                                 self.comorbidity.items()}}
        for k, p in probs.items():
            if not 0 <= p <= 1:
                raise ProfileError(f"{k} = {p} is not a proportion")
        for key in ("aki_extra_panel", "routine_panel"):
            if getattr(self, key) not in AKI_PANELS:
                raise ProfileError(f"{key} must be bmp, cbc_lft or none, got {getattr(self, key)!r}")
        if self.exclude_eskd + self.exclude_no_early_scr + self.exclude_short_los > 1:
            raise ProfileError("exclusion fractions sum above 1")
        ws = self.worst_stage_target
        if len(ws) != STAGES or abs(math.fsum(ws) - 1) > 1e-6:
            raise ProfileError("worst_stage_target must have five proportions summing to 1")
        if not (self.egfr_q25 < self.egfr_median < self.egfr_q75 and self.los_q25 < self.los_median < self.los_q75):
            raise ProfileError("medians must lie strictly inside their IQRs")
        if self.age_sd <= 0 or self.scr_noise < 0 or self.lab_noise < 0 or self.vital_noise < 0:
            raise ProfileError("scales must be positive")
        if len(self.stage_up) != 4 or len(self.stage_down) != 4 or min(self.stage_up + self.stage_down) < 0:
            raise ProfileError("stage_up/stage_down need four nonnegative intensities")

    @property
    def egfr_sigma(self) -> float:
        return math.log(self.egfr_q75 / self.egfr_q25) / (2 * stats.norm.ppf(0.75))

    @property
    def los_sigma(self) -> float:
        return math.log(self.los_q75 / self.los_q25) / (2 * stats.norm.ppf(0.75))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["race"] = dict(self.race)
        d["insurance"] = dict(self.insurance)
        d["comorbidity"] = dict(self.comorbidity)
        d["lab_scale"] = dict(self.lab_scale)
        return d

    @classmethod
    def from_mapping(cls, values: Mapping, base: "SiteProfile | None" = None) -> "SiteProfile":
        base = base or cls()
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ProfileError(f"unknown profile keys {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return replace(base, **conv)


def site_a(**overrides) -> SiteProfile:
    """Younger cohort with mostly normal kidney function and ~14% AKI."""
    return replace(SiteProfile(), **overrides)


def site_b(**overrides) -> SiteProfile:
    """Older, sicker cohort with lower baseline eGFR, ~36% AKI and shifted signal coefficients."""
    base = SiteProfile(
        name="B", age_mean=71.0, age_sd=14.0, female=0.54,
        race={"WHITE": 0.87, "AFRICAN_AMERICAN": 0.11, "OTHER": 0.012, "MISSING": 0.008},
        hispanic=0.004,
        insurance={"MEDICARE": 0.6, "MEDICAID": 0.1, "PRIVATE": 0.25, "SELF_PAY": 0.02, "OTHER": 0.03},
        comorbidity={"hypertension": 0.32, "congestive_heart_failure": 0.2, "myocardial_infarction": 0.12,
                     "peripheral_vascular_disease": 0.09, "cerebrovascular_disease": 0.08, "diabetes": 0.27,
                     "cancer": 0.15, "metastatic_carcinoma": 0.04, "liver_disease": 0.09,
                     "chronic_pulmonary_disease": 0.25, "obesity": 0.18, "depression": 0.12,
                     "chronic_anemia": 0.15, "fluid_electrolyte_disorders": 0.25},
        egfr_median=77.93, egfr_q25=54.14, egfr_q75=94.90,
        los_median=5.0, los_q25=4.0, los_q75=8.0,
        stage_up=(0.01653, 0.00364, 0.00122, 0.000144), stage_down=(0.0, 0.25, 0.22, 0.15),
        beta_burden=0.15 * 1.2, beta_kegfr=2.0 * 0.8,
        nephrotoxin_rate=0.4, prior_scr_rate=0.75, history_rate=0.75,
        aki_extra_panel="cbc_lft", routine_panel="bmp", routine_panel_rate=0.3,
        lab_scale={codes.BUN: 0.357},
        worst_stage_target=(0.637, 0.280, 0.065, 0.016, 0.002))
    return replace(base, **overrides)


def planted_signal(**overrides) -> SiteProfile:
    """Site A with the outcome driven only by nephrotoxin burden and KeGFR.

    No illness episodes and no state-dependent ordering, so the only learnable
    risk signal is the planted one (plus creatinine-derived labs that follow the stage).
    """
    base = replace(SiteProfile(), name="P", beta_illness=0.0, aki_extra_panel="none", routine_panel="none",
                   stage_up=(0.0078, 0.0113, 0.0092, 0.00008))
    return replace(base, **overrides)


DEFAULT_PROFILES = {"A": site_a, "B": site_b, "P": planted_signal}


@dataclass
class GroundTruth:
    encounter_id: str
    patient_id: str
    site: str
    latent_stages: list[int]
    measurement_hours: list[int]
    worst_stage: int
    baseline_egfr: float
    reference_scr: float
    prior_scr: bool
    mean_daily_burden: float
    beta_burden: float
    beta_kegfr: float
    exclusion: str | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class SyntheticSite:
    profile: SiteProfile
    store: EventStore
    truth: list[GroundTruth]

    def write(self, directory: str | Path, header: str | None = None) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"events": d / f"events_{self.profile.name}.tsv",
                 "encounters": d / f"encounters_{self.profile.name}.tsv",
                 "ground_truth": d / f"ground_truth_{self.profile.name}.jsonl"}
        write_events(self.store, paths["events"], header)
        write_encounters(self.store, paths["encounters"], header)
        with open(paths["ground_truth"], "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            for g in self.truth:
                fh.write(g.to_json() + "\n")
        return paths


def read_ground_truth(path: str | Path) -> list[GroundTruth]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                out.append(GroundTruth(**json.loads(line)))
    return out


# -- per-encounter generation ------------------------------------------------------------------

LAB_MODEL = {
    # code: (mean, sd, shift per latent stage)
    "sodium": (139.0, 3.0, -0.5), "potassium": (4.1, 0.4, 0.25), "co2": (24.5, 2.5, -1.3),
    "chloride": (103.0, 3.5, 0.6), "glucose": (125.0, 35.0, 6.0), "calcium": (9.0, 0.5, -0.15),
    "wbc": (8.5, 3.0, 0.9), "hemoglobin": (11.8, 1.8, -0.35), "hematocrit": (35.5, 5.0, -1.0),
    "platelets": (230.0, 70.0, -8.0), "mpv": (10.2, 1.0, 0.05), "mcv": (90.0, 6.0, 0.2),
    "rdw": (14.3, 1.6, 0.3), "albumin": (3.4, 0.5, -0.15), "bilirubin_total": (0.8, 0.4, 0.08),
    "lactate": (1.5, 0.6, 0.3), "alt": (30.0, 15.0, 2.0), "ast": (32.0, 15.0, 2.0),
    "bilirubin_direct": (0.3, 0.15, 0.03),
}
VITAL_MODEL = {"map": (87.0, 10.0, -3.0), "temperature": (36.9, 0.4, 0.1),
               "resp_rate": (18.0, 3.0, 1.0), "heart_rate": (84.0, 12.0, 4.0)}
BMP = ("sodium", "potassium", "co2", "chloride", "glucose", "calcium", codes.BUN)
CBC = ("wbc", "hemoglobin", "hematocrit", "platelets", "mpv", "mcv", "rdw")
LFT = ("albumin", "bilirubin_total")
# Repeat panel a site orders while a patient has AKI (an institution-specific practice).
AKI_PANELS = {"bmp": BMP, "cbc_lft": CBC + LFT, "none": ()}
OUTPATIENT_MEDS = ("RX101", "RX102", "RX103", "RX104", "RX105", "RX106", "RX107", "RX108", "RX109",
                   "NX006", "NX008", "NX009", "NX017")
ESKD_DIAGNOSIS = "N18.6"


def _choice(rng, dist: Mapping[str, float]) -> str:
    keys = list(dist)
    return keys[int(rng.choice(len(keys), p=np.asarray([dist[k] for k in keys]) / math.fsum(dist.values())))]


def _truncnorm(rng, mean, sd, lo, hi):
    while True:
        v = rng.normal(mean, sd)
        if lo <= v <= hi:
            return v


def _los_hours(rng, profile: SiteProfile, short: bool) -> int:
    if short:
        return int(rng.integers(12, 48))
    while True:
        days = profile.los_median * math.exp(profile.los_sigma * rng.standard_normal())
        if days >= MIN_LOS_DAYS:
            return max(48, int(round(days * 24)))


def _stage0_ratio(rng, x, ref):
    hi = min(0.18, 0.24 / ref)
    return 1.0 + min(x, hi)


STAGE_BANDS = {1: (1.55, 1.95), 2: (2.05, 2.9), 3: (3.1, 4.5), 4: (3.1, 4.5)}
STAGE_CENTERS = {1: 1.72, 2: 2.4, 3: 3.6, 4: 3.6}


def _scr_value(rng, stage, x, ref, noise):
    if stage == 0:
        return ref * _stage0_ratio(rng, x, ref)
    lo, hi = STAGE_BANDS[stage]
    if stage == 2:
        hi = min(hi, 3.94 / ref)
    r = STAGE_CENTERS[stage] * math.exp(noise * rng.standard_normal())
    return ref * min(max(r, lo), hi - 1e-6)


def _generate_encounter(idx: int, profile: SiteProfile, registry: Registry, exclusion: str | None,
                        beta_burden: float, beta_kegfr: float):
    rng = np.random.default_rng(np.random.SeedSequence([profile.seed, idx]))
    site = profile.name
    pid, eid = f"P{site}{idx:06d}", f"E{site}{idx:06d}"
    hist_eid = f"{eid}-H"
    admit = EPOCH_START + int(rng.integers(0, 5 * 365)) * DAY + int(rng.integers(0, 24)) * HOUR
    age = round(_truncnorm(rng, profile.age_mean, profile.age_sd, 18.0, 100.0), 1)
    sex = Sex.FEMALE if rng.random() < profile.female else Sex.MALE
    race = Race(_choice(rng, profile.race))
    eth = Ethnicity.HISPANIC if rng.random() < profile.hispanic else Ethnicity.NON_HISPANIC
    insurance = _choice(rng, profile.insurance)
    language = None if rng.random() < profile.missing_rate else int(rng.random() < profile.english)
    source = int(rng.random() < profile.emergency_admission)
    los = _los_hours(rng, profile, exclusion == "LOS<48h")
    if exclusion == "no-early-SCr":
        los = max(los, 96)
    discharge = admit + los * HOUR
    rec = EncounterRecord(eid, pid, admit, discharge, age, sex, race, eth, source, insurance, language)

    # baseline kidney function
    egfr = float(np.clip(profile.egfr_median * math.exp(profile.egfr_sigma * rng.standard_normal()), *EGFR_CLIP))
    egfr = min(egfr, egfr_ckdepi_2021(MIN_BASELINE_SCR, age, sex))
    base_scr = backcalc_scr(egfr, age, sex)
    if base_scr > MAX_BASELINE_SCR:
        base_scr = MAX_BASELINE_SCR
        egfr = egfr_ckdepi_2021(base_scr, age, sex)
    prior = egfr < DEFAULT_CONSTANTS.assumed_egfr_for_backcalc or rng.random() < profile.prior_scr_rate
    ref = base_scr if prior else backcalc_scr(DEFAULT_CONSTANTS.assumed_egfr_for_backcalc, age, sex)
    ref_egfr = egfr_ckdepi_2021(ref, age, sex)

    ev: list[ClinicalEvent] = []

    def add(ts, kind, code, value=None, enc=eid, unit=None):
        ev.append(ClinicalEvent(pid, enc, int(ts), kind, code, value, unit))

    # history: diagnoses, outpatient meds, lab panels in the prior year
    lab_fx = {k: rng.normal(0.0, 0.5 * sd) for k, (_, sd, _) in LAB_MODEL.items()}
    vit_fx = {k: rng.normal(0.0, 0.5 * sd) for k, (_, sd, _) in VITAL_MODEL.items()}
    flags = {k: rng.random() < p for k, p in profile.comorbidity.items()}
    if egfr < 60:
        flags["chronic_kidney_disease"] = True
    rules = _comorbidity_codes()
    for flag, on in sorted(flags.items()):
        if on and flag in rules:
            add(admit - int(rng.integers(30, 365)) * DAY, EventKind.DIAGNOSIS, rules[flag], enc=hist_eid)
    if exclusion == "ESKD/eGFR<15":
        add(admit - int(rng.integers(30, 365)) * DAY, EventKind.DIAGNOSIS, ESKD_DIAGNOSIS, enc=hist_eid)
    for code in OUTPATIENT_MEDS:
        if rng.random() < 0.12 + 0.05 * (age > 65):
            add(admit - int(rng.integers(8, 365)) * DAY, EventKind.MEDICATION, code, enc=hist_eid)
    bun_base = 14.0 * math.sqrt(90.0 / egfr) * math.exp(0.15 * rng.standard_normal())
    if rng.random() < profile.history_rate:
        for _ in range(int(rng.integers(1, 5))):
            ts = admit - int(rng.integers(8, 365)) * DAY + int(rng.integers(0, 24)) * HOUR
            for lab in codes.HISTORY_LABS:
                if rng.random() < profile.missing_rate:
                    continue
                if lab == codes.SCR:
                    v = base_scr * math.exp(0.05 * rng.standard_normal())
                elif lab == codes.BUN:
                    v = bun_base * math.exp(0.15 * rng.standard_normal())
                else:
                    m, sd, _ = LAB_MODEL[lab]
                    v = m + lab_fx[lab] + sd * profile.lab_noise * rng.standard_normal()
                add(ts, EventKind.LAB, lab, round(max(v, 0.01), 2), enc=hist_eid)
    if prior:
        add(admit - int(rng.integers(1, 7 * 24)) * HOUR, EventKind.LAB, codes.SCR, ref, enc=hist_eid)

    # inpatient nephrotoxin courses (independent of the latent chain)
    drugs = sorted(registry.entries)
    propensity = rng.gamma(profile.propensity_shape, profile.nephrotoxin_rate / profile.propensity_shape)
    n_courses = int(rng.poisson(propensity * los / 24.0))
    meds = []
    for _ in range(n_courses):
        code = drugs[int(rng.integers(len(drugs)))]
        start = int(rng.integers(0, los))
        for j in range(1 + int(rng.poisson(2.0))):
            t = start + 24 * j + int(rng.integers(-2, 3))
            if 0 <= t <= los:
                meds.append((admit + t * HOUR, code))
    meds.sort()
    for ts, code in meds:
        add(ts, EventKind.MEDICATION, code)
    med_events = [ClinicalEvent(pid, eid, ts, EventKind.MEDICATION, c) for ts, c in meds]
    med_times = [ts for ts, _ in meds]

    # latent chain, one step per 12-hour interval with one creatinine per interval
    offsets = []
    k = 0
    while 12 * k + 1 <= los:
        u = int(rng.integers(1, 12))
        if 12 * k + u <= los:
            offsets.append(12 * k + u)
        k += 1
    n_steps = len(offsets)
    draws = rng.random(n_steps)
    noise = rng.standard_normal(n_steps)
    ill_draws = rng.random(n_steps)
    stage, x, ill = 0, 0.0, 0
    stages, values, illness = [], [], []
    scr_pts: list[tuple[int, float]] = []
    for k in range(n_steps):
        t_start = admit + 12 * k * HOUR
        if k > 0:
            upto = int(np.searchsorted(med_times, t_start, side="left"))
            bs = burden_series(eid, med_events[:upto], registry)
            burden = accumulated_burden(bs, day_index(t_start - 1))
            q = 0.0
            if len(scr_pts) >= 2:
                (t0, v0), (t1, v1) = scr_pts[-2], scr_pts[-1]
                q = 1.0 - kegfr(v0, v1, (t1 - t0) / HOUR, ref, ref_egfr) / ref_egfr
                q = min(max(q, -1.0), 1.0)
            ill = int(ill_draws[k] >= profile.illness_resolve) if ill else int(ill_draws[k] < profile.illness_onset)
            mult = math.exp(beta_burden * burden + beta_kegfr * q + profile.beta_illness * ill)
            up = 1.0 - math.exp(-profile.stage_up[stage] * mult) if stage < 4 else 0.0
            down = 1.0 - math.exp(-profile.stage_down[stage]) if 0 < stage < 4 else 0.0
            d = draws[k]
            if d < up:
                stage += 1
            elif d < up + down * (1.0 - up):
                stage -= 1
            x = min(max(0.6 * x + 0.03 * burden / 2.0 + 0.02 * noise[k], 0.0), 0.3) if stage == 0 else x
        stages.append(stage)
        illness.append(ill)
        ts = admit + offsets[k] * HOUR
        v = _scr_value(rng, stage, x, ref, profile.scr_noise)
        if stage == 4 and (k == 0 or stages[k - 1] < 4):
            add(ts, EventKind.DIALYSIS, "rrt")
        scr_pts.append((ts, v))
    early_cut = (day_index(admit) + 2) * DAY
    for ts, v in scr_pts:
        if exclusion == "no-early-SCr" and ts < early_cut:
            continue
        add(ts, EventKind.LAB, codes.SCR, v, unit="mg/dL")

    # daily labs, extra chemistry during AKI, vitals every 4 h
    def stage_at(h):
        i = int(np.searchsorted(offsets, h, side="right")) - 1
        return stages[i] if i >= 0 else 0

    def ill_at(h):
        i = min(int(h // 12), n_steps - 1)
        return illness[i] if i >= 0 else 0

    for day in range(int(los // 24) + 1):
        draw_h = 24 * day + int(rng.integers(4, 9))
        panels = [(draw_h, BMP + CBC + LFT)]
        extra = AKI_PANELS[profile.aki_extra_panel]
        routine = AKI_PANELS[profile.routine_panel]
        # site practice: a repeat panel when the patient is in AKI or acutely ill, plus a routine one
        for ph in (draw_h + 6, draw_h + 12):
            if extra and (stage_at(ph) >= 1 or ill_at(ph)) and rng.random() < profile.aki_extra_panel_rate:
                panels.append((ph, extra))
            if routine and rng.random() < profile.routine_panel_rate:
                panels.append((ph, routine))
        for ph, labs in panels:
            if ph > los:
                continue
            s = stage_at(ph)
            for lab in labs:
                if rng.random() < profile.missing_rate:
                    continue
                if lab == codes.BUN:
                    v = bun_base * (1.0 + 0.55 * s) * math.exp(0.12 * profile.lab_noise * rng.standard_normal())
                else:
                    m, sd, shift = LAB_MODEL[lab]
                    v = m + lab_fx[lab] + shift * s + sd * 0.5 * profile.lab_noise * rng.standard_normal()
                v *= profile.lab_scale.get(lab, 1.0)
                add(admit + ph * HOUR, EventKind.LAB, lab, round(max(v, 0.01), 2))
    for block in range(0, los, 4):
        h = block + int(rng.integers(0, 4))
        if h > los:
            continue
        s = stage_at(h)
        for vital, (m, sd, shift) in VITAL_MODEL.items():
            if rng.random() < profile.missing_rate:
                continue
            v = m + vit_fx[vital] + shift * s + sd * 0.5 * profile.vital_noise * rng.standard_normal()
            add(admit + h * HOUR, EventKind.VITAL, vital, round(v, 1))

    ev.sort(key=lambda e: (e.timestamp, e.kind.value, e.code))
    days = max(los / 24.0, 1e-9)
    bs = burden_series(eid, med_events, registry)
    truth = GroundTruth(eid, pid, site, stages, offsets, max(stages, default=0), egfr, ref, bool(prior),
                        math.fsum(bs.daily.values()) / days, beta_burden, beta_kegfr, exclusion)
    return rec, ev, truth


_RULE_CACHE: dict[str, str] = {}


def _comorbidity_codes() -> dict[str, str]:
    if not _RULE_CACHE:
        from .features import load_comorbidity_rules
        for flag, prefix in load_comorbidity_rules(data_path("comorbidity_rules.tsv")):
            _RULE_CACHE.setdefault(flag, prefix + ".9" if "." not in prefix else prefix)
    return _RULE_CACHE


def planned_exclusions(profile: SiteProfile) -> dict[int, str]:
    """Encounter index -> exclusion reason, with exact counts placed by a seeded permutation."""
    n = profile.n_encounters
    rng = np.random.default_rng(np.random.SeedSequence([profile.seed, n, 7]))
    order = rng.permutation(n)
    out, start = {}, 0
    for reason, frac in (("ESKD/eGFR<15", profile.exclude_eskd), ("no-early-SCr", profile.exclude_no_early_scr),
                         ("LOS<48h", profile.exclude_short_los)):
        cnt = int(round(frac * n))
        for i in order[start:start + cnt]:
            out[int(i)] = reason
        start += cnt
    return out


def generate_site(profile: SiteProfile, indices: Iterable[int] | None = None,
                  registry: Registry | None = None) -> SyntheticSite:
    """Generate a site's events, encounter records and ground truth.

    Encounter ``i`` depends only on ``(profile.seed, i)``, so passing a subset of
    indices reproduces exactly those encounters.
    """
    registry = registry or load_registry(data_path("nephrotoxins.tsv"))
    idx = range(profile.n_encounters) if indices is None else sorted(set(indices))
    excl = planned_exclusions(profile)
    events: dict[str, list[ClinicalEvent]] = {}
    encounters = {}
    truth = []
    for i in idx:
        if not 0 <= i < profile.n_encounters:
            raise ProfileError(f"encounter index {i} outside 0..{profile.n_encounters - 1}")
        rec, ev, gt = _generate_encounter(i, profile, registry, excl.get(i), profile.beta_burden,
                                          profile.beta_kegfr)
        encounters[rec.encounter_id] = rec
        events[rec.patient_id] = ev
        truth.append(gt)
    return SyntheticSite(profile, EventStore(events, encounters, site=profile.name), truth)


# -- marginal validation -----------------------------------------------------------------------

@dataclass(frozen=True)
class MarginalCheck:
    name: str
    target: float
    observed: float
    tolerance: float
    status: str  # PASS, FAIL or UNDERPOWERED

    def format(self) -> str:
        return f"{self.name}\t{self.target:.4f}\t{self.observed:.4f}\t{self.tolerance:.4f}\t{self.status}"


@dataclass
class MarginalReport:
    checks: list[MarginalCheck]

    @property
    def ok(self) -> bool:
        return all(c.status != "FAIL" for c in self.checks)

    def format(self) -> str:
        return "\n".join(["check\ttarget\tobserved\ttolerance\tstatus"] + [c.format() for c in self.checks]) + "\n"


def _age_target(p: SiteProfile) -> tuple[float, float]:
    a, b = (18.0 - p.age_mean) / p.age_sd, (100.0 - p.age_mean) / p.age_sd
    dist = stats.truncnorm(a, b, loc=p.age_mean, scale=p.age_sd)
    return float(dist.mean()), float(dist.std())


def _los_target(p: SiteProfile) -> tuple[float, float]:
    """Median (days) of the LOS lognormal truncated at the minimum stay, and its density there."""
    dist = stats.lognorm(p.los_sigma, scale=p.los_median)
    f_lo = dist.cdf(MIN_LOS_DAYS)
    med = float(dist.ppf(f_lo + 0.5 * (1 - f_lo)))
    return med, float(dist.pdf(med) / (1 - f_lo))


def validate_marginals(site: SyntheticSite, profile: SiteProfile | None = None, z: float = 3.0) -> MarginalReport:
    """Compare demographics, eGFR and LOS medians (within ``z`` SE) and the worst-stage histogram
    (within the profile's absolute tolerance) on non-excluded encounters."""
    profile = profile or site.profile
    kept = [g for g in site.truth if g.exclusion is None]
    n = len(kept)
    if n == 0:
        return MarginalReport([])
    recs = [site.store.encounters[g.encounter_id] for g in kept]
    checks = []

    def add(name, target, observed, se, tol=None):
        tol = z * se if tol is None else tol
        if n < UNDERPOWERED_N:
            status = "UNDERPOWERED"
        else:
            status = "PASS" if abs(observed - target) <= tol else "FAIL"
        checks.append(MarginalCheck(name, target, observed, tol, status))

    def prop(name, p, hits):
        add(name, p, hits / n, math.sqrt(p * (1 - p) / n))

    prop("female", profile.female, sum(r.sex is Sex.FEMALE for r in recs))
    prop("african_american", profile.race.get("AFRICAN_AMERICAN", 0.0),
         sum(r.race is Race.AFRICAN_AMERICAN for r in recs))
    mu, sd = _age_target(profile)
    add("age_mean", mu, float(np.mean([r.age_years for r in recs])), sd / math.sqrt(n))
    m, s = profile.egfr_median, profile.egfr_sigma
    add("egfr_median", m, float(np.median([g.baseline_egfr for g in kept])),
        m * s * math.sqrt(2 * math.pi) / (2 * math.sqrt(n)))
    med, dens = _los_target(profile)
    add("los_median_days", med, float(np.median([r.los_hours / 24 for r in recs])), 1 / (2 * dens * math.sqrt(n)))
    hist = np.bincount([g.worst_stage for g in kept], minlength=STAGES) / n
    for s_, (t, o) in enumerate(zip(profile.worst_stage_target, hist)):
        add(f"worst_stage_{s_}", t, float(o), 0.0, profile.worst_stage_tolerance)
    return MarginalReport(checks)
