"""Renal calculators: race-free CKD-EPI 2021 creatinine eGFR, its inverse, and kinetic eGFR.

Coefficients (Inker et al., NEJM 2021)::

    eGFR = 142 * min(Scr/k, 1)**a * max(Scr/k, 1)**-1.200 * 0.9938**age * 1.012 [female]

with k = 0.7 (F) / 0.9 (M) and a = -0.241 (F) / -0.302 (M).
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import Mapping


class Sex(str, Enum):
    FEMALE = "FEMALE"
    MALE = "MALE"


class RenalDomainError(ValueError):
    """Input outside the domain of a renal equation."""


@dataclass(frozen=True)
class RenalConstants:
    kappa_female: float = 0.7
    kappa_male: float = 0.9
    alpha_female: float = -0.241
    alpha_male: float = -0.302
    high_exponent: float = -1.200
    age_base: float = 0.9938
    sex_multiplier_female: float = 1.012
    scale: float = 142.0
    max_daily_delta_scr: float = 1.5
    assumed_egfr_for_backcalc: float = 75.0

    def __post_init__(self):
        for name in ("kappa_female", "kappa_male", "age_base", "sex_multiplier_female",
                     "scale", "max_daily_delta_scr", "assumed_egfr_for_backcalc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha_female", "alpha_male", "high_exponent"):
            if not getattr(self, name) < 0:
                raise ValueError(f"{name} must be negative")

    @classmethod
    def from_mapping(cls, values: Mapping[str, float]) -> "RenalConstants":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown renal constants: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


DEFAULT_CONSTANTS = RenalConstants()

BACKCALC_BRACKET = (0.1, 20.0)
BACKCALC_ITERATIONS = 80


def _sex(sex) -> Sex:
    return sex if isinstance(sex, Sex) else Sex(str(sex).upper())


def egfr_ckdepi_2021(scr: float, age: float, sex, consts: RenalConstants = DEFAULT_CONSTANTS) -> float:
    """eGFR in mL/min/1.73m2 from serum creatinine (mg/dL), age (years) and sex."""
    if not scr > 0:
        raise RenalDomainError(f"serum creatinine must be positive, got {scr}")
    if not age > 0:
        raise RenalDomainError(f"age must be positive, got {age}")
    female = _sex(sex) is Sex.FEMALE
    kappa = consts.kappa_female if female else consts.kappa_male
    alpha = consts.alpha_female if female else consts.alpha_male
    ratio = scr / kappa
    egfr = (consts.scale
            * min(ratio, 1.0) ** alpha
            * max(ratio, 1.0) ** consts.high_exponent
            * consts.age_base ** age)
    if female:
        egfr *= consts.sex_multiplier_female
    return egfr


def backcalc_scr(target_egfr: float, age: float, sex, consts: RenalConstants = DEFAULT_CONSTANTS) -> float:
    """Serum creatinine that yields ``target_egfr`` under the 2021 equation.

    Bisection over [0.1, 20] mg/dL; eGFR is strictly decreasing in creatinine
    so the bracket either contains exactly one root or the target is unreachable.
    """
    if not target_egfr > 0:
        raise RenalDomainError(f"target eGFR must be positive, got {target_egfr}")
    lo, hi = BACKCALC_BRACKET
    g_lo = egfr_ckdepi_2021(lo, age, sex, consts)
    g_hi = egfr_ckdepi_2021(hi, age, sex, consts)
    if not g_hi <= target_egfr <= g_lo:
        raise RenalDomainError(
            f"eGFR {target_egfr} not achievable for creatinine in [{lo}, {hi}] "
            f"(range {g_hi:.4g}..{g_lo:.4g})")
    for _ in range(BACKCALC_ITERATIONS):
        mid = 0.5 * (lo + hi)
        if egfr_ckdepi_2021(mid, age, sex, consts) > target_egfr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def kegfr(scr_prev: float, scr_curr: float, dt_hours: float, ref_scr: float, ref_egfr: float,
          consts: RenalConstants = DEFAULT_CONSTANTS) -> float:
    """Kinetic eGFR between two creatinine measurements ``dt_hours`` apart.

    ref_egfr * ref_scr / mean(scr) * (1 - 24 * dScr / (dt * max_daily_delta)), floored at 0.
    Callers only invoke this for measurements at least 12 h apart.
    """
    for name, v in (("scr_prev", scr_prev), ("scr_curr", scr_curr), ("ref_scr", ref_scr),
                    ("ref_egfr", ref_egfr), ("dt_hours", dt_hours)):
        if not v > 0:
            raise RenalDomainError(f"{name} must be positive, got {v}")
    mean_scr = 0.5 * (scr_prev + scr_curr)
    rise_term = 24.0 * (scr_curr - scr_prev) / (dt_hours * consts.max_daily_delta_scr)
    value = ref_egfr * (ref_scr / mean_scr) * (1.0 - rise_term)  # ratio first: exact at steady state
    return max(value, 0.0)
