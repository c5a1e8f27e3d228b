"""
Renal calculators
=================

The 2021 race-free CKD-EPI equation, its inverse, and kinetic eGFR.

eGFR falls as creatinine rises, so the back-calculation that imputes a
baseline creatinine from an assumed eGFR of 75 is a plain bisection.
Kinetic eGFR tracks a rising creatinine before it reaches steady state.
"""
from akipred.renal import backcalc_scr, egfr_ckdepi_2021, kegfr

# %%
# eGFR across creatinine for a 60-year-old of each sex.
for scr in (0.6, 0.9, 1.2, 2.0, 4.0):
    f = egfr_ckdepi_2021(scr, 60, "female")
    m = egfr_ckdepi_2021(scr, 60, "male")
    print(f"scr={scr:.1f}  female={f:6.1f}  male={m:6.1f}")

# %%
# Baseline creatinine implied by eGFR 75, the imputation used when no
# preadmission value exists.
for age in (30, 55, 80):
    scr = backcalc_scr(75.0, age, "male")
    print(f"age={age}  scr={scr:.4f}  round trip={egfr_ckdepi_2021(scr, age, 'male'):.10f}")

# %%
# A creatinine rising from 1.0 to 1.6 mg/dL over 24 h. At steady state
# KeGFR equals the reference eGFR; during the rise it drops well below the
# static estimate at the new value.
ref_scr, ref_egfr = 1.0, egfr_ckdepi_2021(1.0, 60, "male")
print("steady state:", kegfr(1.0, 1.0, 24, ref_scr, ref_egfr), "vs", ref_egfr)
print("rising:      ", round(kegfr(1.0, 1.6, 24, ref_scr, ref_egfr), 2),
      "vs static", round(egfr_ckdepi_2021(1.6, 60, "male"), 2))
