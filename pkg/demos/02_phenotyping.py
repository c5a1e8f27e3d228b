"""
AKI phenotyping
===============

Stage timelines, 12-hourly window labels and the stage transition table
for a small synthetic site.

Each window end gets label 1 when Stage 2 or worse holds at any instant of
the next 48 hours. Windows already at Stage 2+ are kept in the data but
excluded from evaluation.
"""
import numpy as np

from akipred.ehr import apply_exclusions
from akipred.phenotype import build_stage_timeline, label_windows, transition_table
from akipred.synth import generate_site, site_b

site = generate_site(site_b(n_encounters=400, seed=7))
kept, report = apply_exclusions(site.store)
print("excluded:", report.counts, "kept:", report.included)

# %%
# One encounter that reaches Stage 2 or worse.
stages = [build_stage_timeline(tl) for tl in kept.timelines()]
st = next(s for s in stages if s.worst_stage >= 2)
admit = st.admit_time
for b in st.breakpoints:
    print(f"  +{(b.time - admit) / 3600:6.1f} h  stage {int(b.stage)}  scr={b.scr}")
labels = label_windows(st)
print("labels:        ", "".join(str(w.label) for w in labels))
print("already severe:", "".join(str(w.already_severe) for w in labels))

# %%
# Worst-stage distribution and the 48-hour transition table.
worst = np.bincount([int(s.worst_stage) for s in stages], minlength=5)
print("worst stage fractions:", np.round(worst / worst.sum(), 3))
print(transition_table(stages).format())
