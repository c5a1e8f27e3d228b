"""
Nephrotoxic burden
==================

Daily burden is the sum of NxP-derived weights over the distinct
nephrotoxins given on a day. The accumulated burden sums the last seven
days, counting days without nephrotoxins as zero.
"""
from akipred.ehr import EventKind
from akipred.features import data_path
from akipred.nephrotox import burden_series, load_registry, weight_from_nxp
from akipred.synth import generate_site, site_a

registry = load_registry(data_path("nephrotoxins.tsv"))
print(f"{len(registry)} registry drugs")
for score in (1, 2, 3):
    print(f"  NxP {score} -> weight {weight_from_nxp(score)}")

# %%
# Burden for the encounter with the most nephrotoxin doses.
site = generate_site(site_a(n_encounters=200, seed=3))


def doses(tl):
    return [e for e in tl.admission_events if e.kind is EventKind.MEDICATION and e.code in registry]


tl = max(site.store.timelines(), key=lambda t: len(doses(t)))
series = burden_series(tl.encounter_id, doses(tl), registry)
acc = series.accumulated
first = min(series.daily)
for day, daily in series.daily.items():
    print(f"day {day - first:3d}  daily={daily:.2f}  7-day={acc[day]:.2f}")
