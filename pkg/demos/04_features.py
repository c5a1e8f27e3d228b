"""
Features and schema
===================

Raw static and 12-hourly dynamic features, then a schema fitted on the
development partition only: percentile caps, carry-forward and median
imputation, and z-scoring.
"""
import numpy as np

from akipred.ehr import Partition
from akipred.pipeline import build_partitions, prepare_site
from akipred.synth import generate_site, site_a

data = prepare_site(generate_site(site_a(n_encounters=300, seed=4)).store, split_seed=1)
print({p.value: len(data.partition(p)) for p in Partition})

parts = build_partitions([data], [data])
schema = parts.schema
print(f"schema {schema.version_hash}: {len(schema.static_names)} static, {len(schema.dynamic_names)} dynamic")
print("dynamic:", ", ".join(schema.dynamic_names[:12]), "...")

# %%
# Development tensors are centred and scaled; other partitions reuse the
# development statistics, so their means drift slightly from zero.
for name, tensors in (("dev", parts.dev), ("test", parts.test["A"])):
    steps = np.concatenate([t.steps for t in tensors])
    print(f"{name:4s} windows={len(steps):6d}  mean |mu|={np.abs(steps.mean(axis=0)).mean():.3f}"
          f"  mean sd={steps.std(axis=0).mean():.3f}")
