"""
Integrated gradients
====================

Per-window attributions for a trained model, with the completeness
residual and a population ranking of features.

The planted-signal profile generates outcomes from nephrotoxic burden and
kinetic eGFR alone, so those features should appear in the top five. Training at the
default size takes a few minutes.
"""
import numpy as np

from akipred.attribution import aggregate, attribute_population, top_k
from akipred.pipeline import build_partitions, fit_model, prepare_site
from akipred.synth import generate_site, planted_signal

data = prepare_site(generate_site(planted_signal(n_encounters=2500, seed=1)).store, split_seed=1)
parts = build_partitions([data], [data])
ckpt = fit_model(parts)

vectors = attribute_population(ckpt, parts.test["P"], 50, 500)
res = np.array([v.relative_residual for v in vectors])
print(f"{len(vectors)} windows, completeness residual median={np.median(res):.2e} max={res.max():.2e}")

# %%
ranking = top_k(aggregate(vectors, parts.schema.static_names, parts.schema.dynamic_names), 10)
for i, (name, value) in enumerate(ranking.entries, 1):
    print(f"{i:2d}  {name:32s} {value:.4f}")
