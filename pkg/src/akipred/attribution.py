"""Integrated gradients with a zero baseline, population aggregation and top-k rankings."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .features import EncounterTensor
from .model import BASELINE_HISTORY, Checkpoint, forward, input_gradients, sigmoid


class AttributionError(ValueError):
    pass


def midpoints(m: int) -> np.ndarray:
    if m < 1:
        raise AttributionError(f"integration steps must be >= 1, got {m}")
    return (np.arange(1, m + 1) - 0.5) / m


def integrated_gradients_fn(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, m: int = 50) -> np.ndarray:
    """IG of a generic differentiable F with zero baseline.

    ``grad_fn`` maps a stack of inputs (m, *x.shape) to the stack of dF/dx.
    """
    a = midpoints(m)
    x = np.asarray(x, dtype=float)
    grads = grad_fn(a.reshape((-1,) + (1,) * x.ndim) * x[None])
    return x * grads.mean(axis=0)


@dataclass
class AttributionVector:
    encounter_id: str
    window: int
    static: np.ndarray   # (d_static,)
    dynamic: np.ndarray  # (window + 1, d_dyn); steps after the window cannot contribute
    f_x: float
    f_baseline: float
    m: int

    @property
    def total(self) -> float:
        return math.fsum(self.static) + math.fsum(self.dynamic.ravel())

    @property
    def residual(self) -> float:
        return self.total - (self.f_x - self.f_baseline)

    @property
    def relative_residual(self) -> float:
        gap = self.f_x - self.f_baseline
        return abs(self.residual) / abs(gap) if gap else abs(self.residual)


def integrated_gradients(ckpt: Checkpoint, tensor: EncounterTensor, t: int, m: int = 50) -> AttributionVector:
    """Attribute the pre-calibration risk at window ``t`` to static and dynamic inputs."""
    a = midpoints(m)
    if not 0 <= t < tensor.n_steps:
        raise AttributionError(f"window {t} outside 0..{tensor.n_steps - 1}")
    static, steps = tensor.static_vec, tensor.steps[:t + 1]
    if ckpt.kind == "logistic":
        return _ig_logistic(ckpt, tensor, t, a)
    p = ckpt.params
    _, ds, dx = input_gradients(p, a[:, None] * static[None], a[:, None, None] * steps[None], t)
    f_x = float(forward(p, static[None], steps[None])[0][0, t])
    f_0 = float(forward(p, np.zeros((1, static.size)), np.zeros((1,) + steps.shape))[0][0, t])
    return AttributionVector(tensor.encounter_id, t, static * ds.mean(axis=0), steps * dx.mean(axis=0),
                             f_x, f_0, m)


def _ig_logistic(ckpt, tensor, t, a):
    if t < BASELINE_HISTORY - 1:
        raise AttributionError("logistic baseline has no prediction before 48 h of history")
    w, b = ckpt.params["w"], ckpt.params["b"][0]
    d_s = tensor.static_vec.size
    x = np.concatenate([tensor.static_vec, tensor.steps[t - BASELINE_HISTORY + 1:t + 1].ravel()])
    p = sigmoid(a * (x @ w) + b)
    ig = x * w * (p * (1 - p)).mean()
    dyn = np.zeros((t + 1, tensor.steps.shape[1]))
    dyn[t - BASELINE_HISTORY + 1:] = ig[d_s:].reshape(BASELINE_HISTORY, -1)
    return AttributionVector(tensor.encounter_id, t, ig[:d_s], dyn, float(sigmoid(x @ w + b)),
                             float(sigmoid(b)), len(a))


def attribute_population(ckpt: Checkpoint, tensors: Iterable[EncounterTensor], m: int = 50,
                         max_windows: int | None = None) -> list[AttributionVector]:
    """Attributions for every eval-masked window (optionally only the first ``max_windows``)."""
    out = []
    for tensor in tensors:
        first = BASELINE_HISTORY - 1 if ckpt.kind == "logistic" else 0
        for t in range(first, tensor.n_steps):
            if tensor.eval_mask[t] != 1:
                continue
            if max_windows is not None and len(out) >= max_windows:
                return out
            out.append(integrated_gradients(ckpt, tensor, t, m))
    return out


@dataclass
class FeatureRanking:
    entries: list[tuple[str, float]]

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def write(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("rank\tfeature\tmean_abs_attribution\n")
            for i, (name, v) in enumerate(self.entries, 1):
                fh.write(f"{i}\t{name}\t{v!r}\n")


def _ranked(values: dict[str, float]) -> FeatureRanking:
    return FeatureRanking(sorted(values.items(), key=lambda kv: (-kv[1], kv[0])))


def aggregate(vectors: Sequence[AttributionVector], static_names: Sequence[str], dynamic_names: Sequence[str],
              mode: str = "mean_steps") -> FeatureRanking:
    """Mean |attribution| per feature over windows, sorted descending (name order on ties).

    ``mean_steps`` averages a dynamic feature's |attribution| over the steps of
    each window first; ``last_step`` keeps only the window's own step.
    """
    if not vectors:
        return FeatureRanking([])
    if mode not in ("mean_steps", "last_step"):
        raise AttributionError(f"unknown aggregation mode {mode!r}")
    S = np.vstack([np.abs(v.static) for v in vectors])
    if mode == "mean_steps":
        D = np.vstack([np.abs(v.dynamic).mean(axis=0) for v in vectors])
    else:
        D = np.vstack([np.abs(v.dynamic[-1]) for v in vectors])
    values = dict(zip(static_names, S.mean(axis=0).tolist()))
    values.update(zip(dynamic_names, D.mean(axis=0).tolist()))
    return _ranked(values)


def top_k(ranking: FeatureRanking, k: int = 20) -> FeatureRanking:
    if k <= 0:
        raise AttributionError(f"k must be positive, got {k}")
    return FeatureRanking(list(ranking.entries[:k]))


def write_step_attributions(vectors: Sequence[AttributionVector], dynamic_names: Sequence[str],
                            path: str | Path, header: str | None = None) -> None:
    """Unaggregated per-step dynamic attributions, one row per (encounter, window, step, feature)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("encounter_id\twindow\tstep\tfeature\tattribution\n")
        for v in vectors:
            for s, row in enumerate(v.dynamic):
                for name, a in zip(dynamic_names, row):
                    fh.write(f"{v.encounter_id}\t{v.window}\t{s}\t{name}\t{a!r}\n")
