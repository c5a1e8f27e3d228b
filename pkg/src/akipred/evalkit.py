"""Discrimination metrics, Youden thresholds, cluster bootstrap CIs, subgroups, isotonic calibration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

AA = "AFRICAN_AMERICAN"
NON_AA = "NON_AFRICAN_AMERICAN"
METRICS = ("auroc", "auprc", "sensitivity", "specificity", "ppv", "npv", "accuracy")


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float | None:
    """Probability a random positive outranks a random negative (ties count 1/2); None if single-class."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float | None:
    """Average precision without interpolation; tied scores keep their input order."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    tp = np.cumsum(ys)
    rank = np.arange(1, ys.size + 1)
    hit = ys == 1
    return math.fsum(tp[hit] / rank[hit]) / n_pos


def youden_threshold(scores, labels) -> float | None:
    """Observed score maximising sensitivity + specificity - 1 (smallest on ties)."""
    s, y = _arrays(scores, labels)
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        return None
    cand = np.unique(s)
    order = np.argsort(s, kind="stable")
    ss, ys = s[order], y[order]
    # counts with score >= c for each candidate c
    lo = np.searchsorted(ss, cand, side="left")
    pos_below = np.concatenate([[0], np.cumsum(ys)])[lo]
    tp = P - pos_below
    tn = lo - pos_below
    # J * P * N in exact integers
    j = tp * N + tn * P - P * N
    return float(cand[int(np.argmax(j))])


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @staticmethod
    def _ratio(a, b):
        return a / b if b else None

    @property
    def sensitivity(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.tp + self.fp + self.fn + self.tn)

    def as_dict(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in ("sensitivity", "specificity", "ppv", "npv", "accuracy")}


def confusion(scores, labels, threshold: float) -> Confusion:
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    return Confusion(tp, fp, fn, y.size - tp - fp - fn)


def confusion_metrics(scores, labels, threshold: float) -> dict[str, float | None]:
    """Sensitivity, specificity, PPV, NPV, accuracy with positive iff score >= threshold."""
    return confusion(scores, labels, threshold).as_dict()


# -- scored rows -------------------------------------------------------------------------------

@dataclass
class ScoredRows:
    """Columnar (encounter, window) predictions with subgroup tags."""

    encounter_id: np.ndarray
    window_index: np.ndarray
    score: np.ndarray
    label: np.ndarray
    eval_mask: np.ndarray
    sex: np.ndarray
    race_group: np.ndarray
    site: np.ndarray

    def __len__(self):
        return len(self.score)

    @classmethod
    def from_predictions(cls, tensors, predictions: Sequence[np.ndarray]) -> "ScoredRows":
        cols = {k: [] for k in ("encounter_id", "window_index", "score", "label", "eval_mask", "sex",
                                "race_group", "site")}
        for t, p in zip(tensors, predictions):
            n = t.n_steps
            cols["encounter_id"].append(np.full(n, t.encounter_id, dtype=object))
            cols["window_index"].append(np.arange(n))
            cols["score"].append(np.asarray(p, dtype=float))
            cols["label"].append(np.asarray(t.labels, dtype=np.int64))
            cols["eval_mask"].append(np.asarray(t.eval_mask, dtype=np.int64))
            cols["sex"].append(np.full(n, t.sex, dtype=object))
            cols["race_group"].append(np.full(n, t.race_group, dtype=object))
            cols["site"].append(np.full(n, t.site, dtype=object))
        return cls(**{k: (np.concatenate(v) if v else np.empty(0)) for k, v in cols.items()})

    def select(self, keep: np.ndarray) -> "ScoredRows":
        return ScoredRows(*(getattr(self, f)[keep] for f in self.__dataclass_fields__))

    def evaluable(self) -> "ScoredRows":
        """Rows that count for metrics: eval_mask set and a defined score."""
        return self.select((self.eval_mask == 1) & ~np.isnan(self.score.astype(float)))


# -- bootstrap ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    low: float | None
    high: float | None
    n_valid: int
    n_undefined: int
    diagnostic: str = ""


def _clusters(groups):
    """Row index order grouped by sorted cluster id, plus start offsets and lengths."""
    ids, inverse = np.unique(np.asarray(groups, dtype=str), return_inverse=True)
    order = np.lexsort((np.arange(len(inverse)), inverse))
    lengths = np.bincount(inverse, minlength=len(ids))
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return order, starts, lengths


def bootstrap_ci(metric: Callable, scores, labels, groups=None, n: int = 500, seed: int = 0,
                 unit: str = "encounter", alpha: float = 0.05) -> BootstrapResult:
    """Percentile CI over ``n`` resamples of whole encounters (or single windows).

    Replicate ``b`` draws from ``default_rng(SeedSequence([seed, b]))`` so the
    stream does not depend on how many replicates run. Encounters are indexed in
    sorted-id order, and windows within one keep their relative order.
    """
    s, y = _arrays(scores, labels)
    if unit == "window" or groups is None:
        order, starts, lengths = np.arange(s.size), np.arange(s.size), np.ones(s.size, dtype=np.int64)
    elif unit == "encounter":
        order, starts, lengths = _clusters(groups)
    else:
        raise ValueError(f"unknown bootstrap unit {unit!r}")
    k = len(starts)
    values, undefined = [], 0
    for b in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        draw = rng.integers(0, k, size=k)
        ln = lengths[draw]
        total = int(ln.sum())
        base = np.repeat(starts[draw] - np.cumsum(ln) + ln, ln)
        idx = order[base + np.arange(total)]
        v = metric(s[idx], y[idx])
        if v is None or (isinstance(v, float) and math.isnan(v)):
            undefined += 1
        else:
            values.append(v)
    if n == 0 or undefined > n / 2:
        return BootstrapResult(None, None, len(values), undefined,
                               f"{undefined}/{n} replicates undefined")
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(float(lo), float(hi), len(values), undefined)


# -- reports -----------------------------------------------------------------------------------

@dataclass
class MetricValue:
    point: float | None
    low: float | None = None
    high: float | None = None

    @property
    def ordered(self) -> bool:
        if self.point is None or self.low is None or self.high is None:
            return True
        return self.low <= self.point <= self.high

    def format(self) -> str:
        if self.point is None:
            return "absent"
        if self.low is None:
            return f"{self.point:.2f}"
        return f"{self.point:.2f} ({self.low:.2f}-{self.high:.2f})"


@dataclass
class MetricReport:
    name: str
    n_rows: int
    n_encounters: int
    n_positive: int
    threshold: float | None
    metrics: dict[str, MetricValue]
    subgroups: dict[str, "MetricReport | None"] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def flags(self) -> list[str]:
        return [f"{self.name}:{m} point outside bootstrap CI" for m, v in self.metrics.items() if not v.ordered]

    def table(self) -> str:
        lines = [f"{self.name}\tN={self.n_rows}\tencounters={self.n_encounters}\tpositives={self.n_positive}"
                 f"\tthreshold={'absent' if self.threshold is None else f'{self.threshold:.6g}'}"]
        lines.append("\t".join(m.upper() for m in METRICS))
        lines.append("\t".join(self.metrics[m].format() if m in self.metrics else "absent" for m in METRICS))
        if self.subgroups:
            lines.append("Subgroup\tN\tAUROC\tAUPRC")
            for g, r in self.subgroups.items():
                if r is None:
                    lines.append(f"{g}\t0\tabsent\tabsent")
                else:
                    lines.append(f"{g}\t{r.n_rows}\t{r.metrics['auroc'].format()}\t{r.metrics['auprc'].format()}")
        for note in self.notes + self.flags():
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"

    def key_values(self, prefix: str | None = None) -> list[str]:
        pre = prefix or self.name

        def fmt(v):
            return "absent" if v is None else repr(float(v))

        out = [f"{pre}.n_rows={self.n_rows}", f"{pre}.n_encounters={self.n_encounters}",
               f"{pre}.n_positive={self.n_positive}", f"{pre}.threshold={fmt(self.threshold)}"]
        for m, v in self.metrics.items():
            out += [f"{pre}.{m}={fmt(v.point)}", f"{pre}.{m}.ci_low={fmt(v.low)}", f"{pre}.{m}.ci_high={fmt(v.high)}"]
        for g, r in self.subgroups.items():
            if r is None:
                out.append(f"{pre}.{g}=absent")
            else:
                out += r.key_values(f"{pre}.{g}")
        return out

    def write(self, directory: str | Path, header: str | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        head = f"# {header}\n" if header else ""
        (d / f"{self.name}.tsv").write_text(head + self.table(), encoding="utf-8")
        (d / f"{self.name}.kv").write_text(head + "\n".join(self.key_values()) + "\n", encoding="utf-8")


def _with_ci(metric, rows: ScoredRows, n_boot, seed, unit):
    point = metric(rows.score, rows.label)
    if point is None or n_boot <= 0:
        return MetricValue(point)
    ci = bootstrap_ci(metric, rows.score, rows.label, rows.encounter_id, n_boot, seed, unit)
    return MetricValue(point, ci.low, ci.high)


def evaluate_rows(rows: ScoredRows, threshold: float | None, name: str = "report", n_boot: int = 500,
                  seed: int = 0, unit: str = "encounter", subgroups: bool = True,
                  discrimination_only: bool = False) -> MetricReport:
    """Metric report on evaluable rows (eval_mask = 1). ``threshold`` comes from another partition."""
    rows = rows.evaluable()
    metrics = {"auroc": _with_ci(auroc, rows, n_boot, seed, unit),
               "auprc": _with_ci(auprc, rows, n_boot, seed, unit)}
    if not discrimination_only:
        for m in ("sensitivity", "specificity", "ppv", "npv", "accuracy"):
            if threshold is None:
                metrics[m] = MetricValue(None)
                continue

            def fn(s, y, m=m):
                return getattr(confusion(s, y, threshold), m)
            metrics[m] = _with_ci(fn, rows, n_boot, seed, unit)
    rep = MetricReport(name, len(rows), len(np.unique(rows.encounter_id.astype(str))), int(rows.label.sum()),
                       threshold, metrics)
    if subgroups:
        rep.subgroups = subgroup_eval(rows, n_boot, seed, unit)
    return rep


SUBGROUPS = {
    "female": lambda r: r.sex == "FEMALE",
    "male": lambda r: r.sex == "MALE",
    "african_american": lambda r: r.race_group == AA,
    "non_african_american": lambda r: r.race_group == NON_AA,
    "female_african_american": lambda r: (r.sex == "FEMALE") & (r.race_group == AA),
    "female_non_african_american": lambda r: (r.sex == "FEMALE") & (r.race_group == NON_AA),
    "male_african_american": lambda r: (r.sex == "MALE") & (r.race_group == AA),
    "male_non_african_american": lambda r: (r.sex == "MALE") & (r.race_group == NON_AA),
}


def subgroup_eval(rows: ScoredRows, n_boot: int = 500, seed: int = 0,
                  unit: str = "encounter") -> dict[str, MetricReport | None]:
    """AUROC/AUPRC per sex and race marginal and per sex x race cell; empty groups are None."""
    rows = rows.evaluable()
    out: dict[str, MetricReport | None] = {}
    for name, pick in SUBGROUPS.items():
        sub = rows.select(np.asarray(pick(rows), dtype=bool))
        if len(sub) == 0:
            out[name] = None
            continue
        out[name] = evaluate_rows(sub, None, name, n_boot, seed, unit, subgroups=False, discrimination_only=True)
    return out


# -- isotonic calibration ----------------------------------------------------------------------

@dataclass
class IsotonicCalibrator:
    """Right-continuous step function: value of the last knot at or below the query."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.breakpoints.size == 0 or self.breakpoints.shape != self.values.shape:
            raise ValueError("calibrator needs matching, nonempty breakpoints and values")
        if np.any(np.diff(self.breakpoints) <= 0) or np.any(np.diff(self.values) < 0):
            raise ValueError("calibrator knots must be increasing with nondecreasing values")

    def apply(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=float)
        i = np.searchsorted(self.breakpoints, s, side="right") - 1
        return self.values[np.clip(i, 0, self.values.size - 1)]

    def to_dict(self) -> dict:
        return {"breakpoints": [float(x) for x in self.breakpoints], "values": [float(x) for x in self.values]}

    @classmethod
    def from_dict(cls, d) -> "IsotonicCalibrator":
        return cls(d["breakpoints"], d["values"])


def pava(values: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit to an ordered sequence."""
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    means, wts, sizes = [], [], []
    for x, wx in zip(v, w):
        means.append(x)
        wts.append(wx)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, n2 = means.pop(), wts.pop(), sizes.pop()
            wsum = wts[-1] + w2
            means[-1] = (means[-1] * wts[-1] + m2 * w2) / wsum
            wts[-1] = wsum
            sizes[-1] += n2
    return np.repeat(means, sizes)


def fit_isotonic(scores, labels) -> IsotonicCalibrator:
    """PAVA over rows sorted by score, with equal-score rows pooled first."""
    s, y = _arrays(scores, labels)
    if s.size < 2:
        raise ValueError("isotonic calibration needs at least two rows")
    knots, inverse = np.unique(s, return_inverse=True)
    counts = np.bincount(inverse).astype(float)
    means = np.bincount(inverse, weights=y.astype(float)) / counts
    return IsotonicCalibrator(knots, pava(means, counts))


# -- reliability -------------------------------------------------------------------------------

@dataclass
class ReliabilityTable:
    edges: np.ndarray
    mean_predicted: np.ndarray  # NaN for empty bins
    observed_rate: np.ndarray
    counts: np.ndarray

    @property
    def ece(self) -> float:
        n = self.counts.sum()
        if n == 0:
            return 0.0
        full = self.counts > 0
        gaps = np.abs(self.mean_predicted[full] - self.observed_rate[full])
        return math.fsum(self.counts[full] * gaps) / n

    def format(self) -> str:
        lines = ["bin_low\tbin_high\tmean_predicted\tobserved_rate\tcount"]
        for i in range(len(self.counts)):
            mp = "" if self.counts[i] == 0 else f"{self.mean_predicted[i]:.6f}"
            ob = "" if self.counts[i] == 0 else f"{self.observed_rate[i]:.6f}"
            lines.append(f"{self.edges[i]:.2f}\t{self.edges[i + 1]:.2f}\t{mp}\t{ob}\t{int(self.counts[i])}")
        return "\n".join(lines) + "\n"


def reliability_bins(scores, labels, bins: int = 20) -> ReliabilityTable:
    """Equal-width bins on [0, 1]; a score of exactly 1 falls in the last bin."""
    s, y = _arrays(scores, labels)
    if s.size == 0:
        raise ValueError("reliability table needs at least one row")
    edges = np.linspace(0.0, 1.0, bins + 1)
    b = np.clip((s * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(b, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mp = np.bincount(b, weights=s, minlength=bins) / counts
        ob = np.bincount(b, weights=y.astype(float), minlength=bins) / counts
    return ReliabilityTable(edges, mp, ob, counts)


def expected_calibration_error(scores, labels, bins: int = 20) -> float:
    return reliability_bins(scores, labels, bins).ece
