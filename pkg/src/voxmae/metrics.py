"""Classification metrics, multi-seed aggregation, significance tests and the energy ledger."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import InvalidArgument, UndefinedMetric


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidArgument(f"{scores.size} scores vs {labels.size} labels")
    if np.any((labels != 0) & (labels != 1)):
        raise InvalidArgument("labels must be 0/1")
    return scores, labels.astype(bool)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    scores, y = _check_binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)  # midranks give the 1/2 tie credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: precision at each positive, weighted by its recall step.

    Ranking is by descending score, ties broken by ascending original index.
    """
    scores, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)


def _per_class(metric, scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = scores[:, None]
    labels = labels.reshape(scores.shape)
    return [metric(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]


def mean_auroc(scores, labels) -> float:
    """Unweighted mean of per-class AUROC."""
    return float(np.mean(_per_class(auroc, scores, labels)))


@dataclass
class MetricResult:
    name: str
    per_class: list
    mean: float


def evaluate(scores, labels, class_names=None) -> dict:
    """Per-class and mean AUROC / AUPRC."""
    out = {}
    for name, fn in (("AUROC", auroc), ("AUPRC", auprc)):
        values = _per_class(fn, scores, labels)
        out[name] = MetricResult(name, values, float(np.mean(values)))
    return out


# ---------------------------------------------------------------------------
# seeds and significance


@dataclass
class SeedAggregate:
    values: list
    mean: float
    std: float
    se: float
    ci95: float

    @property
    def interval(self):
        return (self.mean - self.ci95, self.mean + self.ci95)


def aggregate_seeds(values) -> SeedAggregate:
    """Mean, sample std (n-1), standard error and 1.96 * SE half-width."""
    values = [float(v) for v in values]
    n = len(values)
    if n < 2:
        raise InvalidArgument("need at least 2 values to aggregate")
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    se = std / math.sqrt(n)
    return SeedAggregate(values, mean, std, se, 1.96 * se)


def _t_sf_two_sided(t, df):
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_test_two_sided(a, b, variant="welch") -> float:
    """Two-sided p-value for a difference in means.

    ``variant`` is ``"welch"`` (default, unequal variances), ``"pooled"``
    or ``"paired"``.  With zero variance the p-value is 1 for equal means
    and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InvalidArgument("each sample needs at least 2 values")
    if variant == "paired":
        if a.size != b.size:
            raise InvalidArgument("paired test needs equal-length samples")
        d = a - b
        sd = d.std(ddof=1)
        if sd == 0:
            return 1.0 if d.mean() == 0 else 0.0
        t = d.mean() / (sd / math.sqrt(d.size))
        return _t_sf_two_sided(t, d.size - 1)
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        return 1.0 if diff == 0 else 0.0
    if variant == "welch":
        sa, sb = va / na, vb / nb
        t = diff / math.sqrt(sa + sb)
        df = (sa + sb) ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
    elif variant == "pooled":
        sp = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        t = diff / math.sqrt(sp * (1 / na + 1 / nb))
        df = na + nb - 2
    else:
        raise InvalidArgument(f"unknown t-test variant {variant!r}")
    return _t_sf_two_sided(t, df)


def bonferroni(p_values, m=None):
    """Multiply by the comparison count ``m`` (default: len(p_values)), clamp to 1."""
    p = [float(x) for x in p_values]
    m = len(p) if m is None else m
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    if any(not 0.0 <= x <= 1.0 for x in p):
        raise InvalidArgument("p-values must lie in [0, 1]")
    return [min(1.0, m * x) for x in p]


@dataclass
class ComparisonResult:
    model_a: str
    model_b: str
    p_raw: float
    p_adjusted: float
    m: int


def compare_models(per_model: dict, variant="welch") -> list:
    """All pairwise tests between models' per-seed values, Bonferroni-adjusted."""
    pairs = list(itertools.combinations(sorted(per_model), 2))
    raw = [t_test_two_sided(per_model[a], per_model[b], variant) for a, b in pairs]
    adjusted = bonferroni(raw) if raw else []
    return [ComparisonResult(a, b, r, q, len(pairs)) for (a, b), r, q in zip(pairs, raw, adjusted)]


# ---------------------------------------------------------------------------
# compute ledger


def energy_ledger(n_devices, watts_per_device, hours_per_epoch, epochs, kg_co2_per_kwh=0.4):
    """Return ``(kWh, kg CO2)`` for a training run."""
    args = (n_devices, watts_per_device, hours_per_epoch, epochs, kg_co2_per_kwh)
    if any(x < 0 for x in args):
        raise InvalidArgument("inputs must be non-negative")
    kwh = n_devices * watts_per_device * hours_per_epoch * epochs / 1000.0
    return kwh, kwh * kg_co2_per_kwh


# ---------------------------------------------------------------------------
# reports

REPORT_SCHEMA = 1


@dataclass
class MetricReport:
    task: str
    model: str
    seeds: list
    per_class: dict  # metric -> list of per-seed per-class lists
    mean: dict  # metric -> per-seed means
    class_names: list = field(default_factory=list)

    def aggregate(self, metric="AUROC"):
        return aggregate_seeds(self.mean[metric])

    def to_json(self, comparisons=()):
        doc = {
            "schema": REPORT_SCHEMA,
            "task": self.task,
            "model": self.model,
            "seeds": list(self.seeds),
            "class_names": list(self.class_names),
            "per_class": self.per_class,
            "mean": self.mean,
            "ci95": {k: asdict(aggregate_seeds(v)) if len(v) >= 2 else None for k, v in self.mean.items()},
            "comparisons": [asdict(c) for c in comparisons],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["task", "model", "seed", "metric", "class", "value"])
        for metric, rows in self.per_class.items():
            for seed, row in zip(self.seeds, rows):
                for name, value in zip(self.class_names or range(len(row)), row):
                    w.writerow([self.task, self.model, seed, metric, name, repr(value)])
        return buf.getvalue()
