"""Binary classification metrics, size-weighted client averaging, seed statistics.

Positive class = 1 (diseased). Sensitivity is diseased-class recall,
specificity is non-diseased-class recall. A metric whose denominator is zero is
reported as 0 and named in ``ClientMetrics.undefined``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InputError

METRICS = ("balanced_accuracy", "sensitivity", "specificity", "f1")
METRIC_LABELS = {
    "balanced_accuracy": "Balanced Acc.",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "f1": "F1",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClientMetrics:
    counts: ConfusionCounts
    sensitivity: float
    specificity: float
    f1: float
    undefined: frozenset = frozenset()

    @property
    def balanced_accuracy(self) -> float:
        return 0.5 * (self.sensitivity + self.specificity)

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def confusion(predictions, labels) -> ConfusionCounts:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise InputError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise InputError("cannot score an empty prediction set")
    for arr, what in ((p, "predictions"), (y, "labels")):
        if not np.isin(arr, (0, 1)).all():
            raise InputError(f"{what} must be binary (0/1)")
    p = p.astype(bool)
    y = y.astype(bool)
    return ConfusionCounts(
        tp=int((p & y).sum()),
        fp=int((p & ~y).sum()),
        tn=int((~p & ~y).sum()),
        fn=int((~p & y).sum()),
    )


def metrics_from_counts(c: ConfusionCounts) -> ClientMetrics:
    values = {
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }
    undefined = frozenset(k for k, v in values.items() if v is None)
    return ClientMetrics(
        counts=c,
        undefined=undefined,
        **{k: (0.0 if v is None else v) for k, v in values.items()},
    )


def compute_metrics(predictions, labels) -> ClientMetrics:
    return metrics_from_counts(confusion(predictions, labels))


def weighted_average(values: Sequence[float], sizes: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(sizes, dtype=np.float64)
    if v.shape != w.shape or v.ndim != 1:
        raise InputError(f"{v.size} values but {w.size} sizes")
    if v.size == 0:
        raise InputError("nothing to average")
    if (w <= 0).any():
        raise InputError("client sizes must be positive")
    return float((w * v).sum() / w.sum())


@dataclass
class MetricsReport:
    """Per-client metrics for one trained scenario and seed, plus test-size weights."""

    per_client: dict[str, ClientMetrics]
    sizes: dict[str, int]
    seed: int | None = None
    scenario: str = ""

    def weighted(self) -> dict[str, float]:
        names = list(self.per_client)
        sizes = [self.sizes[n] for n in names]
        return {
            m: weighted_average([getattr(self.per_client[n], m) for n in names], sizes)
            for m in METRICS
        }

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "weighted": self.weighted(),
            "clients": {
                n: {
                    **cm.as_dict(),
                    "tp": cm.counts.tp,
                    "fp": cm.counts.fp,
                    "tn": cm.counts.tn,
                    "fn": cm.counts.fn,
                    "n": self.sizes[n],
                    "undefined": sorted(cm.undefined),
                }
                for n, cm in self.per_client.items()
            },
        }


# --------------------------------------------------------------------------
# Student t via the regularized incomplete beta function
# --------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-16, max_iter: int = 1000) -> float:
    """Continued fraction for I_x(a, b), modified Lentz."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise InputError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise InputError(f"betainc needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


class TTestResult(NamedTuple):
    t: float
    p: float
    df: int
    degenerate: bool


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` (pairs matched by position, i.e. by seed)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise InputError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, True)
    t = mean * math.sqrt(n) / sd
    return TTestResult(float(t), t_two_sided_p(t, df), df, False)


def significance_stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# --------------------------------------------------------------------------
# seed summaries and tables
# --------------------------------------------------------------------------

@dataclass
class Summary:
    mean: float
    std: float | None  # None with a single seed
    values: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        if self.std is None:
            return f"{self.mean:.3f} ± n/a"
        return f"{self.mean:.3f} ± {self.std:.3f}"


def summarize(values: Iterable[float]) -> Summary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise InputError("no values to summarize")
    std = float(v.std(ddof=1)) if v.size > 1 else None
    return Summary(float(v.mean()), std, v.tolist())


def seed_summary(reports: Sequence[MetricsReport]) -> dict[str, Summary]:
    """Mean and sample std across seeds of every size-weighted metric."""
    weighted = [r.weighted() for r in reports]
    return {m: summarize(w[m] for w in weighted) for m in METRICS}


def compare_to_reference(
    summaries: dict[str, dict[str, Summary]], reference: str
) -> dict[str, dict[str, TTestResult | None]]:
    """Paired t-test of every scenario against ``reference``, per metric."""
    ref = summaries[reference]
    out: dict[str, dict[str, TTestResult | None]] = {}
    for name, summ in summaries.items():
        out[name] = {}
        for m in METRICS:
            a, b = summ[m].values, ref[m].values
            if name == reference or len(a) != len(b) or len(a) < 2:
                out[name][m] = None
            else:
                out[name][m] = paired_t_test(a, b)
    return out


def format_table(
    summaries: dict[str, dict[str, Summary]], reference: str | None = None
) -> str:
    """Aligned scenario x metric table of mean ± std with significance stars vs ``reference``."""
    tests = compare_to_reference(summaries, reference) if reference in summaries else {}
    width = max([len(s) for s in summaries] + [len("Experiment")]) + 2
    head = f"{'Experiment':<{width}}" + "".join(f"{METRIC_LABELS[m]:>20}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for name, summ in summaries.items():
        cells = []
        for m in METRICS:
            res = tests.get(name, {}).get(m)
            stars = significance_stars(res.p if res else None)
            cells.append(f"{str(summ[m]) + stars:>20}")
        lines.append(f"{name:<{width}}" + "".join(cells))
    return "\n".join(lines)


def format_tsv(summaries: dict[str, dict[str, Summary]], reference: str | None = None) -> str:
    tests = compare_to_reference(summaries, reference) if reference in summaries else {}
    cols = ["scenario", "n_seeds"]
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_std", f"{m}_p_vs_ref", f"{m}_stars"]
    lines = ["\t".join(cols)]
    for name, summ in summaries.items():
        row = [name, str(len(summ[METRICS[0]].values))]
        for m in METRICS:
            res = tests.get(name, {}).get(m)
            std = summ[m].std
            row += [
                repr(summ[m].mean),
                "" if std is None else repr(std),
                "" if res is None else repr(res.p),
                significance_stars(res.p if res else None),
            ]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
