"""Rule evaluation into packed coverage masks, and the metrics built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .data import Dataset, FeatureStats
from .errors import (
    EmptyChecklist,
    InsufficientFolds,
    LengthMismatch,
    SingleClass,
    UnknownFeature,
    UnusableStats,
)
from .grammar import (
    BinaryTrue,
    CategoricalIn,
    CountPresent,
    DerivedThreshold,
    Logical,
    NumericRange,
    NumericThreshold,
    PercentChange,
    QuantileThreshold,
    Rule,
    ZScoreThreshold,
)


# ---------------------------------------------------------------------------
# coverage masks
# ---------------------------------------------------------------------------

class CoverageMask:
    """Fixed-length bit vector packed into little-endian uint64 words."""

    __slots__ = ("words", "n", "split", "_count")

    def __init__(self, words: np.ndarray, n: int, split: str = "all"):
        words = np.asarray(words, dtype=np.uint64)
        words.setflags(write=False)
        self.words = words
        self.n = n
        self.split = split
        self._count = None

    @classmethod
    def from_bool(cls, bits: np.ndarray, split: str = "all") -> "CoverageMask":
        bits = np.asarray(bits, dtype=bool)
        n = len(bits)
        packed = np.packbits(bits, bitorder="little")
        pad = (-len(packed)) % 8
        if pad:
            packed = np.concatenate([packed, np.zeros(pad, np.uint8)])
        return cls(packed.view(np.uint64).copy(), n, split)

    def to_bool(self) -> np.ndarray:
        bits = np.unpackbits(self.words.view(np.uint8), bitorder="little", count=self.n)
        return bits.astype(bool)

    @property
    def count(self) -> int:
        if self._count is None:
            self._count = int(np.bitwise_count(self.words).sum())
        return self._count

    def _check(self, other: "CoverageMask") -> None:
        if self.n != other.n:
            raise LengthMismatch(f"mask lengths differ: {self.n} vs {other.n}")
        if self.split != other.split:
            raise LengthMismatch(f"masks come from different splits: {self.split!r} vs {other.split!r}")

    def __and__(self, other: "CoverageMask") -> "CoverageMask":
        self._check(other)
        return CoverageMask(self.words & other.words, self.n, self.split)

    def __or__(self, other: "CoverageMask") -> "CoverageMask":
        self._check(other)
        return CoverageMask(self.words | other.words, self.n, self.split)

    def intersection_count(self, other: "CoverageMask") -> int:
        self._check(other)
        return int(np.bitwise_count(self.words & other.words).sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoverageMask):
            return NotImplemented
        return self.n == other.n and self.split == other.split and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.n, self.split, self.words.tobytes()))

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"CoverageMask(n={self.n}, count={self.count}, split={self.split!r})"


def label_mask(labels: Sequence[int] | np.ndarray | CoverageMask, split: str = "all") -> CoverageMask:
    if isinstance(labels, CoverageMask):
        return labels
    return CoverageMask.from_bool(np.asarray(labels) == 1, split)


# ---------------------------------------------------------------------------
# rule evaluation
# ---------------------------------------------------------------------------

def _compare(x: np.ndarray, op: str, c: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        if op == ">":
            return x > c
        if op == ">=":
            return x >= c
        if op == "<":
            return x < c
        return x <= c


def _col(d: Dataset, name: str) -> tuple[np.ndarray, np.ndarray]:
    if name not in d.catalog:
        raise UnknownFeature(name)
    return d.columns[name], d.missing[name]


def rule_truth(rule: Rule, d: Dataset, stats: FeatureStats | None = None) -> np.ndarray:
    """Vectorised predicate value per row; any missing required input gives False."""
    if isinstance(rule, NumericThreshold):
        x, m = _col(d, rule.feature)
        return _compare(x, rule.op, rule.threshold) & ~m
    if isinstance(rule, NumericRange):
        x, m = _col(d, rule.feature)
        with np.errstate(invalid="ignore"):
            return (x >= rule.low) & (x <= rule.high) & ~m
    if isinstance(rule, CategoricalIn):
        x, m = _col(d, rule.feature)
        return np.isin(x, list(rule.categories)) & ~m
    if isinstance(rule, BinaryTrue):
        x, m = _col(d, rule.feature)
        return x.astype(bool) & ~m
    if isinstance(rule, DerivedThreshold):
        a, ma = _col(d, rule.expr.left)
        b, mb = _col(d, rule.expr.right)
        ok = ~ma & ~mb
        with np.errstate(divide="ignore", invalid="ignore"):
            if rule.expr.op == "ratio":
                ok &= b != 0
                g = a / np.where(b == 0, 1.0, b)
            else:
                g = a - b
        return _compare(g, rule.op, rule.threshold) & ok
    if isinstance(rule, CountPresent):
        total = np.zeros(d.n, dtype=np.int64)
        for name in rule.features:
            x, m = _col(d, name)
            total += (x.astype(bool) & ~m)
        return total >= rule.min_count
    if isinstance(rule, Logical):
        parts = [rule_truth(r, d, stats) for r in rule.rules]
        return np.logical_and.reduce(parts) if rule.op == "and" else np.logical_or.reduce(parts)
    if isinstance(rule, PercentChange):
        a, ma = _col(d, rule.feature_t0)
        b, mb = _col(d, rule.feature_t1)
        ok = ~ma & ~mb & (a != 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            change = (b - a) / np.where(a == 0, 1.0, a)
        if rule.direction == "decrease":
            change = -change
        return _compare(change, rule.op, rule.pct) & ok
    if isinstance(rule, ZScoreThreshold):
        x, m = _col(d, rule.feature)
        mu, sd = _usable(stats, rule.feature, need_spread=True)
        with np.errstate(invalid="ignore"):
            z = (x - mu) / sd
        return _compare(z, rule.op, rule.z) & ~m
    if isinstance(rule, QuantileThreshold):
        x, m = _col(d, rule.feature)
        _usable(stats, rule.feature, need_spread=False)
        return _compare(x, rule.op, stats.quantile(rule.feature, rule.q)) & ~m
    raise TypeError(f"not a rule: {rule!r}")


def _usable(stats: FeatureStats | None, name: str, need_spread: bool) -> tuple[float, float]:
    if stats is None:
        raise UnusableStats(f"{name}: distributional rule evaluated without fitted stats")
    if not stats.has_numeric(name):
        raise UnusableStats(f"{name}: no usable training statistics")
    mu, sd = stats.mean(name), stats.std(name)
    if need_spread and not sd > 0:
        raise UnusableStats(f"{name}: zero standard deviation")
    return mu, sd


def evaluate_rule(rule: Rule, d: Dataset, stats: FeatureStats | None = None) -> CoverageMask:
    return CoverageMask.from_bool(rule_truth(rule, d, stats), d.split)


# ---------------------------------------------------------------------------
# discrimination metrics
# ---------------------------------------------------------------------------

def _two_class(labels) -> tuple[np.ndarray, int, int]:
    y = np.asarray(labels).astype(np.int64)
    P = int(y.sum())
    N = len(y) - P
    if P == 0 or N == 0:
        raise SingleClass("AUROC needs both classes present")
    return y, P, N


def auroc_twice_u(scores, labels) -> tuple[int, int, int]:
    """Exact Mann-Whitney tally: returns (2U, P, N) with ties credited one half."""
    s = np.asarray(scores, dtype=float)
    y, P, N = _two_class(labels)
    if len(s) != len(y):
        raise LengthMismatch("scores and labels differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    if s.size and s.min() >= 0 and s.max() <= 4096 and np.all(s == np.floor(s)):
        inv = s.astype(np.int64)
        k = int(inv.max()) + 1
    else:
        _, inv = np.unique(s, return_inverse=True)
        k = int(inv.max()) + 1
    pos = np.bincount(inv[y == 1], minlength=k).astype(np.int64)
    neg = np.bincount(inv[y == 0], minlength=k).astype(np.int64)
    neg_below = np.cumsum(neg) - neg
    two_u = int(np.sum(pos * (2 * neg_below + neg)))
    return two_u, P, N


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count one half."""
    two_u, P, N = auroc_twice_u(scores, labels)
    return two_u / (2 * P * N)


def binary_auroc(tp: int, fp: int, P: int, N: int) -> float:
    """AUROC of a 0/1 score from its confusion counts: (1 + TPR - FPR) / 2."""
    return (tp * N - fp * P + P * N) / (2 * P * N)


def jaccard_positive(a: CoverageMask, b: CoverageMask, labels) -> float:
    """Jaccard similarity of positive-class coverage; 1.0 when both are empty."""
    a._check(b)
    pos = label_mask(labels, a.split)
    if pos.n != a.n:
        raise LengthMismatch("labels and masks differ in length")
    ca = a.words & pos.words
    cb = b.words & pos.words
    union = int(np.bitwise_count(ca | cb).sum())
    if union == 0:
        return 1.0
    return int(np.bitwise_count(ca & cb).sum()) / union


# ---------------------------------------------------------------------------
# checklist scoring and thresholds
# ---------------------------------------------------------------------------

def score_checklist(checklist, d: Dataset, stats: FeatureStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integer score (number of satisfied rules) and p-hat = score / n_rules per row.

    ``checklist`` is a Checklist or any sequence of rules.
    """
    rules = getattr(checklist, "rules", checklist)
    if not rules:
        raise EmptyChecklist("checklist has no rules")
    scores = np.zeros(d.n, dtype=np.int64)
    for r in rules:
        scores += rule_truth(r, d, stats)
    return scores, scores / len(rules)


def predict(scores: np.ndarray, K: int) -> np.ndarray:
    return (np.asarray(scores) >= K).astype(np.int8)


OBJECTIVES = ("youden", "balanced_accuracy", "f1", "sensitivity_at_specificity")


@dataclass(frozen=True)
class RiskRow:
    score: int
    n: int
    events: int

    @property
    def rate(self) -> float:
        return self.events / self.n


@dataclass(frozen=True)
class RiskTable:
    rows: tuple
    non_monotone: tuple = ()  # (lower score, higher score, n_lower, n_higher)

    @property
    def strictly_increasing(self) -> bool:
        return all(b.rate > a.rate for a, b in zip(self.rows, self.rows[1:]))

    @property
    def total(self) -> int:
        return sum(r.n for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": [{"score": r.score, "n": r.n, "events": r.events, "rate": r.rate} for r in self.rows],
            "non_monotone": [
                {"scores": [a, b], "n": [na, nb]} for a, b, na, nb in self.non_monotone
            ],
        }


def risk_table(scores, labels) -> RiskTable:
    """Event rate per observed score level, flagging adjacent levels where risk does not rise."""
    s = np.asarray(scores).astype(np.int64)
    y = np.asarray(labels).astype(np.int64)
    if len(s) == 0:
        raise ValueError("empty score vector")
    if len(s) != len(y):
        raise LengthMismatch("scores and labels differ in length")
    levels, inv = np.unique(s, return_inverse=True)
    n = np.bincount(inv)
    ev = np.bincount(inv, weights=y).astype(np.int64)
    rows = tuple(RiskRow(int(a), int(b), int(c)) for a, b, c in zip(levels, n, ev))
    flags = tuple(
        (a.score, b.score, a.n, b.n) for a, b in zip(rows, rows[1:]) if not b.rate > a.rate
    )
    return RiskTable(rows, flags)


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    threshold: int
    sensitivity: float
    specificity: float
    youden_j: float
    objective: str
    objective_value: float
    risk: RiskTable

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "threshold": self.threshold,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "youden_j": self.youden_j,
            "objective": self.objective,
            "objective_value": self.objective_value,
            "risk_table": self.risk.to_dict(),
        }


def confusion_at(scores, labels, K: int) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) for the rule ``score >= K``."""
    s = np.asarray(scores)
    y = np.asarray(labels).astype(bool)
    pred = s >= K
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    return tp, fp, int(np.sum(~y)) - fp, int(np.sum(y)) - tp


def report_at(scores, labels, K: int, objective: str = "youden", objective_value: float | None = None) -> EvalReport:
    tp, fp, tn, fn = confusion_at(scores, labels, K)
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    return EvalReport(
        auroc=auroc(scores, labels),
        threshold=int(K),
        sensitivity=sens,
        specificity=spec,
        youden_j=sens + spec - 1,
        objective=objective,
        objective_value=sens + spec - 1 if objective_value is None else objective_value,
        risk=risk_table(scores, labels),
    )


def _objective_key(objective: str, tp: int, fp: int, tn: int, fn: int, spec_floor: float):
    P, N = tp + fn, tn + fp
    if objective in ("youden", "balanced_accuracy"):
        # same argmax; balanced accuracy = (J + 1) / 2
        j = Fraction(tp, P) + Fraction(tn, N) - 1
        return (True, j if objective == "youden" else (j + 1) / 2)
    if objective == "f1":
        denom = 2 * tp + fp + fn
        return (True, Fraction(2 * tp, denom) if denom else Fraction(0))
    if objective == "sensitivity_at_specificity":
        feasible = Fraction(tn, N) >= Fraction(spec_floor).limit_denominator(10**9)
        return (feasible, Fraction(tp, P))
    raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")


def select_threshold(
    scores,
    labels,
    objective: str = "youden",
    max_score: int | None = None,
    spec_floor: float = 0.8,
) -> tuple[int, EvalReport]:
    """Exhaustively evaluate K in 0..M and return the best, ties going to the smallest K.

    Comparisons use exact rationals so ties are detected exactly.
    """
    s = np.asarray(scores).astype(np.int64)
    _two_class(labels)
    M = int(s.max()) if max_score is None else int(max_score)
    best_k, best_key = 0, None
    for K in range(0, M + 1):
        key = _objective_key(objective, *confusion_at(s, labels, K), spec_floor)
        if best_key is None or key > best_key:
            best_k, best_key = K, key
    return best_k, report_at(s, labels, best_k, objective, float(best_key[1]))


# ---------------------------------------------------------------------------
# paired comparison across folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedResult:
    baseline: str
    n: int
    mean_delta: float
    ci_low: float
    ci_high: float
    p_ttest: float
    p_wilcoxon: float
    p_ttest_holm: float
    p_wilcoxon_holm: float
    cohens_d: float

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = None if isinstance(v, float) and not math.isfinite(v) else v
        return out


@dataclass(frozen=True)
class ComparisonReport:
    reference: str
    results: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"reference": self.reference, "results": [r.to_dict() for r in self.results]}


def holm_bonferroni(pvalues: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in input order."""
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * pvalues[i]))
        adjusted[i] = running
    return adjusted


def _paired_tests(diff: np.ndarray) -> tuple[float, float, float]:
    """(t-test p, Wilcoxon p, Cohen's d) for paired differences."""
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        # zero-variance differences: an exact tie or an exact, uniform win
        if mean == 0.0:
            return 1.0, 1.0, 0.0
        p_w = float(sps.wilcoxon(diff).pvalue)
        return 0.0, p_w, math.copysign(math.inf, mean)
    p_t = float(sps.ttest_rel(diff, np.zeros_like(diff)).pvalue)
    if np.all(diff == 0):
        p_w = 1.0
    else:
        p_w = float(sps.wilcoxon(diff, zero_method="wilcox").pvalue)
    return p_t, p_w, mean / sd


def paired_comparison(
    matrix: Mapping[str, Sequence[float | None]],
    reference: str | None = None,
    n_boot: int = 10_000,
    seed: int = 0,
    missing_value: float = 0.5,
) -> ComparisonReport:
    """Two-sided paired tests of ``reference`` against every other method.

    ``matrix`` maps method name to per-fold metric values; None cells are
    imputed with ``missing_value``.  Deltas are reference minus baseline.
    """
    names = list(matrix)
    if len(names) < 2:
        raise InsufficientFolds("need at least two methods")
    reference = names[0] if reference is None else reference
    lengths = {len(v) for v in matrix.values()}
    if len(lengths) != 1:
        raise LengthMismatch("methods have different fold counts")
    n = lengths.pop()
    if n < 2:
        raise InsufficientFolds("need at least two folds")

    def column(name):
        return np.array([missing_value if v is None else float(v) for v in matrix[name]])

    ref = column(reference)
    rng = np.random.default_rng(seed)
    boot_idx = rng.integers(0, n, size=(n_boot, n))
    rows = []
    for name in names:
        if name == reference:
            continue
        diff = ref - column(name)
        p_t, p_w, d = _paired_tests(diff)
        means = diff[boot_idx].mean(axis=1)
        lo, hi = np.quantile(means, [0.025, 0.975])
        rows.append([name, n, float(diff.mean()), float(lo), float(hi), p_t, p_w, d])
    adj_t = holm_bonferroni([r[5] for r in rows])
    adj_w = holm_bonferroni([r[6] for r in rows])
    results = tuple(
        PairedResult(r[0], r[1], r[2], r[3], r[4], r[5], r[6], at, aw, r[7])
        for r, at, aw in zip(rows, adj_t, adj_w)
    )
    return ComparisonReport(reference, results)


def aggregate(values: Iterable[float]) -> dict:
    v = np.asarray(list(values), dtype=float)
    return {
        "mean": float(v.mean()) if v.size else float("nan"),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "n": int(v.size),
    }
