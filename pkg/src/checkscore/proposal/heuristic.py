"""Seeded grammar-search proposer that works offline.

Each proposal picks a rule family (biased toward families the pool lacks),
samples features, enumerates parameter settings from aggregate quantiles, and
keeps the setting with the best construction-split AUROC reported by the tool
interface.  Features not yet represented in the pool are preferred, which
spreads proposals across distinct patient subgroups.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..data import FeatureKind
from ..errors import NoNumericFeatures
from ..grammar import (
    BinaryTrue,
    CategoricalIn,
    CountPresent,
    DerivedExpr,
    DerivedThreshold,
    Logical,
    NumericRange,
    NumericThreshold,
    PercentChange,
    QuantileThreshold,
    Rule,
    RuleFamily,
    ZScoreThreshold,
    logic_depth,
    referenced_features,
    serialize_rule,
)
from .tools import Expression, ProposalContext, ToolInterface

log = logging.getLogger(__name__)

BASE_WEIGHTS = {
    RuleFamily.THRESHOLD: 3.0,
    RuleFamily.RANGE: 1.0,
    RuleFamily.CATEGORICAL: 1.0,
    RuleFamily.BINARY: 1.0,
    RuleFamily.DERIVED: 2.0,
    RuleFamily.COUNT: 1.0,
    RuleFamily.LOGICAL: 1.0,
    RuleFamily.TEMPORAL_DISTRIBUTIONAL: 2.0,
}
GUIDANCE_BOOST = 3.0
PERCENTILES = tuple(round(0.01 * i, 2) for i in range(1, 100))
DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))
Z_GRID = (-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0)
Q_GRID = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
TEMPORAL_PAIRS = (("__first", "__last"), ("__max", "__last"), ("__min", "__last"))


def round_sig(x: float, digits: int = 2) -> float:
    """Round to ``digits`` significant figures (clinically plausible precision)."""
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


@dataclass(frozen=True)
class Candidate:
    """One proposed rule as seen by the pipeline transcript."""

    source: str
    raw: str
    rule: Rule | None
    error: str | None = None


class _Search:
    def __init__(self, tools: ToolInterface, rng: np.random.Generator, ctx: ProposalContext):
        self.tools = tools
        self.rng = rng
        self.ctx = ctx
        self.pooled_features = set()
        for rule, _ in tools.pool_rules():
            self.pooled_features.update(referenced_features(rule))

    def pick(self, items, k: int = 1, partial: bool = False) -> list:
        """Sample up to k items, preferring ones whose features are absent from the pool.

        With ``partial`` a multi-feature item counts as fresh when any of its
        features is unused (ratios legitimately reuse a pooled vital sign).
        """
        items = list(items)
        if not items:
            return []
        if partial:
            fresh = [it for it in items if set(_names(it)) - self.pooled_features]
        else:
            fresh = [it for it in items if not (set(_names(it)) & self.pooled_features)]
        source = fresh or items
        k = min(k, len(source))
        idx = self.rng.choice(len(source), size=k, replace=False)
        return [source[i] for i in sorted(idx)]

    def best(self, rules: list) -> Rule | None:
        """Highest-AUROC rule not already retained; earliest wins ties."""
        best_rule, best_auc = None, -1.0
        for r in rules:
            if self.tools.in_pool(r):
                continue
            res = self.tools.evaluate_candidate(r)
            auc = res.get("auroc", -1.0)
            if auc > best_auc:
                best_rule, best_auc = r, auc
        return best_rule

    def best_scan(self, expr: Expression, cuts, make: Callable[[str, float], Rule | None]) -> tuple[Rule | None, float]:
        best_rule, best_auc = None, -1.0
        if not len(cuts):
            return None, best_auc
        for row in self.tools.scan_thresholds(expr, cuts):
            if row["auroc"] <= best_auc or row["coverage"] == 0:
                continue
            rule = make(row["op"], row["cut"])
            if rule is None or self.tools.in_pool(rule):
                continue
            best_rule, best_auc = rule, row["auroc"]
        return best_rule, best_auc


def _names(item) -> tuple:
    return item if isinstance(item, tuple) else (item,)


def _round_cuts(qs: list[float]) -> list[float]:
    return sorted({round_sig(q, 2) for q in qs})


# -- family samplers -----------------------------------------------------------

def _threshold(s: _Search) -> Rule | None:
    best, best_auc = None, -1.0
    for name in s.pick(s.tools.usable_numeric(), k=4):
        expr = Expression("feature", name)
        cuts = _round_cuts(s.tools.expression_quantiles(expr, PERCENTILES))
        rule, auc = s.best_scan(expr, cuts, lambda op, c, n=name: NumericThreshold(n, op, c))
        if auc > best_auc:
            best, best_auc = rule, auc
    return best


def _range(s: _Search) -> Rule | None:
    picked = s.pick(s.tools.usable_numeric())
    if not picked:
        return None
    name = picked[0]
    cuts = _round_cuts(s.tools.expression_quantiles(Expression("feature", name), DECILES))
    rules = [NumericRange(name, lo, hi) for lo, hi in itertools.combinations(cuts, 2)]
    return s.best(rules)


def _categorical(s: _Search) -> Rule | None:
    picked = s.pick(s.tools.names(FeatureKind.CATEGORICAL))
    if not picked:
        return None
    name = picked[0]
    cats = sorted(s.tools.category_counts(name))
    if not cats:
        return None
    if len(cats) <= 6:
        sizes = range(1, max(len(cats), 2))
    else:
        sizes = (1, 2)
    rules = [
        CategoricalIn(name, frozenset(sub))
        for k in sizes
        for sub in itertools.combinations(cats, k)
    ]
    return s.best(rules)


def _binary(s: _Search) -> Rule | None:
    picked = s.pick(s.tools.names(FeatureKind.BINARY))
    return BinaryTrue(picked[0]) if picked else None


def _derived(s: _Search) -> Rule | None:
    numeric = s.tools.usable_numeric()
    if len(numeric) < 2:
        raise NoNumericFeatures("ratio and contrast rules need two numeric features")
    by_suffix = {}
    for n in numeric:
        by_suffix.setdefault(n.rsplit("__", 1)[-1] if "__" in n else "", []).append(n)
    pairs = [p for group in by_suffix.values() for p in itertools.permutations(group, 2)]
    if not pairs:
        pairs = list(itertools.permutations(numeric, 2))
    best, best_auc = None, -1.0
    for a, b in s.pick(pairs, k=4, partial=True):
        for kind in ("ratio", "difference"):
            if kind == "difference" and a > b:
                continue  # a - b and b - a are mirror images under op flips
            expr = Expression(kind, a, b)
            cuts = _round_cuts(s.tools.expression_quantiles(expr, PERCENTILES))
            dexpr = DerivedExpr(kind, a, b)
            rule, auc = s.best_scan(expr, cuts, lambda op, c, e=dexpr: DerivedThreshold(e, op, c))
            if auc > best_auc:
                best, best_auc = rule, auc
    return best


def _count(s: _Search) -> Rule | None:
    binary = s.tools.names(FeatureKind.BINARY)
    if len(binary) < 2:
        return None
    size = int(s.rng.integers(2, min(4, len(binary)) + 1))
    idx = sorted(s.rng.choice(len(binary), size=size, replace=False))
    feats = tuple(binary[i] for i in idx)
    return s.best([CountPresent(feats, m) for m in range(1, size + 1)])


def _atomic_fallback(s: _Search) -> Rule | None:
    for sampler in (_threshold, _binary, _categorical):
        r = sampler(s)
        if r is not None:
            return r
    return None


def _logical(s: _Search) -> Rule | None:
    """Pair a retained atom with a fresh condition on another feature.

    Composing two already-retained rules adds little to an additive score (both
    can simply be counted), so one side is always new.
    """
    if s.ctx.logic_depth < 1:
        return None
    atoms = [r for r, _ in s.tools.pool_rules() if logic_depth(r) == 0][:8]
    anchor = atoms[int(s.rng.integers(len(atoms)))] if atoms else _atomic_fallback(s)
    fresh = _atomic_fallback(s)
    if anchor is None or fresh is None or set(referenced_features(anchor)) & set(referenced_features(fresh)):
        return None
    return s.best([Logical(op, (anchor, fresh)) for op in ("and", "or")])


def _temporal(s: _Search) -> Rule | None:
    numeric = set(s.tools.usable_numeric())
    pairs = []
    for n in sorted(numeric):
        for a_suf, b_suf in TEMPORAL_PAIRS:
            if n.endswith(a_suf):
                base = n[: -len(a_suf)]
                if base + b_suf in numeric:
                    pairs.append((n, base + b_suf))
    kinds = ["zscore", "quantile"] + (["pct"] * 2 if pairs else [])
    kind = kinds[int(s.rng.integers(len(kinds)))]
    if kind == "pct":
        t0, t1 = s.pick(pairs, partial=True)[0]
        expr = Expression("pct_change", t0, t1)
        cuts = _round_cuts(s.tools.expression_quantiles(expr, PERCENTILES))

        def make(op, c, t0=t0, t1=t1):
            # change >= c  -> increase by c;  change < c (c < 0) -> decline of at least -c
            if op == ">=" and c > 0:
                return PercentChange(t0, t1, c, ">=", "increase")
            if op == "<" and c < 0:
                return PercentChange(t0, t1, -c, ">", "decrease")
            return None

        rule, _ = s.best_scan(expr, cuts, make)
        return rule
    picked = s.pick(sorted(numeric))
    if not picked:
        return None
    name = picked[0]
    if kind == "zscore":
        rules = [ZScoreThreshold(name, op, z) for z in Z_GRID for op in (">=", "<")]
    else:
        rules = [QuantileThreshold(name, op, q) for q in Q_GRID for op in (">=", "<")]
    return s.best(rules)


SAMPLERS = {
    RuleFamily.THRESHOLD: _threshold,
    RuleFamily.RANGE: _range,
    RuleFamily.CATEGORICAL: _categorical,
    RuleFamily.BINARY: _binary,
    RuleFamily.DERIVED: _derived,
    RuleFamily.COUNT: _count,
    RuleFamily.LOGICAL: _logical,
    RuleFamily.TEMPORAL_DISTRIBUTIONAL: _temporal,
}


def _feasible(tools: ToolInterface, ctx: ProposalContext) -> list[RuleFamily]:
    n_num = len(tools.usable_numeric())
    n_bin = len(tools.names(FeatureKind.BINARY))
    n_cat = len(tools.names(FeatureKind.CATEGORICAL))
    ok = {
        RuleFamily.THRESHOLD: n_num > 0,
        RuleFamily.RANGE: n_num > 0,
        RuleFamily.CATEGORICAL: n_cat > 0,
        RuleFamily.BINARY: n_bin > 0,
        RuleFamily.DERIVED: n_num > 0,
        RuleFamily.COUNT: n_bin > 1,
        RuleFamily.LOGICAL: ctx.logic_depth >= 1 and n_num + n_bin + n_cat > 1,
        RuleFamily.TEMPORAL_DISTRIBUTIONAL: n_num > 0,
    }
    return [f for f in RuleFamily if ok[f]]


def propose_heuristic(ctx: ProposalContext, batch: int, seed) -> list[Rule]:
    """Return up to ``batch`` distinct, grammar-valid rules; deterministic per seed."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if ctx.tools is None:
        raise ValueError("heuristic proposal needs a tool interface in the context")
    rng = np.random.default_rng(seed)
    search = _Search(ctx.tools, rng, ctx)
    families = _feasible(ctx.tools, ctx)
    guided = set(ctx.guidance)
    out: list[Rule] = []
    attempts = 0
    while families and len(out) < batch and attempts < 8 * batch:
        attempts += 1
        w = np.array([BASE_WEIGHTS[f] * (GUIDANCE_BOOST if f in guided else 1.0) for f in families])
        fam = families[int(rng.choice(len(families), p=w / w.sum()))]
        try:
            rule = SAMPLERS[fam](search)
        except NoNumericFeatures as exc:
            log.info("skipping derived family: %s", exc)
            families.remove(fam)
            continue
        if rule is None or rule in out:
            continue
        out.append(rule)
    return out


class HeuristicProposer:
    name = "heuristic"

    def propose(self, ctx: ProposalContext, batch: int, seed) -> list[Candidate]:
        return [Candidate(self.name, serialize_rule(r), r) for r in propose_heuristic(ctx, batch, seed)]
