"""Random well-formed rules over a fixed catalog, covering every grammar variant."""

from __future__ import annotations

import random

from checkscore.data import FeatureCatalog, FeatureKind, FeatureSpec
from checkscore.grammar import (
    OPS,
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
    ZScoreThreshold,
)

NUMERIC = tuple(f"x{i}" for i in range(8)) + ("hr__last", "hr__first", "map__last")
CATEGORICAL = ("ward", "sex")
BINARY = tuple(f"flag{i}" for i in range(6))
LABELS = ("icu", "ed", "floor", "M", "F", "Ünit 3", 'quote"d')

FUZZ_CATALOG = FeatureCatalog(
    [FeatureSpec(n, FeatureKind.NUMERIC) for n in NUMERIC]
    + [FeatureSpec(n, FeatureKind.CATEGORICAL) for n in CATEGORICAL]
    + [FeatureSpec(n, FeatureKind.BINARY) for n in BINARY]
)

ATOMIC = (
    "numeric_threshold",
    "numeric_range",
    "categorical_in",
    "binary_true",
    "derived_numeric_threshold",
    "count_present",
    "percent_change",
    "zscore_threshold",
    "quantile_threshold",
)
VARIANTS = ATOMIC + ("logical",)


def _real(rng: random.Random) -> float:
    kind = rng.random()
    if kind < 0.3:
        return float(rng.randint(-500, 500))
    if kind < 0.6:
        return round(rng.uniform(-100, 100), rng.randint(0, 6))
    if kind < 0.8:
        return rng.uniform(-1e6, 1e6)
    # awkward magnitudes: tiny, huge, and integers past 2**53
    return rng.choice([5e-324, 1e-300, 1.7976931348623157e308, 2.0**60, -(2.0**53) - 2, 0.1 + 0.2])


def _atomic(rng: random.Random, tag: str):
    if tag == "numeric_threshold":
        return NumericThreshold(rng.choice(NUMERIC), rng.choice(OPS), _real(rng))
    if tag == "numeric_range":
        lo, hi = sorted((_real(rng), _real(rng)))
        return NumericRange(rng.choice(NUMERIC), lo, hi)
    if tag == "categorical_in":
        return CategoricalIn(rng.choice(CATEGORICAL), frozenset(rng.sample(LABELS, rng.randint(1, 4))))
    if tag == "binary_true":
        return BinaryTrue(rng.choice(BINARY))
    if tag == "derived_numeric_threshold":
        left, right = rng.sample(NUMERIC, 2)
        return DerivedThreshold(DerivedExpr(rng.choice(("ratio", "difference")), left, right), rng.choice(OPS), _real(rng))
    if tag == "count_present":
        feats = tuple(rng.sample(BINARY, rng.randint(1, len(BINARY))))
        return CountPresent(feats, rng.randint(1, len(feats)))
    if tag == "percent_change":
        t0, t1 = rng.sample(NUMERIC, 2)
        return PercentChange(t0, t1, _real(rng), rng.choice(OPS), rng.choice(("increase", "decrease")))
    if tag == "zscore_threshold":
        return ZScoreThreshold(rng.choice(NUMERIC), rng.choice(OPS), _real(rng))
    q = rng.choice([0.01, 0.05, 0.25, 0.5, 0.9, 0.99, rng.uniform(1e-6, 1 - 1e-6)])
    return QuantileThreshold(rng.choice(NUMERIC), rng.choice(OPS), q)


def random_rule(rng: random.Random, tag: str | None = None, depth: int = 1):
    tag = tag or rng.choice(VARIANTS)
    if tag != "logical":
        return _atomic(rng, tag)
    children = []
    for _ in range(rng.randint(2, 4)):
        if depth > 1 and rng.random() < 0.3:
            children.append(random_rule(rng, "logical", depth - 1))
        else:
            children.append(_atomic(rng, rng.choice(ATOMIC)))
    return Logical(rng.choice(("and", "or")), tuple(children))


def rule_stream(n: int, seed: int = 0, depth: int = 1):
    """``n`` rules cycling through every variant, so each appears n/10 times."""
    rng = random.Random(seed)
    for i in range(n):
        yield random_rule(rng, VARIANTS[i % len(VARIANTS)], depth)
