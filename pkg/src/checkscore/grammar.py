"""Typed rule language: rule variants, JSON-lines parsing and canonical serialization.

Every rule is an immutable, hashable dataclass, so structural equality is plain
``==`` and rules can live in sets.  The JSON dialect is the one-object-per-line
schema used by the proposers::

    {"type":"numeric_threshold","feature":"BUN__last","op":">=","threshold":30}

``serialize_rule`` emits ``type`` first and every other key in sorted order,
with compact separators and the shortest round-trippable number formatting.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from math import comb
from typing import Any, Mapping, Union

from .data import FeatureCatalog, FeatureKind
from .errors import (
    DepthExceeded,
    InvalidParameter,
    MalformedSyntax,
    TypeMismatch,
    UnknownFeature,
)

OPS = (">", ">=", "<", "<=")


class RuleFamily(str, enum.Enum):
    THRESHOLD = "threshold"
    RANGE = "range"
    CATEGORICAL = "categorical"
    BINARY = "binary"
    DERIVED = "derived"
    COUNT = "count"
    LOGICAL = "logical"
    TEMPORAL_DISTRIBUTIONAL = "temporal_distributional"


@dataclass(frozen=True)
class NumericThreshold:
    feature: str
    op: str
    threshold: float


@dataclass(frozen=True)
class NumericRange:
    feature: str
    low: float
    high: float


@dataclass(frozen=True)
class CategoricalIn:
    feature: str
    categories: frozenset


@dataclass(frozen=True)
class BinaryTrue:
    feature: str


@dataclass(frozen=True)
class DerivedExpr:
    """Either ``left / right`` (op ``ratio``) or ``left - right`` (op ``difference``)."""

    op: str
    left: str
    right: str

    def text(self) -> str:
        sym = "/" if self.op == "ratio" else "-"
        return f"{self.left}{sym}{self.right}"


@dataclass(frozen=True)
class DerivedThreshold:
    expr: DerivedExpr
    op: str
    threshold: float


@dataclass(frozen=True)
class CountPresent:
    features: tuple
    min_count: int


@dataclass(frozen=True)
class Logical:
    op: str  # "and" | "or"
    rules: tuple


@dataclass(frozen=True)
class PercentChange:
    """Relative change ``(t1 - t0) / t0`` compared against ``pct``.

    ``pct`` is a fraction (0.15 means 15%).  With ``direction="decrease"`` the
    compared quantity is the relative decline ``(t0 - t1) / t0``.
    """

    feature_t0: str
    feature_t1: str
    pct: float
    op: str
    direction: str


@dataclass(frozen=True)
class ZScoreThreshold:
    feature: str
    op: str
    z: float


@dataclass(frozen=True)
class QuantileThreshold:
    feature: str
    op: str
    q: float


Rule = Union[
    NumericThreshold,
    NumericRange,
    CategoricalIn,
    BinaryTrue,
    DerivedThreshold,
    CountPresent,
    Logical,
    PercentChange,
    ZScoreThreshold,
    QuantileThreshold,
]

RULE_TYPES = (
    NumericThreshold,
    NumericRange,
    CategoricalIn,
    BinaryTrue,
    DerivedThreshold,
    CountPresent,
    Logical,
    PercentChange,
    ZScoreThreshold,
    QuantileThreshold,
)

_FAMILY = {
    NumericThreshold: RuleFamily.THRESHOLD,
    NumericRange: RuleFamily.RANGE,
    CategoricalIn: RuleFamily.CATEGORICAL,
    BinaryTrue: RuleFamily.BINARY,
    DerivedThreshold: RuleFamily.DERIVED,
    CountPresent: RuleFamily.COUNT,
    Logical: RuleFamily.LOGICAL,
    PercentChange: RuleFamily.TEMPORAL_DISTRIBUTIONAL,
    ZScoreThreshold: RuleFamily.TEMPORAL_DISTRIBUTIONAL,
    QuantileThreshold: RuleFamily.TEMPORAL_DISTRIBUTIONAL,
}

_TYPE_TAG = {
    NumericThreshold: "numeric_threshold",
    NumericRange: "numeric_range",
    CategoricalIn: "categorical_in",
    BinaryTrue: "binary_true",
    DerivedThreshold: "derived_numeric_threshold",
    CountPresent: "count_present",
    Logical: "logical",
    PercentChange: "percent_change",
    ZScoreThreshold: "zscore_threshold",
    QuantileThreshold: "quantile_threshold",
}

_KEYS = {
    "numeric_threshold": {"feature", "op", "threshold"},
    "numeric_range": {"feature", "low", "high"},
    "categorical_in": {"feature", "in"},
    "binary_true": {"feature"},
    "derived_numeric_threshold": {"expr", "op", "threshold"},
    "count_present": {"features", "min_count"},
    "logical": {"op", "rules"},
    "percent_change": {"feature_t0", "feature_t1", "pct", "op", "direction"},
    "zscore_threshold": {"feature", "op", "z"},
    "quantile_threshold": {"feature", "op", "q"},
}


def rule_family(rule: Rule) -> RuleFamily:
    return _FAMILY[type(rule)]


def logic_depth(rule: Rule) -> int:
    """Nesting height of AND/OR operations; atomic rules have depth 0."""
    if isinstance(rule, Logical):
        return 1 + max(logic_depth(r) for r in rule.rules)
    return 0


def referenced_features(rule: Rule) -> tuple:
    """Feature names a rule reads, in first-occurrence order."""
    if isinstance(rule, DerivedThreshold):
        names = [rule.expr.left, rule.expr.right]
    elif isinstance(rule, CountPresent):
        names = list(rule.features)
    elif isinstance(rule, PercentChange):
        names = [rule.feature_t0, rule.feature_t1]
    elif isinstance(rule, Logical):
        names = [n for child in rule.rules for n in referenced_features(child)]
    else:
        names = [rule.feature]
    return tuple(dict.fromkeys(names))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _check_real(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise InvalidParameter(f"{what} must be finite, got {value!r}")


def validate_rule(rule: Rule, catalog: FeatureCatalog | None = None, max_depth: int | None = None) -> Rule:
    """Check parameter, feature-kind and depth constraints; return the rule unchanged."""
    if max_depth is not None and logic_depth(rule) > max_depth:
        raise DepthExceeded(f"logical depth {logic_depth(rule)} exceeds {max_depth}")
    _validate(rule, catalog)
    return rule


def _need(catalog: FeatureCatalog | None, name: str, kind: FeatureKind, rule_type: str) -> None:
    if catalog is None:
        return
    if name not in catalog:
        raise UnknownFeature(name)
    actual = catalog.kind(name)
    if actual is not kind:
        raise TypeMismatch(f"{rule_type} needs a {kind.value} feature; {name!r} is {actual.value}")


def _validate(rule: Rule, catalog: FeatureCatalog | None) -> None:
    tag = _TYPE_TAG[type(rule)]
    if hasattr(rule, "op") and not isinstance(rule, Logical) and rule.op not in OPS:
        raise InvalidParameter(f"op must be one of {OPS}, got {rule.op!r}")
    if isinstance(rule, NumericThreshold):
        _check_real(rule.threshold, "threshold")
        _need(catalog, rule.feature, FeatureKind.NUMERIC, tag)
    elif isinstance(rule, NumericRange):
        _check_real(rule.low, "low")
        _check_real(rule.high, "high")
        if rule.low > rule.high:
            raise InvalidParameter(f"range low {rule.low} > high {rule.high}")
        _need(catalog, rule.feature, FeatureKind.NUMERIC, tag)
    elif isinstance(rule, CategoricalIn):
        if not rule.categories:
            raise InvalidParameter("categorical_in needs at least one category")
        _need(catalog, rule.feature, FeatureKind.CATEGORICAL, tag)
    elif isinstance(rule, BinaryTrue):
        _need(catalog, rule.feature, FeatureKind.BINARY, tag)
    elif isinstance(rule, DerivedThreshold):
        if rule.expr.op not in ("ratio", "difference"):
            raise InvalidParameter(f"derived op must be ratio or difference, got {rule.expr.op!r}")
        _check_real(rule.threshold, "threshold")
        _need(catalog, rule.expr.left, FeatureKind.NUMERIC, tag)
        _need(catalog, rule.expr.right, FeatureKind.NUMERIC, tag)
    elif isinstance(rule, CountPresent):
        if not rule.features:
            raise InvalidParameter("count_present needs at least one feature")
        if len(set(rule.features)) != len(rule.features):
            raise InvalidParameter("count_present features must be distinct")
        if not 1 <= rule.min_count <= len(rule.features):
            raise InvalidParameter(
                f"min_count must lie in [1, {len(rule.features)}], got {rule.min_count}"
            )
        for name in rule.features:
            _need(catalog, name, FeatureKind.BINARY, tag)
    elif isinstance(rule, Logical):
        if rule.op not in ("and", "or"):
            raise InvalidParameter(f"logical op must be 'and' or 'or', got {rule.op!r}")
        if len(rule.rules) < 2:
            raise InvalidParameter("logical rule needs at least two children")
        for child in rule.rules:
            _validate(child, catalog)
    elif isinstance(rule, PercentChange):
        _check_real(rule.pct, "pct")
        if rule.direction not in ("increase", "decrease"):
            raise InvalidParameter(f"direction must be increase or decrease, got {rule.direction!r}")
        _need(catalog, rule.feature_t0, FeatureKind.NUMERIC, tag)
        _need(catalog, rule.feature_t1, FeatureKind.NUMERIC, tag)
    elif isinstance(rule, ZScoreThreshold):
        _check_real(rule.z, "z")
        _need(catalog, rule.feature, FeatureKind.NUMERIC, tag)
    elif isinstance(rule, QuantileThreshold):
        _check_real(rule.q, "q")
        if not 0.0 < rule.q < 1.0:
            raise InvalidParameter(f"q must lie strictly inside (0, 1), got {rule.q}")
        _need(catalog, rule.feature, FeatureKind.NUMERIC, tag)
    else:  # pragma: no cover
        raise TypeError(f"not a rule: {rule!r}")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _get(obj: Mapping, key: str, kind: type | tuple, tag: str) -> Any:
    value = obj[key]
    # bool is an int subclass; the schema never wants it as a number
    if isinstance(value, bool) and kind is not bool:
        raise MalformedSyntax(f"{tag}.{key}: expected {kind}, got bool")
    if not isinstance(value, kind):
        raise MalformedSyntax(f"{tag}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def _num(obj: Mapping, key: str, tag: str) -> float:
    return float(_get(obj, key, (int, float), tag))


def _name(obj: Mapping, key: str, tag: str) -> str:
    value = _get(obj, key, str, tag)
    if not value:
        raise MalformedSyntax(f"{tag}.{key}: empty feature name")
    return value


def parse_derived_expr(text: str, catalog: FeatureCatalog | None = None) -> DerivedExpr:
    """Parse ``a/b`` or ``a-b`` over two feature names.

    Feature names may themselves contain ``-``; when a catalog is given, the
    split must be the unique one that yields two known names.
    """
    s = text.strip()
    splits = []
    for i, ch in enumerate(s):
        if ch in "/-":
            left, right = s[:i].strip(), s[i + 1:].strip()
            if left and right and "/" not in left + right:
                splits.append((ch, left, right))
    if catalog is not None:
        known = [sp for sp in splits if sp[1] in catalog and sp[2] in catalog]
        if len(known) == 1:
            splits = known
        elif not known and len(splits) == 1:
            missing = splits[0][1] if splits[0][1] not in catalog else splits[0][2]
            raise UnknownFeature(missing)
        else:
            splits = known
    if len(splits) != 1:
        raise MalformedSyntax(
            f"derived expression must be exactly 'a/b' or 'a-b' over feature names, got {text!r}"
        )
    sym, left, right = splits[0]
    return DerivedExpr("ratio" if sym == "/" else "difference", left, right)


def rule_from_obj(obj: Any, catalog: FeatureCatalog | None = None, max_depth: int | None = None) -> Rule:
    """Build and validate a rule from an already-decoded JSON object."""
    rule = _from_obj(obj, catalog)
    return validate_rule(rule, catalog, max_depth)


def _from_obj(obj: Any, catalog: FeatureCatalog | None) -> Rule:
    if not isinstance(obj, dict):
        raise MalformedSyntax(f"rule must be a JSON object, got {type(obj).__name__}")
    tag = obj.get("type")
    if tag not in _KEYS:
        raise MalformedSyntax(f"unknown rule type {tag!r}")
    keys = set(obj) - {"type"}
    if keys != _KEYS[tag]:
        missing = sorted(_KEYS[tag] - keys)
        extra = sorted(keys - _KEYS[tag])
        raise MalformedSyntax(f"{tag}: missing keys {missing}, unexpected keys {extra}")

    if tag == "numeric_threshold":
        return NumericThreshold(_name(obj, "feature", tag), _get(obj, "op", str, tag), _num(obj, "threshold", tag))
    if tag == "numeric_range":
        return NumericRange(_name(obj, "feature", tag), _num(obj, "low", tag), _num(obj, "high", tag))
    if tag == "categorical_in":
        cats = _get(obj, "in", list, tag)
        labels = []
        for c in cats:
            if isinstance(c, bool) or not isinstance(c, (str, int)):
                raise MalformedSyntax(f"{tag}.in: category labels must be strings or integers")
            labels.append(str(c))
        return CategoricalIn(_name(obj, "feature", tag), frozenset(labels))
    if tag == "binary_true":
        return BinaryTrue(_name(obj, "feature", tag))
    if tag == "derived_numeric_threshold":
        expr = parse_derived_expr(_get(obj, "expr", str, tag), catalog)
        return DerivedThreshold(expr, _get(obj, "op", str, tag), _num(obj, "threshold", tag))
    if tag == "count_present":
        feats = _get(obj, "features", list, tag)
        if not all(isinstance(f, str) and f for f in feats):
            raise MalformedSyntax(f"{tag}.features must be non-empty strings")
        return CountPresent(tuple(feats), _get(obj, "min_count", int, tag))
    if tag == "logical":
        children = _get(obj, "rules", list, tag)
        return Logical(_get(obj, "op", str, tag), tuple(_from_obj(c, catalog) for c in children))
    if tag == "percent_change":
        return PercentChange(
            _name(obj, "feature_t0", tag),
            _name(obj, "feature_t1", tag),
            _num(obj, "pct", tag),
            _get(obj, "op", str, tag),
            _get(obj, "direction", str, tag),
        )
    if tag == "zscore_threshold":
        return ZScoreThreshold(_name(obj, "feature", tag), _get(obj, "op", str, tag), _num(obj, "z", tag))
    return QuantileThreshold(_name(obj, "feature", tag), _get(obj, "op", str, tag), _num(obj, "q", tag))


def parse_rule(text: str, catalog: FeatureCatalog | None = None, max_depth: int | None = 1) -> Rule:
    """Parse one line of rule-schema JSON.

    Raises one of MalformedSyntax, UnknownFeature, TypeMismatch, DepthExceeded
    or InvalidParameter (all subclasses of ``RuleError``).
    """
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedSyntax(f"not valid JSON: {exc}") from None
    return rule_from_obj(obj, catalog, max_depth)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _canon_num(x: float) -> float | int:
    if float(x).is_integer() and abs(x) < 2**53:
        return int(x)
    return float(x)


def rule_to_obj(rule: Rule) -> dict:
    tag = _TYPE_TAG[type(rule)]
    if isinstance(rule, NumericThreshold):
        body = {"feature": rule.feature, "op": rule.op, "threshold": _canon_num(rule.threshold)}
    elif isinstance(rule, NumericRange):
        body = {"feature": rule.feature, "low": _canon_num(rule.low), "high": _canon_num(rule.high)}
    elif isinstance(rule, CategoricalIn):
        body = {"feature": rule.feature, "in": sorted(rule.categories)}
    elif isinstance(rule, BinaryTrue):
        body = {"feature": rule.feature}
    elif isinstance(rule, DerivedThreshold):
        body = {"expr": rule.expr.text(), "op": rule.op, "threshold": _canon_num(rule.threshold)}
    elif isinstance(rule, CountPresent):
        body = {"features": list(rule.features), "min_count": rule.min_count}
    elif isinstance(rule, Logical):
        body = {"op": rule.op, "rules": [rule_to_obj(r) for r in rule.rules]}
    elif isinstance(rule, PercentChange):
        body = {
            "feature_t0": rule.feature_t0,
            "feature_t1": rule.feature_t1,
            "pct": _canon_num(rule.pct),
            "op": rule.op,
            "direction": rule.direction,
        }
    elif isinstance(rule, ZScoreThreshold):
        body = {"feature": rule.feature, "op": rule.op, "z": _canon_num(rule.z)}
    else:
        body = {"feature": rule.feature, "op": rule.op, "q": _canon_num(rule.q)}
    out = {"type": tag}
    out.update((k, body[k]) for k in sorted(body))
    return out


def serialize_rule(rule: Rule) -> str:
    return json.dumps(rule_to_obj(rule), separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# human-readable text (checklist cards)
# ---------------------------------------------------------------------------

_OP_TEXT = {">": ">", ">=": "≥", "<": "<", "<=": "≤"}


def _fmt(x: float) -> str:
    return repr(_canon_num(x))


def rule_text(rule: Rule, stats: Any = None) -> str:
    """Bedside wording of a rule; quantile and z-score cut-points are resolved when stats are given."""
    if isinstance(rule, NumericThreshold):
        return f"{rule.feature} {_OP_TEXT[rule.op]} {_fmt(rule.threshold)}"
    if isinstance(rule, NumericRange):
        return f"{_fmt(rule.low)} ≤ {rule.feature} ≤ {_fmt(rule.high)}"
    if isinstance(rule, CategoricalIn):
        cats = sorted(rule.categories)
        if len(cats) == 1:
            return f"{rule.feature} is {cats[0]}"
        return f"{rule.feature} is {' or '.join(cats)}"
    if isinstance(rule, BinaryTrue):
        return rule.feature
    if isinstance(rule, DerivedThreshold):
        sym = " / " if rule.expr.op == "ratio" else " - "
        return f"{rule.expr.left}{sym}{rule.expr.right} {_OP_TEXT[rule.op]} {_fmt(rule.threshold)}"
    if isinstance(rule, CountPresent):
        return f"at least {rule.min_count} of {{{', '.join(rule.features)}}}"
    if isinstance(rule, Logical):
        parts = [rule_text(r, stats) for r in rule.rules]
        return f" **{rule.op}** ".join(parts)
    if isinstance(rule, PercentChange):
        word = "rise" if rule.direction == "increase" else "decline"
        pct100 = rule.pct * 100
        # 10 significant digits hides binary noise such as 0.07 * 100 = 7.000000000000001
        pct = f"{_fmt(float(f'{pct100:.10g}'))}%" if math.isfinite(pct100) else _fmt(rule.pct)
        return f"{word} from {rule.feature_t0} to {rule.feature_t1} {_OP_TEXT[rule.op]} {pct}"
    if isinstance(rule, ZScoreThreshold):
        text = f"z({rule.feature}) {_OP_TEXT[rule.op]} {_fmt(rule.z)}"
        if stats is not None and stats.has_numeric(rule.feature):
            mu, sd = stats.mean(rule.feature), stats.std(rule.feature)
            if sd > 0:
                cut = mu + rule.z * sd
                text += f" (i.e. {rule.feature} {_OP_TEXT[rule.op]} {_round_display(cut)})"
        return text
    text = f"{rule.feature} {_OP_TEXT[rule.op]} Q{_fmt(rule.q)}({rule.feature})"
    if stats is not None and stats.has_numeric(rule.feature):
        text += f" = {_round_display(stats.quantile(rule.feature, rule.q))}"
    return text


def _round_display(x: float) -> str:
    return f"{x:.4g}"


# ---------------------------------------------------------------------------
# rule-space cardinality
# ---------------------------------------------------------------------------

TEMPORAL_VARIANTS = 12  # 4 windows x 3 summary statistics


@dataclass(frozen=True)
class CardinalityReport:
    p: int
    thresholds: int
    primitive: int
    compositional: int
    universe_order: int
    n_samples: int | None = None
    primitive_matrix_bytes: int | None = None
    universe_matrix_bytes: int | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def estimate_rule_space(p: int, T: int, n_samples: int | None = None) -> CardinalityReport:
    """Order-of-magnitude size of the grammar-induced rule space.

    primitive = p (2T + T^2); compositional = 2 C(primitive, 2);
    universe = compositional x (1 + 12 temporal variants) x (1 + C(p, 2) pairwise ratios).
    Matrix sizes are bit-packed bytes, rounded up.
    """
    if p < 1 or T < 1:
        raise ValueError("p and T must be positive")
    primitive = p * (2 * T + T * T)
    compositional = 2 * comb(primitive, 2)
    universe = compositional * (1 + TEMPORAL_VARIANTS) * (1 + comb(p, 2))
    prim_bytes = univ_bytes = None
    if n_samples is not None:
        prim_bytes = -(-n_samples * primitive // 8)
        univ_bytes = -(-n_samples * universe // 8)
    return CardinalityReport(p, T, primitive, compositional, universe, n_samples, prim_bytes, univ_bytes)
