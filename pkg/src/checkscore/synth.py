"""Synthetic cohorts with a planted unit-weighted checklist, for recovery experiments.

Labels come from a logistic link on the planted score, ``p = sigmoid((S - c) / T)``,
drawn against a fixed vector of uniforms.  ``c`` is solved so the expected
prevalence matches the request, and ``T`` is bisected until the planted
checklist's AUROC lands on the target.  With ``noise=0`` the labels are the
deterministic rule ``S >= K0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from .data import Dataset, FeatureCatalog, FeatureKind, FeatureSpec, write_table
from .errors import UnreachableTarget
from .evaluation import rule_truth, select_threshold
from .grammar import (
    BinaryTrue,
    CategoricalIn,
    DerivedExpr,
    DerivedThreshold,
    NumericThreshold,
    PercentChange,
    Rule,
    referenced_features,
    rule_to_obj,
    serialize_rule,
    validate_rule,
)

TEMPORAL_VARS = ("hr", "map", "lactate", "creat")
SUFFIXES = ("first", "last", "min", "max")

DEFAULT_PLANTED = (
    NumericThreshold("lactate__last", ">=", 4),
    NumericThreshold("map__last", "<", 65),
    BinaryTrue("ventilated"),
    CategoricalIn("admission_type", frozenset({"emergency"})),
    DerivedThreshold(DerivedExpr("ratio", "hr__last", "map__last"), ">=", 1.4),
    PercentChange("creat__first", "creat__last", 0.5, ">=", "increase"),
)

UNITS = {"hr": "bpm", "map": "mmHg", "lactate": "mmol/L", "creat": "mg/dL"}


@dataclass(frozen=True)
class SynthSpec:
    n: int = 10_000
    prevalence: float = 0.15
    planted: tuple = DEFAULT_PLANTED
    noise: float = 1.0
    target_auroc: float | None = 0.95
    tolerance: float = 0.02
    n_distractors: int = 3
    missing_rate: float = 0.02
    seed: int = 0


@dataclass
class SynthResult:
    dataset: Dataset
    manifest: dict
    files: dict = field(default_factory=dict)


def synth_catalog(n_distractors: int = 3) -> FeatureCatalog:
    specs = [FeatureSpec("age", FeatureKind.NUMERIC, "years")]
    for var in TEMPORAL_VARS:
        for suf in SUFFIXES:
            specs.append(FeatureSpec(f"{var}__{suf}", FeatureKind.NUMERIC, UNITS[var]))
    specs += [
        FeatureSpec("wbc__last", FeatureKind.NUMERIC, "10^9/L"),
        FeatureSpec("temp__last", FeatureKind.NUMERIC, "degC"),
    ]
    specs += [FeatureSpec(f"noise_{i + 1}", FeatureKind.NUMERIC) for i in range(n_distractors)]
    specs += [
        FeatureSpec("admission_type", FeatureKind.CATEGORICAL),
        FeatureSpec("sex", FeatureKind.CATEGORICAL),
        FeatureSpec("ventilated", FeatureKind.BINARY),
        FeatureSpec("diabetes", FeatureKind.BINARY),
        FeatureSpec("copd", FeatureKind.BINARY),
    ]
    return FeatureCatalog(specs)


def _temporal(rng: np.random.Generator, last: np.ndarray, first: np.ndarray, spread: float):
    mid = (first + last) / 2 + rng.normal(0, spread, len(last))
    lo = np.minimum(np.minimum(first, last), mid)
    hi = np.maximum(np.maximum(first, last), mid)
    return {"first": first, "last": last, "min": lo, "max": hi}


def _features(spec: SynthSpec, rng: np.random.Generator) -> tuple[FeatureCatalog, dict]:
    n = spec.n
    cat = synth_catalog(spec.n_distractors)
    cols: dict = {"age": np.round(rng.normal(64, 15, n).clip(18, 100))}
    hr_last = rng.normal(95, 20, n).clip(30, 220)
    map_last = rng.normal(75, 12, n).clip(30, 160)
    lac_last = np.exp(rng.normal(math.log(2.5), 0.6, n))
    creat_first = np.exp(rng.normal(0.0, 0.3, n))
    creat_last = creat_first * np.exp(rng.normal(0.1, 0.35, n))
    series = {
        "hr": (hr_last, hr_last + rng.normal(0, 10, n), 5.0),
        "map": (map_last, map_last + rng.normal(0, 8, n), 4.0),
        "lactate": (lac_last, lac_last * np.exp(rng.normal(0, 0.3, n)), 0.3),
        "creat": (creat_last, creat_first, 0.1),
    }
    for var, (last, first, spread) in series.items():
        for suf, v in _temporal(rng, last, first, spread).items():
            cols[f"{var}__{suf}"] = np.round(v, 2)
    cols["wbc__last"] = np.round(np.exp(rng.normal(math.log(9), 0.4, n)), 1)
    cols["temp__last"] = np.round(rng.normal(37.0, 0.7, n), 1)
    for i in range(spec.n_distractors):
        cols[f"noise_{i + 1}"] = np.round(rng.normal(0, 1, n), 3)
    cols["admission_type"] = rng.choice(np.array(["elective", "urgent", "emergency"], dtype=object), n, p=[0.4, 0.3, 0.3])
    cols["sex"] = rng.choice(np.array(["F", "M"], dtype=object), n)
    cols["ventilated"] = rng.random(n) < 0.25
    cols["diabetes"] = rng.random(n) < 0.3
    cols["copd"] = rng.random(n) < 0.15
    # light missingness on non-planted numeric columns only, so the planted score is fully observed
    planted_cols = {f for r in spec.planted for f in referenced_features(r)}
    out = {}
    for name in cat.names:
        v = cols[name]
        if cat.kind(name) is FeatureKind.NUMERIC and name not in planted_cols and spec.missing_rate > 0:
            v = np.where(rng.random(n) < spec.missing_rate, np.nan, v)
        out[name] = v
    return cat, out


def _mw_auroc(scores: np.ndarray, y: np.ndarray) -> float:
    """Mann-Whitney U via scipy, kept independent of the package's own AUROC."""
    pos, neg = scores[y == 1], scores[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    u = sps.mannwhitneyu(pos, neg, alternative="two-sided", method="asymptotic").statistic
    return float(u) / (len(pos) * len(neg))


def _solve_offset(S: np.ndarray, T: float, prevalence: float) -> float:
    lo, hi = float(S.min()) - 50 * T - 1, float(S.max()) + 50 * T + 1
    for _ in range(100):
        mid = (lo + hi) / 2
        if expit((S - mid) / T).mean() > prevalence:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def _labels(S: np.ndarray, u: np.ndarray, T: float, prevalence: float) -> np.ndarray:
    c = _solve_offset(S, T, prevalence)
    return (u < expit((S - c) / T)).astype(np.int8)


def synth_gen(spec: SynthSpec = SynthSpec(), out_dir: str | Path | None = None) -> SynthResult:
    if spec.n < 10:
        raise ValueError("need at least 10 rows")
    if not 0 < spec.prevalence < 1:
        raise UnreachableTarget("prevalence must lie strictly between 0 and 1")
    rng = np.random.default_rng(spec.seed)
    cat, cols = _features(spec, rng)
    for r in spec.planted:
        validate_rule(r, cat)
    y0 = np.zeros(spec.n, dtype=np.int8)
    base = Dataset.from_arrays(cat, cols, y0)
    S = np.zeros(spec.n, dtype=np.int64)
    for r in spec.planted:
        S += rule_truth(r, base)
    u = rng.random(spec.n)

    temperature = None
    if spec.noise == 0:
        # the K whose positive share is closest to the requested prevalence
        K0 = min(range(1, len(spec.planted) + 1), key=lambda k: (abs((S >= k).mean() - spec.prevalence), k))
        y = (S >= K0).astype(np.int8)
        if y.sum() == 0 or y.sum() == spec.n:
            raise UnreachableTarget("noiseless labels collapse to a single class")
    elif spec.target_auroc is None:
        temperature = float(spec.noise)
        y = _labels(S, u, temperature, spec.prevalence)
    else:
        target = spec.target_auroc
        lo, hi = 1e-3, 50.0
        a_lo = _mw_auroc(S, _labels(S, u, lo, spec.prevalence))
        a_hi = _mw_auroc(S, _labels(S, u, hi, spec.prevalence))
        if not a_hi - spec.tolerance <= target <= a_lo + spec.tolerance:
            raise UnreachableTarget(
                f"target AUROC {target} outside achievable range [{a_hi:.3f}, {a_lo:.3f}] at this prevalence"
            )
        for _ in range(60):
            mid = math.sqrt(lo * hi)
            a = _mw_auroc(S, _labels(S, u, mid, spec.prevalence))
            if a > target:
                lo = mid
            else:
                hi = mid
        temperature = math.sqrt(lo * hi)
        y = _labels(S, u, temperature, spec.prevalence)

    achieved = _mw_auroc(S, y)
    if math.isnan(achieved):
        raise UnreachableTarget("labels collapse to a single class")
    if spec.noise != 0 and spec.target_auroc is not None and abs(achieved - spec.target_auroc) > spec.tolerance:
        raise UnreachableTarget(f"achieved AUROC {achieved:.4f} misses target {spec.target_auroc}")
    K, _ = select_threshold(S, y, max_score=len(spec.planted))
    groups = [f"p{i:06d}" for i in range(spec.n)]
    d = Dataset.from_arrays(cat, cols, y, groups)
    manifest = {
        "n": spec.n,
        "seed": spec.seed,
        "prevalence_target": spec.prevalence,
        "prevalence": float(y.mean()),
        "positives": int(y.sum()),
        "noise": spec.noise,
        "temperature": temperature,
        "target_auroc": spec.target_auroc if spec.noise != 0 else None,
        "achieved_auroc": achieved,
        "K": int(K),
        "planted": [rule_to_obj(r) for r in spec.planted],
    }
    result = SynthResult(d, manifest)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"data": out / "cohort.csv", "schema": out / "schema.json", "manifest": out / "manifest.json"}
        write_table(files["data"], d, label="label", group="group")
        files["schema"].write_text(json.dumps({"features": cat.to_mapping()}, indent=2) + "\n")
        files["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        result.files = {k: str(v) for k, v in files.items()}
    return result


def planted_rules(manifest: dict) -> list[Rule]:
    from .grammar import rule_from_obj

    return [rule_from_obj(o, max_depth=None) for o in manifest["planted"]]


def describe(manifest: dict) -> str:
    lines = [f"n={manifest['n']} prevalence={manifest['prevalence']:.4f} AUROC={manifest['achieved_auroc']:.4f} K={manifest['K']}"]
    lines += [f"  {serialize_rule(r)}" for r in planted_rules(manifest)]
    return "\n".join(lines)
