"""Aggregate-only view of the construction split handed to rule proposers.

Nothing returned from :class:`ToolInterface` is row-level: every method
returns counts, rates, quantiles or rule metadata.  Proposers never receive
the Dataset itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from ..data import QUANTILE_GRID, Dataset, FeatureKind, FeatureStats
from ..errors import RuleError, UnknownFeature, UnusableStats
from ..evaluation import binary_auroc, rule_truth
from ..grammar import Rule, RuleFamily, serialize_rule
from ..pool import PipelineConfig, RulePool, diversity_guidance


class Expression(NamedTuple):
    """A numeric quantity a threshold can be placed on.

    kind is ``feature`` (left only), ``ratio``/``difference`` (left op right)
    or ``pct_change`` ((right - left) / left, i.e. t0=left, t1=right).
    """

    kind: str
    left: str
    right: str | None = None


class ToolInterface:
    def __init__(self, data: Dataset, stats: FeatureStats, pool: RulePool | None = None,
                 config: PipelineConfig | None = None):
        self._data = data
        self._stats = stats
        self._pool = pool
        self._config = config or (pool.config if pool is not None else PipelineConfig())
        self._y = data.y.astype(bool)
        self._P = int(self._y.sum())
        self._N = int(len(self._y) - self._P)
        self.calls = 0

    # -- metadata ------------------------------------------------------------

    def catalog(self) -> list[dict]:
        self.calls += 1
        out = []
        for spec in self._data.catalog:
            entry = {"name": spec.name, "kind": spec.kind.value}
            if spec.unit:
                entry["unit"] = spec.unit
            if spec.description:
                entry["description"] = spec.description
            out.append(entry)
        return out

    def names(self, kind: FeatureKind) -> tuple:
        return self._data.catalog.of_kind(kind)

    def usable_numeric(self) -> tuple:
        return tuple(n for n in self.names(FeatureKind.NUMERIC) if self._stats.has_numeric(n))

    def feature_summary(self, name: str) -> dict:
        self.calls += 1
        if name not in self._data.catalog:
            raise UnknownFeature(name)
        return self._stats.digest(name)

    def category_counts(self, name: str) -> dict:
        self.calls += 1
        return dict(self._stats.categories.get(name, {}))

    def prevalence(self) -> dict:
        return {"n": len(self._y), "positives": self._P}

    # -- aggregate evaluation ------------------------------------------------

    def evaluate_candidate(self, rule: Rule) -> dict:
        """AUROC and coverage counts of a rule on the construction split."""
        self.calls += 1
        try:
            fires = rule_truth(rule, self._data, self._stats)
        except (UnusableStats, RuleError) as exc:
            return {"error": str(exc)}
        tp = int(np.count_nonzero(fires & self._y))
        fp = int(np.count_nonzero(fires)) - tp
        return {
            "auroc": binary_auroc(tp, fp, self._P, self._N),
            "coverage": tp + fp,
            "pos_coverage": tp,
        }

    def _values(self, expr: Expression) -> np.ndarray:
        cols, miss = self._data.columns, self._data.missing
        for name in (expr.left, expr.right):
            if name is not None and name not in self._data.catalog:
                raise UnknownFeature(name)
        a = np.where(miss[expr.left], np.nan, cols[expr.left]).astype(float)
        if expr.kind == "feature":
            return a
        b = np.where(miss[expr.right], np.nan, cols[expr.right]).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if expr.kind == "ratio":
                return np.where(b == 0, np.nan, a / b)
            if expr.kind == "difference":
                return a - b
            if expr.kind == "pct_change":
                return np.where(a == 0, np.nan, (b - a) / a)
        raise ValueError(f"unknown expression kind {expr.kind!r}")

    def expression_quantiles(self, expr: Expression, grid: Sequence[float] = QUANTILE_GRID) -> list[float]:
        """Quantiles of a derived quantity over rows where it is defined; empty if never defined."""
        self.calls += 1
        v = self._values(expr)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return []
        return [float(x) for x in np.quantile(v, list(grid), method="linear")]

    def scan_thresholds(self, expr: Expression, cuts: Sequence[float], ops: Sequence[str] = (">=", "<")) -> list[dict]:
        """AUROC and coverage of ``expr op cut`` for every (op, cut) pair.

        Rows where the expression is undefined never fire.
        """
        self.calls += 1
        v = self._values(expr)
        ok = ~np.isnan(v)
        pos = np.sort(v[ok & self._y])
        neg = np.sort(v[ok & ~self._y])
        c = np.asarray(cuts, dtype=float)
        out = []
        for op in ops:
            if op == ">=":
                tp = len(pos) - np.searchsorted(pos, c, "left")
                fp = len(neg) - np.searchsorted(neg, c, "left")
            elif op == ">":
                tp = len(pos) - np.searchsorted(pos, c, "right")
                fp = len(neg) - np.searchsorted(neg, c, "right")
            elif op == "<":
                tp = np.searchsorted(pos, c, "left")
                fp = np.searchsorted(neg, c, "left")
            else:
                tp = np.searchsorted(pos, c, "right")
                fp = np.searchsorted(neg, c, "right")
            for cut, t, f in zip(c, tp, fp):
                out.append({
                    "op": op,
                    "cut": float(cut),
                    "auroc": binary_auroc(int(t), int(f), self._P, self._N),
                    "coverage": int(t + f),
                })
        return out

    # -- pool --------------------------------------------------------------

    def pool_summary(self) -> list[dict]:
        self.calls += 1
        if self._pool is None:
            return []
        return [
            {
                "rule": serialize_rule(r.rule),
                "family": r.family.value,
                "auroc": r.auroc_con,
                "pos_coverage": r.pos_count,
            }
            for r in self._pool.records
        ]

    def pool_rules(self) -> list:
        """Retained rules with their construction AUROC, best first."""
        if self._pool is None:
            return []
        recs = sorted(self._pool.records, key=lambda r: (-r.auroc_con, r.ordinal))
        return [(r.rule, r.auroc_con) for r in recs]

    def in_pool(self, rule: Rule) -> bool:
        return self._pool is not None and rule in self._pool

    def diversity_guidance(self) -> list[RuleFamily]:
        if self._pool is None:
            return list(RuleFamily)
        return diversity_guidance(self._pool, enabled=self._config.diversity)


@dataclass(frozen=True)
class ProposalContext:
    task_description: str
    variable_list: str
    analysis_context: str
    tool_summaries: str
    guidance: tuple = ()
    feedback: Mapping[str, int] = field(default_factory=dict)
    auc_threshold: float = 0.6
    logic_depth: int = 1
    tools: ToolInterface | None = field(default=None, repr=False, compare=False)

    def prompt_fields(self) -> dict:
        """The text fields substituted into the proposal prompt."""
        return {
            "task_description": self.task_description,
            "variable_list": self.variable_list,
            "analysis_context": self.analysis_context,
            "tool_summaries": self.tool_summaries,
            "auc_threshold": f"{self.auc_threshold:g}",
        }


def build_context(
    tools: ToolInterface,
    task_description: str = "",
    feedback: Mapping[str, int] | None = None,
    config: PipelineConfig | None = None,
) -> ProposalContext:
    """Assemble the proposer context exclusively from tool outputs."""
    cfg = config or tools._config
    catalog = tools.catalog()
    var_lines = []
    insights = {}
    for entry in catalog:
        line = f"{entry['name']} ({entry['kind']}"
        if entry.get("unit"):
            line += f", {entry['unit']}"
        line += ")"
        if entry.get("description"):
            line += f": {entry['description']}"
        var_lines.append(line)
        insights[entry["name"]] = tools.feature_summary(entry["name"])
    prev = tools.prevalence()
    analysis = json.dumps(
        {"outcome": {"n": prev["n"], "prevalence": prev["positives"] / max(prev["n"], 1)}, "features": insights},
        sort_keys=True,
        indent=None,
    )
    guidance = tuple(tools.diversity_guidance())
    summary = {
        "retained_rules": tools.pool_summary(),
        "under_represented_families": [g.value for g in guidance],
        "feedback": dict(sorted((feedback or {}).items())),
    }
    return ProposalContext(
        task_description=task_description,
        variable_list="\n".join(var_lines),
        analysis_context=analysis,
        tool_summaries=json.dumps(summary, sort_keys=True),
        guidance=guidance,
        feedback=dict(feedback or {}),
        auc_threshold=cfg.auc_threshold,
        logic_depth=cfg.logic_depth,
        tools=tools,
    )
