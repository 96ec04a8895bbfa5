"""Learn unit-weighted N-of-M clinical checklists with tool-mediated rule proposal."""

from .assembly import Checklist, assemble, card_json, finalize, refine, render_card
from .data import (
    Dataset,
    FeatureCatalog,
    FeatureKind,
    FeatureSpec,
    FeatureStats,
    derive_temporal,
    fit_feature_stats,
    inner_split,
    load_table,
    stratified_group_kfold,
)
from .evaluation import (
    CoverageMask,
    auroc,
    evaluate_rule,
    jaccard_positive,
    paired_comparison,
    risk_table,
    rule_truth,
    score_checklist,
    select_threshold,
)
from .grammar import estimate_rule_space, parse_rule, rule_text, serialize_rule, validate_rule
from .pipeline import replay_run, run_cv, sweep_rule_budget
from .pool import PipelineConfig, RulePool
from .synth import SynthSpec, synth_gen

__version__ = "0.1.0"

__all__ = [
    "Checklist",
    "CoverageMask",
    "Dataset",
    "FeatureCatalog",
    "FeatureKind",
    "FeatureSpec",
    "FeatureStats",
    "PipelineConfig",
    "RulePool",
    "SynthSpec",
    "assemble",
    "auroc",
    "card_json",
    "derive_temporal",
    "estimate_rule_space",
    "evaluate_rule",
    "finalize",
    "fit_feature_stats",
    "inner_split",
    "jaccard_positive",
    "load_table",
    "paired_comparison",
    "parse_rule",
    "refine",
    "render_card",
    "replay_run",
    "risk_table",
    "rule_text",
    "rule_truth",
    "run_cv",
    "score_checklist",
    "select_threshold",
    "serialize_rule",
    "stratified_group_kfold",
    "sweep_rule_budget",
    "synth_gen",
    "validate_rule",
]
