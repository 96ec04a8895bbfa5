import dataclasses

import numpy as np
import pytest

from checkscore.data import Dataset, FeatureCatalog, FeatureKind, FeatureSpec
from checkscore.errors import ConfigError, PoolIOError, SplitViolation
from checkscore.grammar import BinaryTrue, Logical, RuleFamily, ZScoreThreshold
from checkscore.pool import (
    CONSTRUCTION,
    Accept,
    PipelineConfig,
    Reject,
    RejectReason,
    RulePool,
    diversity_guidance,
)

# 10 rows, 5 positives (rows 0-4).  Each flag's coverage is written out so
# AUROC = (1 + TPR - FPR) / 2 and J+ can be checked by hand.
Y = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
FLAGS = {
    "base": [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],   # TPR .8 FPR 0  -> AUROC .90
    "twin": [1, 1, 1, 1, 0, 1, 0, 0, 0, 0],   # same positives, one FP -> .80, J+ 1
    "better": [1, 1, 1, 1, 1, 0, 0, 0, 0, 0],  # J+ with base .8 (not > .9) -> 1.0
    "weak": [1, 0, 0, 0, 0, 1, 0, 0, 0, 0],   # TPR .2 FPR .2 -> .50
    "other": [0, 0, 0, 1, 1, 0, 0, 0, 0, 0],  # TPR .4 FPR 0 -> .70
}


def flag_data(split=CONSTRUCTION):
    cat = FeatureCatalog([FeatureSpec(k, FeatureKind.BINARY) for k in FLAGS])
    return Dataset.from_arrays(cat, FLAGS, Y, split=split)


def test_gate_reasons_and_order():
    d = flag_data()
    pool = RulePool()
    v = pool.offer(BinaryTrue("base"), d, None)
    assert isinstance(v, Accept) and v.record.auroc_con == pytest.approx(0.9)
    assert pool.consider(BinaryTrue("weak"), d, None).reason is RejectReason.LOW_AUROC
    assert pool.consider(BinaryTrue("base"), d, None).reason is RejectReason.DUPLICATE
    r = pool.consider(BinaryTrue("twin"), d, None)
    assert r.reason is RejectReason.REDUNDANT and r.auroc == pytest.approx(0.8)
    assert isinstance(pool.offer(BinaryTrue("other"), d, None), Accept)
    assert pool.rules == [BinaryTrue("base"), BinaryTrue("other")]
    assert [rec.ordinal for rec in pool] == [0, 1]


def test_low_auroc_checked_before_duplicate():
    d = flag_data()
    pool = RulePool(PipelineConfig(auc_threshold=0.95))
    # even a structurally identical rule reports LowAuroc first
    pool._append(pool.consider(BinaryTrue("better"), d, None).record)
    assert pool.consider(BinaryTrue("base"), d, None).reason is RejectReason.LOW_AUROC


def test_redundancy_gain_exception():
    d = flag_data()
    # a twin that is more discriminative than the incumbent clears the gain bar
    pool = RulePool()
    pool.offer(BinaryTrue("twin"), d, None)
    v = pool.consider(BinaryTrue("base"), d, None)
    assert isinstance(v, Accept) and v.record.max_jaccard == 1.0 and v.record.most_similar == 0
    strict = RulePool(PipelineConfig(min_pos_gain=0.2))
    strict.offer(BinaryTrue("twin"), d, None)
    assert strict.consider(BinaryTrue("base"), d, None).reason is RejectReason.REDUNDANT


def test_coverage_gain_mode():
    d = flag_data()
    pool = RulePool(PipelineConfig(gain_mode="coverage", jaccard_threshold=0.75))
    pool.offer(BinaryTrue("base"), d, None)
    # better covers one more positive of five: gain .2 >= .01
    assert isinstance(pool.consider(BinaryTrue("better"), d, None), Accept)
    pool2 = RulePool(PipelineConfig(gain_mode="coverage", jaccard_threshold=0.75))
    pool2.offer(BinaryTrue("better"), d, None)
    assert pool2.consider(BinaryTrue("base"), d, None).reason is RejectReason.REDUNDANT


def test_without_jaccard_only_auroc_and_duplicates_filter():
    d = flag_data()
    pool = RulePool(PipelineConfig(use_jaccard=False))
    for name in ("base", "twin", "better", "weak", "other"):
        pool.offer(BinaryTrue(name), d, None)
    assert [r.feature for r in pool.rules] == ["base", "twin", "better", "other"]
    assert pool.audit(d.y) == []


def test_unusable_stats_rejected():
    cat = FeatureCatalog([FeatureSpec("x", FeatureKind.NUMERIC)])
    d = Dataset.from_arrays(cat, {"x": np.arange(10.0)}, Y, split=CONSTRUCTION)
    v = RulePool().consider(ZScoreThreshold("x", ">", 1), d, None)
    assert isinstance(v, Reject) and v.reason is RejectReason.UNUSABLE_STATS


def test_gate_reads_only_construction_split():
    with pytest.raises(SplitViolation):
        RulePool().consider(BinaryTrue("base"), flag_data("validation"), None)


def test_admit_rejects_stale_verdict():
    d = flag_data()
    pool = RulePool()
    a = pool.consider(BinaryTrue("base"), d, None)
    b = pool.consider(BinaryTrue("other"), d, None)
    pool.admit(a)
    with pytest.raises(ValueError):
        pool.admit(b)


def test_audit_detects_tampering():
    d = flag_data()
    pool = RulePool()
    pool.offer(BinaryTrue("base"), d, None)
    twin = RulePool(PipelineConfig(use_jaccard=False)).consider(BinaryTrue("twin"), d, None).record
    pool._append(dataclasses.replace(twin, ordinal=1))
    problems = pool.audit(d.y)
    assert any("J+" in p for p in problems)


def test_snapshot_round_trip(tmp_path):
    d = flag_data()
    pool = RulePool()
    for name in ("base", "other", "better"):
        pool.offer(BinaryTrue(name), d, None)
    pool.offer(Logical("or", (BinaryTrue("other"), BinaryTrue("weak"))), d, None)
    path = tmp_path / "pool.jsonl"
    pool.snapshot(path)
    back = RulePool.load(path)
    assert back.state() == pool.state()
    assert back.load_warnings == []
    other = RulePool.load(path, PipelineConfig(auc_threshold=0.7))
    assert other.load_warnings and other.state() == pool.state()
    with pytest.raises(PoolIOError):
        RulePool.load(tmp_path / "missing.jsonl")


def test_diversity_guidance():
    d = flag_data()
    pool = RulePool()
    assert diversity_guidance(pool) == list(RuleFamily)
    pool.offer(BinaryTrue("base"), d, None)
    assert RuleFamily.BINARY not in diversity_guidance(pool)
    assert diversity_guidance(pool, enabled=False) == []
    assert diversity_guidance(pool, {"binary": 2, "range": 0}) == [RuleFamily.BINARY]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"auc_threshold": 0.4},
        {"jaccard_threshold": 0},
        {"max_rules": 0},
        {"iterations": -1},
        {"gain_mode": "area"},
        {"assembly": "random"},
        {"folds": 1},
        {"val_fraction": 1.0},
        {"batch_size": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        PipelineConfig(**kwargs)


def test_config_from_mapping():
    assert PipelineConfig.from_mapping({"max_rules": 4}).max_rules == 4
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"max_ruls": 4})
    a, b = PipelineConfig(), PipelineConfig(refine_steps=3)
    assert a.gate_hash() == b.gate_hash()
    assert a.gate_hash() != PipelineConfig(min_pos_gain=0.02).gate_hash()


def test_defaults():
    c = PipelineConfig()
    assert (c.max_rules, c.iterations, c.auc_threshold, c.jaccard_threshold, c.min_pos_gain) == (6, 100, 0.6, 0.9, 0.01)
    assert (c.refine_steps, c.logic_depth, c.batch_size) == (10, 1, 3)
