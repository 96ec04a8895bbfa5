"""Retained-rule pool and the deterministic retention gate."""

from __future__ import annotations

import base64
import dataclasses
import enum
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .data import Dataset, FeatureStats
from .errors import ConfigError, PoolIOError, RuleError, SplitViolation, UnusableStats
from .evaluation import CoverageMask, binary_auroc, evaluate_rule, label_mask
from .grammar import Rule, RuleFamily, parse_rule, rule_family, serialize_rule

log = logging.getLogger(__name__)

CONSTRUCTION = "construction"
VALIDATION = "validation"
TEST = "test"


@dataclass(frozen=True)
class PipelineConfig:
    """Run hyperparameters; the defaults are the reference settings for gating, refinement and CV."""

    max_rules: int = 6
    iterations: int = 100
    auc_threshold: float = 0.60
    jaccard_threshold: float = 0.9
    min_pos_gain: float = 0.01
    refine_steps: int = 10
    refine_phases: int = 2
    logic_depth: int = 1
    objective: str = "youden"
    batch_size: int = 3
    seed: int = 0
    folds: int = 5
    val_fraction: float = 0.2
    temperature: float = 1.0
    # "auroc": a similar rule is kept if it beats the incumbent's AUROC by min_pos_gain;
    # "coverage": if it adds at least min_pos_gain (fraction of positives) of positive coverage.
    gain_mode: str = "auroc"
    use_jaccard: bool = True
    diversity: bool = True
    diversity_targets: Mapping[str, int] | None = None
    assembly: str = "greedy"
    exhaustive_cap: int = 200_000
    spec_floor: float = 0.8

    def __post_init__(self):
        if not 0.5 <= self.auc_threshold < 1:
            raise ConfigError("auc_threshold must lie in [0.5, 1)")
        if not 0 < self.jaccard_threshold <= 1:
            raise ConfigError("jaccard_threshold must lie in (0, 1]")
        if self.max_rules < 1:
            raise ConfigError("max_rules must be at least 1")
        if self.logic_depth < 0:
            raise ConfigError("logic_depth must be non-negative")
        if self.iterations < 0 or self.refine_steps < 0 or self.refine_phases < 0:
            raise ConfigError("iterations and refinement budgets must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.gain_mode not in ("auroc", "coverage"):
            raise ConfigError("gain_mode must be 'auroc' or 'coverage'")
        if self.assembly not in ("greedy", "exhaustive", "agent"):
            raise ConfigError("assembly must be greedy, exhaustive or agent")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["diversity_targets"] is not None:
            out["diversity_targets"] = dict(sorted(out["diversity_targets"].items()))
        return out

    def gate_hash(self) -> str:
        """Hash of every setting the retention gate depends on."""
        keys = ("auc_threshold", "jaccard_threshold", "min_pos_gain", "gain_mode", "use_jaccard")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class RejectReason(str, enum.Enum):
    LOW_AUROC = "LowAuroc"
    REDUNDANT = "Redundant"
    DUPLICATE = "Duplicate"
    UNUSABLE_STATS = "UnusableStats"


@dataclass(frozen=True)
class RuleRecord:
    rule: Rule
    family: RuleFamily
    auroc_con: float
    mask_con: CoverageMask
    pos_count: int
    ordinal: int
    # J+ with, and ordinal of, the most similar earlier record at acceptance time
    max_jaccard: float = 0.0
    most_similar: int | None = None


@dataclass(frozen=True)
class Accept:
    record: RuleRecord


@dataclass(frozen=True)
class Reject:
    reason: RejectReason
    detail: str = ""
    auroc: float | None = None


Verdict = Union[Accept, Reject]

ALL_FAMILIES = tuple(RuleFamily)


class RulePool:
    """Append-only ordered pool of retained rules with cached construction-split masks."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.records: list[RuleRecord] = []
        self._rules: set = set()
        self._pos_words: list[np.ndarray] = []
        self._pos_stack: np.ndarray | None = None
        self._pos_counts: list[int] = []
        self.load_warnings: list[str] = []

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, rule: object) -> bool:
        return rule in self._rules

    @property
    def rules(self) -> list:
        return [r.rule for r in self.records]

    def family_counts(self) -> dict:
        counts = {f: 0 for f in ALL_FAMILIES}
        for r in self.records:
            counts[r.family] += 1
        return counts

    def record_for(self, rule: Rule) -> RuleRecord:
        for r in self.records:
            if r.rule == rule:
                return r
        raise KeyError(serialize_rule(rule))

    # -- retention gate ----------------------------------------------------

    def consider(self, candidate: Rule, d_con: Dataset, stats: FeatureStats | None) -> Verdict:
        """Run the statistical gate on the construction split without mutating the pool."""
        if d_con.split != CONSTRUCTION:
            raise SplitViolation(f"retention gate reads only the construction split, got {d_con.split!r}")
        cfg = self.config
        try:
            mask = evaluate_rule(candidate, d_con, stats)
        except (UnusableStats, RuleError) as exc:
            return Reject(RejectReason.UNUSABLE_STATS, str(exc))
        pos = label_mask(d_con.y, d_con.split)
        P = pos.count
        N = d_con.n - P
        tp = mask.intersection_count(pos)
        fp = mask.count - tp
        auc = binary_auroc(tp, fp, P, N)
        if auc < cfg.auc_threshold:
            return Reject(RejectReason.LOW_AUROC, f"AUROC {auc:.4f} < {cfg.auc_threshold}", auc)
        if candidate in self._rules:
            return Reject(RejectReason.DUPLICATE, "structurally identical rule already retained", auc)

        pos_words = mask.words & pos.words
        best_j, best_i = self._most_similar(pos_words, tp)
        if cfg.use_jaccard and best_i is not None and best_j > cfg.jaccard_threshold:
            inc = self.records[best_i]
            if not self._beats(auc, tp, inc, P):
                return Reject(
                    RejectReason.REDUNDANT,
                    f"J+ {best_j:.4f} > {cfg.jaccard_threshold} with rule #{inc.ordinal}",
                    auc,
                )
        record = RuleRecord(
            rule=candidate,
            family=rule_family(candidate),
            auroc_con=auc,
            mask_con=mask,
            pos_count=tp,
            ordinal=len(self.records),
            max_jaccard=best_j,
            most_similar=None if best_i is None else self.records[best_i].ordinal,
        )
        return Accept(record)

    def _most_similar(self, pos_words: np.ndarray, pos_count: int) -> tuple[float, int | None]:
        if not self.records:
            return 0.0, None
        if self._pos_stack is None or len(self._pos_stack) != len(self._pos_words):
            self._pos_stack = np.vstack(self._pos_words)
        inter = np.bitwise_count(self._pos_stack & pos_words).sum(axis=1).astype(np.int64)
        union = np.asarray(self._pos_counts, dtype=np.int64) + pos_count - inter
        j = np.where(union == 0, 1.0, inter / np.where(union == 0, 1, union))
        i = int(np.argmax(j))  # first maximum: earliest ordinal wins ties
        return float(j[i]), i

    def _beats(self, auc: float, pos_count: int, incumbent: RuleRecord, P: int) -> bool:
        cfg = self.config
        if cfg.gain_mode == "auroc":
            return auc - incumbent.auroc_con >= cfg.min_pos_gain
        return (pos_count - incumbent.pos_count) / P >= cfg.min_pos_gain

    def admit(self, verdict: Accept) -> RuleRecord:
        """Append an accepted record; the single-writer step that assigns ordinals."""
        rec = verdict.record
        if rec.ordinal != len(self.records):
            raise ValueError(f"stale verdict: ordinal {rec.ordinal}, pool size {len(self.records)}")
        if rec.rule in self._rules:
            raise ValueError("duplicate rule")
        self._append(rec)
        return rec

    def _append(self, rec: RuleRecord) -> None:
        self.records.append(rec)
        self._rules.add(rec.rule)
        # full masks suffice: candidates are positive-restricted before intersecting
        self._pos_words.append(rec.mask_con.words)
        self._pos_counts.append(rec.pos_count)

    def offer(self, candidate: Rule, d_con: Dataset, stats: FeatureStats | None) -> Verdict:
        """consider + admit in one step (no plausibility review)."""
        v = self.consider(candidate, d_con, stats)
        if isinstance(v, Accept):
            self.admit(v)
        return v

    # -- audit ---------------------------------------------------------------

    def audit(self, labels) -> list[str]:
        """Re-check every pool invariant from stored masks and metrics; returns violations."""
        cfg = self.config
        problems = []
        if [r.ordinal for r in self.records] != list(range(len(self.records))):
            problems.append("ordinals are not 0..n-1 in order")
        if len({r.rule for r in self.records}) != len(self.records):
            problems.append("structurally identical rules retained")
        if len(self.records) == 0:
            return problems
        pos = label_mask(labels, self.records[0].mask_con.split)
        P = pos.count
        for j, rec in enumerate(self.records):
            if rec.auroc_con < cfg.auc_threshold:
                problems.append(f"#{j}: AUROC {rec.auroc_con} below threshold")
            if rec.family is not rule_family(rec.rule):
                problems.append(f"#{j}: family tag mismatch")
            if not cfg.use_jaccard or j == 0:
                continue
            cj = rec.mask_con.words & pos.words
            best, best_i = -1.0, None
            for i in range(j):
                ci = self.records[i].mask_con.words & pos.words
                union = int(np.bitwise_count(ci | cj).sum())
                jac = 1.0 if union == 0 else int(np.bitwise_count(ci & cj).sum()) / union
                if jac > best:
                    best, best_i = jac, i
            if best > cfg.jaccard_threshold and not self._beats(
                rec.auroc_con, rec.pos_count, self.records[best_i], P
            ):
                problems.append(
                    f"#{j}: J+ {best:.4f} with #{best_i} exceeds {cfg.jaccard_threshold} without the required gain"
                )
        return problems

    # -- persistence ---------------------------------------------------------

    def snapshot(self, path: str | Path) -> None:
        """Write the pool as JSON lines: one header, then one line per record."""
        lines = [
            json.dumps(
                {
                    "kind": "header",
                    "config_hash": self.config.gate_hash(),
                    "config": self.config.to_dict(),
                    "records": len(self.records),
                },
                sort_keys=True,
            )
        ]
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "kind": "record",
                        "ordinal": r.ordinal,
                        "rule": serialize_rule(r.rule),
                        "family": r.family.value,
                        "auroc_con": r.auroc_con,
                        "pos_count": r.pos_count,
                        "max_jaccard": r.max_jaccard,
                        "most_similar": r.most_similar,
                        "mask": {
                            "n": r.mask_con.n,
                            "split": r.mask_con.split,
                            "words": base64.b64encode(r.mask_con.words.astype("<u8").tobytes()).decode(),
                        },
                    },
                    sort_keys=True,
                )
            )
        try:
            Path(path).write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise PoolIOError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, config: PipelineConfig | None = None) -> "RulePool":
        """Rebuild a pool from a snapshot.

        If ``config`` is given and its gate hash differs from the file's, the
        pool still loads (with the caller's config) and a warning is recorded
        in ``load_warnings``.
        """
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise PoolIOError(str(exc)) from exc
        header = json.loads(lines[0])
        file_cfg = PipelineConfig.from_mapping(header["config"])
        pool = cls(config or file_cfg)
        if config is not None and config.gate_hash() != header["config_hash"]:
            msg = f"config hash mismatch: file {header['config_hash']}, current {config.gate_hash()}"
            pool.load_warnings.append(msg)
            log.warning(msg)
        for line in lines[1:]:
            obj = json.loads(line)
            m = obj["mask"]
            words = np.frombuffer(base64.b64decode(m["words"]), dtype="<u8").astype(np.uint64)
            rec = RuleRecord(
                rule=parse_rule(obj["rule"], max_depth=None),
                family=RuleFamily(obj["family"]),
                auroc_con=obj["auroc_con"],
                mask_con=CoverageMask(words, m["n"], m["split"]),
                pos_count=obj["pos_count"],
                ordinal=obj["ordinal"],
                max_jaccard=obj["max_jaccard"],
                most_similar=obj["most_similar"],
            )
            pool._append(rec)
        return pool

    def state(self) -> list[tuple]:
        """Comparable summary of pool contents (rules, metrics, masks, ordinals)."""
        return [
            (serialize_rule(r.rule), r.auroc_con, r.pos_count, r.ordinal, r.mask_con.words.tobytes())
            for r in self.records
        ]


def diversity_guidance(pool: RulePool, targets: Mapping | None = None, enabled: bool = True) -> list[RuleFamily]:
    """Families whose retained count is below target, in grammar order.

    Default target is one rule per family.  Disabled guidance returns an empty
    list, which reproduces the no-diversity configuration.
    """
    if not enabled:
        return []
    if targets is None:
        targets = pool.config.diversity_targets
    if targets is None:
        targets = {f: 1 for f in ALL_FAMILIES}
    targets = {RuleFamily(k): v for k, v in targets.items()}
    counts = pool.family_counts()
    return [f for f in ALL_FAMILIES if counts[f] < targets.get(f, 0)]
