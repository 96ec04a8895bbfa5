"""Cross-validated runs: rule-pool generation, checklist assembly, held-out evaluation.

Every candidate a proposer emits is written to a JSON-lines transcript along
with its gate outcome, and every remote completion is recorded too.  Replaying
a transcript with proposers disabled rebuilds identical pools and checklists.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .assembly import Checklist, SubsetScorer, assemble, card_json, finalize, refine
from .data import Dataset, FeatureStats, fit_feature_stats, inner_split, stratified_group_kfold
from .errors import BudgetExhausted, CheckscoreError, ConfigError, EmptyPool, TransportError
from .evaluation import aggregate, binary_auroc, evaluate_rule, label_mask, report_at, rule_truth
from .grammar import parse_rule, rule_family, serialize_rule
from .pool import CONSTRUCTION, TEST, VALIDATION, Accept, PipelineConfig, Reject, RulePool, RuleRecord
from .proposal.heuristic import Candidate, HeuristicProposer
from .proposal.remote import CallBudget, ChatClient, EndpointConfig, RemoteProposer, plausibility_gate
from .proposal.tools import ToolInterface, build_context

log = logging.getLogger(__name__)

ABLATIONS = ("full", "single_pass", "no_jaccard", "no_diversity", "llm_only")


def apply_ablation(cfg: PipelineConfig, ablation: str) -> PipelineConfig:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    if ablation == "single_pass":
        return dataclasses.replace(cfg, refine_steps=0)
    if ablation == "no_jaccard":
        return dataclasses.replace(cfg, use_jaccard=False)
    if ablation == "no_diversity":
        return dataclasses.replace(cfg, diversity=False)
    return cfg


# ---------------------------------------------------------------------------
# transcript
# ---------------------------------------------------------------------------

class Transcript:
    """Append-only event log, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.events: list[dict] = []
        self._fh = open(path, "w") if path is not None else None

    def write(self, event: dict) -> None:
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def load(path: str | Path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


class RecordingClient:
    """Wraps a chat client and logs every completion (or failure) to the transcript."""

    def __init__(self, inner: ChatClient, transcript: Transcript, fold: int):
        self.inner = inner
        self.transcript = transcript
        self.fold = fold
        self.budget = inner.budget

    def complete(self, prompt: str, kind: str) -> str:
        try:
            text = self.inner.complete(prompt, kind)
        except (TransportError, BudgetExhausted) as exc:
            self.transcript.write({"event": "completion", "fold": self.fold, "kind": kind,
                                   "error": type(exc).__name__, "detail": str(exc)})
            raise
        self.transcript.write({"event": "completion", "fold": self.fold, "kind": kind, "response": text})
        return text


class ReplayClient:
    """Serves recorded completions back in order, per purpose."""

    def __init__(self, events: Iterable[dict]):
        self._queues: dict = defaultdict(list)
        for e in events:
            self._queues[e["kind"]].append(e)
        self.budget = CallBudget(caps={k: 10**9 for k in ("proposal", "plausibility", "assembly")})

    def complete(self, prompt: str, kind: str) -> str:
        q = self._queues[kind]
        if not q:
            raise TransportError(f"transcript has no further {kind} completions")
        e = q.pop(0)
        if "error" in e:
            raise BudgetExhausted(e["detail"]) if e["error"] == "BudgetExhausted" else TransportError(e["detail"])
        return e["response"]


class ReplayProposer:
    name = "replay"

    def __init__(self, events: Iterable[dict]):
        self._by_iter: dict = defaultdict(list)
        for e in events:
            self._by_iter[e["iteration"]].append(e)

    def propose(self, ctx, batch, seed) -> list[Candidate]:
        it = seed[-1]
        out = []
        for e in self._by_iter.get(it, []):
            rule = parse_rule(e["rule"], max_depth=None) if e.get("rule") else None
            out.append(Candidate(e["source"], e["raw"], rule, e.get("error")))
        return out


# ---------------------------------------------------------------------------
# run settings and held-out access
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSettings:
    proposer: str = "heuristic"  # heuristic | remote
    plausibility: str = "accept_all"  # accept_all | remote
    ablation: str = "full"
    endpoint: EndpointConfig | None = None
    task_description: str = ""

    def __post_init__(self):
        if self.proposer not in ("heuristic", "remote"):
            raise ConfigError("proposer must be 'heuristic' or 'remote'")
        if self.plausibility not in ("accept_all", "remote"):
            raise ConfigError("plausibility must be 'accept_all' or 'remote'")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")

    @property
    def needs_remote(self) -> bool:
        return self.proposer == "remote" or self.plausibility == "remote" or self.ablation == "llm_only"


class HeldOutSplit:
    """Access-counting wrapper around a test fold."""

    def __init__(self, d: Dataset):
        self._d = d
        self.reads = 0

    def read(self) -> Dataset:
        self.reads += 1
        return self._d


@dataclass
class FoldState:
    fold: int
    d_con: Dataset
    d_val: Dataset
    stats: FeatureStats
    pool: RulePool
    tallies: dict
    calls: dict


@dataclass
class FoldResult:
    fold: int
    checklist: Checklist
    val_auroc: float
    test: dict
    pool_size: int
    tallies: dict
    calls: dict
    test_reads: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "checklist": json.loads(card_json(self.checklist)),
            "rules": [serialize_rule(r) for r in self.checklist.rules],
            "K": self.checklist.threshold,
            "val_auroc": self.val_auroc,
            "test_auroc": self.test["auroc"],
            "sensitivity": self.test["sensitivity"],
            "specificity": self.test["specificity"],
            "risk_table": self.test["risk_table"],
            "pool_size": self.pool_size,
            "tallies": self.tallies,
            "calls": self.calls,
            "test_reads": self.test_reads,
        }


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def _make_client(settings: RunSettings, cfg: PipelineConfig, transcript: Transcript, fold: int, replay):
    if replay is not None:
        return ReplayClient(e for e in replay if e.get("event") == "completion" and e["fold"] == fold)
    if not settings.needs_remote:
        return None
    if settings.endpoint is None:
        raise ConfigError("remote proposer, plausibility review or llm_only ablation needs an endpoint")
    ep = dataclasses.replace(settings.endpoint, temperature=cfg.temperature)
    caps = {"proposal": cfg.iterations, "plausibility": cfg.iterations, "assembly": 1 + cfg.refine_phases * cfg.refine_steps}
    return RecordingClient(ChatClient(ep, CallBudget(caps=caps)), transcript, fold)


def _forced_record(pool: RulePool, rule, d_con: Dataset, stats) -> RuleRecord:
    mask = evaluate_rule(rule, d_con, stats)
    pos = label_mask(d_con.y, d_con.split)
    tp = mask.intersection_count(pos)
    return RuleRecord(rule, rule_family(rule), binary_auroc(tp, mask.count - tp, pos.count, d_con.n - pos.count),
                      mask, tp, len(pool))


def build_pool(
    d_con: Dataset,
    stats: FeatureStats,
    cfg: PipelineConfig,
    settings: RunSettings,
    fold: int,
    transcript: Transcript,
    client=None,
    replay: Sequence[dict] | None = None,
) -> tuple[RulePool, dict]:
    """Phase 1: propose, gate, review and retain rules for ``cfg.iterations`` rounds."""
    pool = RulePool(cfg)
    tallies: Counter = Counter()
    if replay is not None:
        proposer = ReplayProposer(e for e in replay if e.get("event") == "candidate" and e["fold"] == fold)
    elif settings.proposer == "remote":
        proposer = RemoteProposer(client, d_con.catalog, cfg.logic_depth)
    else:
        proposer = HeuristicProposer()
    review_mode = settings.plausibility
    for it in range(cfg.iterations):
        tools = ToolInterface(d_con, stats, pool, cfg)
        ctx = build_context(tools, settings.task_description, dict(sorted(tallies.items())), cfg)
        try:
            cands = proposer.propose(ctx, cfg.batch_size, [cfg.seed, fold, it])
        except BudgetExhausted:
            log.info("fold %d: proposal budget spent after %d iterations", fold, it)
            break
        except TransportError as exc:
            tallies["transport_error"] += 1
            transcript.write({"event": "transport_error", "fold": fold, "iteration": it, "detail": str(exc)})
            continue
        for cand in cands:
            tallies["proposed"] += 1
            event = {"event": "candidate", "fold": fold, "iteration": it, "source": cand.source, "raw": cand.raw,
                     "rule": None if cand.rule is None else serialize_rule(cand.rule), "error": cand.error}
            if cand.rule is None:
                tallies["malformed"] += 1
                event["outcome"] = "malformed"
                transcript.write(event)
                continue
            verdict = pool.consider(cand.rule, d_con, stats)
            if isinstance(verdict, Reject):
                tallies[verdict.reason.value] += 1
                event.update(outcome=verdict.reason.value, auroc=verdict.auroc)
                transcript.write(event)
                continue
            review = plausibility_gate(cand.rule, review_mode, client) if review_mode == "remote" else None
            event["auroc"] = verdict.record.auroc_con
            if review is not None and not review.plausible:
                tallies["Implausible"] += 1
                event.update(outcome="Implausible", reason=review.reason)
                transcript.write(event)
                continue
            pool.admit(verdict)
            tallies["accepted"] += 1
            event["outcome"] = "accepted"
            transcript.write(event)
    return pool, dict(sorted(tallies.items()))


def _llm_only_pool(d_con, stats, cfg, settings, fold, transcript, client, replay) -> tuple[RulePool, dict]:
    """One unconstrained proposal round: every parsable rule enters the pool, no gate."""
    pool = RulePool(cfg)
    tallies: Counter = Counter()
    if replay is not None:
        cands = ReplayProposer(e for e in replay if e.get("event") == "candidate" and e["fold"] == fold).propose(None, 0, [0])
    else:
        tools = ToolInterface(d_con, stats, None, cfg)
        ctx = dataclasses.replace(build_context(tools, settings.task_description, None, cfg),
                                  analysis_context="", tool_summaries="")
        cands = RemoteProposer(client, d_con.catalog, cfg.logic_depth).propose(ctx)
    for cand in cands:
        tallies["proposed"] += 1
        event = {"event": "candidate", "fold": fold, "iteration": 0, "source": cand.source, "raw": cand.raw,
                 "rule": None if cand.rule is None else serialize_rule(cand.rule), "error": cand.error}
        if cand.rule is None or cand.rule in pool:
            tallies["malformed" if cand.rule is None else "Duplicate"] += 1
            event["outcome"] = "malformed" if cand.rule is None else "Duplicate"
        else:
            try:
                pool.admit(Accept(_forced_record(pool, cand.rule, d_con, stats)))
                tallies["accepted"] += 1
                event["outcome"] = "accepted"
            except CheckscoreError as exc:
                tallies["UnusableStats"] += 1
                event["outcome"] = f"unusable: {exc}"
        transcript.write(event)
    return pool, dict(sorted(tallies.items()))


def prepare_fold(
    d_train: Dataset,
    fold: int,
    cfg: PipelineConfig,
    settings: RunSettings,
    transcript: Transcript,
    replay: Sequence[dict] | None = None,
) -> tuple[FoldState, object]:
    con, val = inner_split(d_train, cfg.val_fraction, seed=cfg.seed + 1000 * (fold + 1))
    d_con = d_train.subset(con, CONSTRUCTION)
    d_val = d_train.subset(val, VALIDATION)
    stats = fit_feature_stats(d_con)
    client = _make_client(settings, cfg, transcript, fold, replay)
    if settings.ablation == "llm_only":
        pool, tallies = _llm_only_pool(d_con, stats, cfg, settings, fold, transcript, client, replay)
    else:
        pool, tallies = build_pool(d_con, stats, cfg, settings, fold, transcript, client, replay)
    calls = dict(sorted(client.budget.used.items())) if client is not None else {}
    if len(pool) == 0:
        if tallies.get("transport_error"):
            raise TransportError(f"fold {fold}: every proposal request failed")
        raise EmptyPool(f"fold {fold}: no rule passed the retention gate")
    return FoldState(fold, d_con, d_val, stats, pool, tallies, calls), client


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

def build_checklist(state: FoldState, cfg: PipelineConfig, settings: RunSettings, M: int, client=None,
                    scorer: SubsetScorer | None = None):
    sc = scorer or SubsetScorer(state.pool, state.d_val, state.stats)
    if settings.ablation == "llm_only":
        rules = tuple(state.pool.rules[:M])
        c = Checklist(rules, None, stats=state.stats, provenance={"fold": state.fold, "mode": "llm_only"})
        c, rep = finalize(c, state.d_val, state.stats, cfg.objective, cfg.spec_floor)
        return c, rep, sc.auc(sc.indices(rules))
    mode = cfg.assembly
    c = assemble(state.pool, M, state.d_val, state.stats, mode, exhaustive_cap=cfg.exhaustive_cap,
                 client=client, task_description=settings.task_description, fold=state.fold, scorer=sc)
    refine_mode = "agent" if mode == "agent" and client is not None else "offline"
    for _ in range(cfg.refine_phases if cfg.refine_steps else 0):
        c = refine(c, state.pool, state.d_val, state.stats, cfg.refine_steps, M, mode=refine_mode, client=client,
                   scorer=sc)
    c, rep = finalize(c, state.d_val, state.stats, cfg.objective, cfg.spec_floor)
    return c, rep, sc.auc(sc.indices(c.rules))


def evaluate_held_out(c: Checklist, held: HeldOutSplit, stats: FeatureStats) -> dict:
    d_test = held.read()
    s = np.zeros(d_test.n, dtype=np.int64)
    for r in c.rules:
        s += rule_truth(r, d_test, stats)
    return report_at(s, d_test.y, c.threshold).to_dict()


def run_fold(d_train: Dataset, d_test: Dataset, fold: int, cfg: PipelineConfig, settings: RunSettings,
             transcript: Transcript, replay: Sequence[dict] | None = None) -> FoldResult:
    state, client = prepare_fold(d_train, fold, cfg, settings, transcript, replay)
    c, _, val_auc = build_checklist(state, cfg, settings, cfg.max_rules, client)
    held = HeldOutSplit(d_test)
    test = evaluate_held_out(c, held, state.stats)
    calls = dict(sorted(client.budget.used.items())) if client is not None and replay is None else state.calls
    return FoldResult(fold, c, val_auc, test, len(state.pool), state.tallies, calls, held.reads)


def _folds(d: Dataset, cfg: PipelineConfig):
    for i, (train, test) in enumerate(stratified_group_kfold(d, cfg.folds, cfg.seed)):
        yield i, d.subset(train, "train"), d.subset(test, TEST)


def summarize(folds: Sequence[Mapping]) -> dict:
    return {k: aggregate(f[k] for f in folds) for k in ("test_auroc", "sensitivity", "specificity", "val_auroc")}


def run_cv(
    d: Dataset,
    cfg: PipelineConfig,
    settings: RunSettings = RunSettings(),
    transcript: Transcript | None = None,
    replay: Sequence[dict] | None = None,
) -> dict:
    """Full cross-validated run; returns the JSON-serialisable run report."""
    cfg = apply_ablation(cfg, settings.ablation)
    transcript = transcript or Transcript()
    transcript.write({"event": "header", "config": cfg.to_dict(), "ablation": settings.ablation,
                      "proposer": "replay" if replay is not None else settings.proposer,
                      "plausibility": settings.plausibility})
    folds = []
    for i, d_train, d_test in _folds(d, cfg):
        res = run_fold(d_train, d_test, i, cfg, settings, transcript, replay)
        folds.append(res.to_dict())
        log.info("fold %d: test AUROC %.4f, %d rules, K=%s", i, res.test["auroc"], res.checklist.size,
                 res.checklist.threshold)
    return {
        "config": cfg.to_dict(),
        "ablation": settings.ablation,
        "proposer": "replay" if replay is not None else settings.proposer,
        "plausibility": settings.plausibility,
        "seeds": {"split": cfg.seed, "proposal": [[cfg.seed, i] for i in range(cfg.folds)]},
        "folds": folds,
        "aggregate": summarize(folds),
    }


def replay_run(d: Dataset, events: Sequence[dict]) -> dict:
    """Re-run a recorded transcript with every proposer and remote reviewer disabled."""
    header = next(e for e in events if e.get("event") == "header")
    cfg = PipelineConfig.from_mapping(header["config"])
    settings = RunSettings(
        plausibility=header.get("plausibility", "accept_all"),
        ablation=header.get("ablation", "full"),
    )
    return run_cv(d, cfg, settings, Transcript(), replay=events)


def sweep_rule_budget(d: Dataset, cfg: PipelineConfig, M_values: Sequence[int],
                      settings: RunSettings = RunSettings()) -> dict:
    """Held-out AUROC per rule budget M.

    Phase 1 does not depend on M, so each fold's pool is built once and shared
    across budgets.
    """
    if not M_values or min(M_values) < 1:
        raise ValueError("M values must be positive")
    cfg = apply_ablation(cfg, settings.ablation)
    transcript = Transcript()
    per_M: dict = {M: [] for M in M_values}
    for i, d_train, d_test in _folds(d, cfg):
        state, client = prepare_fold(d_train, i, cfg, settings, transcript)
        sc = SubsetScorer(state.pool, state.d_val, state.stats)
        for M in M_values:
            c, _, val_auc = build_checklist(state, dataclasses.replace(cfg, max_rules=M), settings, M, client, sc)
            test = evaluate_held_out(c, HeldOutSplit(d_test), state.stats)
            per_M[M].append({"fold": i, "test_auroc": test["auroc"], "size": c.size, "K": c.threshold,
                             "val_auroc": val_auc, "pool_size": len(state.pool),
                             "rules": [serialize_rule(r) for r in c.rules]})
    rows = []
    for M in M_values:
        agg = aggregate(f["test_auroc"] for f in per_M[M])
        rows.append({"M": M, "mean_auroc": agg["mean"], "std_auroc": agg["std"], "folds": per_M[M]})
    return {"config": cfg.to_dict(), "sweep": rows}
