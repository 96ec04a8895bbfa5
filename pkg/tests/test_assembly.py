import itertools
import json

import httpx
import numpy as np
import pytest

from checkscore.assembly import (
    Checklist,
    SubsetScorer,
    assemble,
    card_from_json,
    card_json,
    finalize,
    parse_agent_spec,
    pool_hash,
    refine,
    render_card,
    resolve_rule,
    subset_count,
)
from checkscore.evaluation import rule_truth
from checkscore.errors import AgentSpecInvalid, EmptyPool, SplitViolation
from checkscore.grammar import (
    BinaryTrue,
    CategoricalIn,
    NumericThreshold,
    QuantileThreshold,
    ZScoreThreshold,
    rule_to_obj,
)
from checkscore.pool import Accept, PipelineConfig, RulePool
from checkscore.proposal import CallBudget, ChatClient, EndpointConfig, propose_heuristic, ToolInterface, build_context

from _oracles import enumerate_youden, pairwise_auroc


@pytest.fixture
def pool(toy_con, toy_stats):
    p = RulePool(PipelineConfig(use_jaccard=False, auc_threshold=0.5))
    seeds = [
        NumericThreshold("a", ">=", 1),
        BinaryTrue("f1"),
        CategoricalIn("c", frozenset({"z"})),
        NumericThreshold("a", ">=", 0.5),
        QuantileThreshold("a", ">=", 0.8),
        NumericThreshold("b", "<", 3),
    ]
    for r in seeds:
        p.offer(r, toy_con, toy_stats)
    for it in range(6):
        tools = ToolInterface(toy_con, toy_stats, p)
        for r in propose_heuristic(build_context(tools), 3, [it]):
            p.offer(r, toy_con, toy_stats)
    return p


def score(rules, d, stats):
    return sum(rule_truth(r, d, stats).astype(int) for r in rules)


def val_auc(rules, d, stats):
    return pairwise_auroc(score(rules, d, stats), d.y)


def test_checklist_validation():
    r = BinaryTrue("f1")
    with pytest.raises(ValueError):
        Checklist(())
    with pytest.raises(ValueError):
        Checklist((r, r))
    with pytest.raises(ValueError):
        Checklist((r,), threshold=2)
    c = Checklist((r,), 1)
    assert c.size == 1 and c.spec()["rules"] == [{"rule": rule_to_obj(r)}]
    assert not hasattr(c, "weights")


def test_scorer_matches_oracle(pool, toy_val, toy_stats):
    sc = SubsetScorer(pool, toy_val, toy_stats)
    for idx in [(0,), (0, 1), (1, 2, 3), tuple(range(len(pool)))]:
        rules = [pool.rules[i] for i in idx]
        assert sc.auc(idx) == pytest.approx(val_auc(rules, toy_val, toy_stats), abs=1e-12)
    with pytest.raises(SplitViolation):
        SubsetScorer(pool, toy_val.subset(range(toy_val.n), "test"), toy_stats)


def test_exhaustive_finds_the_brute_force_optimum(pool, toy_val, toy_stats):
    small = RulePool(pool.config)
    for rec in list(pool)[:7]:
        small.admit(Accept(rec))
    c = assemble(small, 3, toy_val, toy_stats, "exhaustive")
    best = max(
        (val_auc(combo, toy_val, toy_stats), combo)
        for k in (1, 2, 3)
        for combo in itertools.combinations(small.rules, k)
    )
    assert c.provenance["val_auroc"] == pytest.approx(best[0], abs=1e-12)
    assert c.provenance["mode"] == "exhaustive"
    assert c.provenance["subsets_evaluated"] == subset_count(7, 3)


def test_exhaustive_over_cap_falls_back_to_greedy(pool, toy_val, toy_stats):
    c = assemble(pool, 6, toy_val, toy_stats, "exhaustive", exhaustive_cap=10)
    g = assemble(pool, 6, toy_val, toy_stats, "greedy")
    assert c.provenance["mode"] == "greedy" and c.rules == g.rules


def test_greedy_steps_are_locally_best(pool, toy_val, toy_stats):
    c = assemble(pool, 4, toy_val, toy_stats, "greedy")
    trace = c.provenance["trace"]
    assert trace and c.provenance["pool_hash"] == pool_hash(pool)
    # the first greedy pick is the best single rule, lowest ordinal on ties
    singles = [val_auc([r], toy_val, toy_stats) for r in pool.rules]
    assert trace[0]["rules"] == [int(np.argmax(singles))]
    assert 1 <= c.size <= 4
    assert c.provenance["val_auroc"] == max(t["auroc"] for t in trace)


def test_assemble_errors(toy_val, toy_stats):
    with pytest.raises(EmptyPool):
        assemble(RulePool(), 3, toy_val, toy_stats)


def test_refine_never_worse_and_respects_budget(pool, toy_val, toy_stats):
    sc = SubsetScorer(pool, toy_val, toy_stats)
    start = Checklist(tuple(pool.rules[-3:]))
    out = refine(start, pool, toy_val, toy_stats, steps=10, M=4, scorer=sc)
    assert sc.auc(sc.indices(out.rules)) >= sc.auc(sc.indices(start.rules))
    assert out.size <= 4
    assert refine(start, pool, toy_val, toy_stats, steps=0) is start
    # a local optimum is a fixed point
    again = refine(out, pool, toy_val, toy_stats, steps=10, M=4, scorer=sc)
    assert again.rules == out.rules


def test_finalize_picks_youden_k(pool, toy_val, toy_stats):
    c = assemble(pool, 4, toy_val, toy_stats)
    c2, rep = finalize(c, toy_val, toy_stats)
    K, j = enumerate_youden(score(c2.rules, toy_val, toy_stats), toy_val.y, c2.size)
    assert c2.threshold == K == rep.threshold
    assert rep.youden_j == pytest.approx(float(j), abs=1e-15)
    with pytest.raises(SplitViolation):
        finalize(c, toy_val.subset(range(10), "construction"), toy_stats)


def _agent_client(reply):
    return ChatClient(
        EndpointConfig(url="http://llm.test", model="m", max_attempts=1),
        CallBudget(),
        transport=httpx.MockTransport(
            lambda req: httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})
        ),
        sleep=lambda s: None,
    )


def test_agent_assembly_accepts_valid_spec(pool, toy_val, toy_stats):
    spec = {"name": "Sepsis-3", "description": "toy", "rules": [{"rule": rule_to_obj(r)} for r in pool.rules[:2]]}
    c = assemble(pool, 3, toy_val, toy_stats, "agent", client=_agent_client(json.dumps(spec)))
    assert c.provenance["mode"] == "agent" and c.name == "Sepsis-3"
    assert set(c.rules) == set(pool.rules[:2])


@pytest.mark.parametrize(
    "reply",
    [
        "no json here",
        json.dumps({"rules": []}),
        json.dumps({"rules": [{"rule": {"type": "binary_true", "feature": "f2"}}]}),  # not in pool
        json.dumps({"rules": [{"rule": {"type": "binary_true", "feature": "f1"}}] * 2}),
    ],
)
def test_agent_assembly_falls_back_to_greedy(pool, toy_val, toy_stats, reply):
    c = assemble(pool, 3, toy_val, toy_stats, "agent", client=_agent_client(reply))
    assert c.provenance["mode"] == "greedy-fallback"
    assert c.rules == assemble(pool, 3, toy_val, toy_stats).rules


def test_parse_agent_spec_limit(pool, toy_val, toy_stats):
    sc = SubsetScorer(pool, toy_val, toy_stats)
    spec = json.dumps({"rules": [rule_to_obj(r) for r in pool.rules[:3]]})
    assert len(parse_agent_spec(spec, sc, 3)[0]) == 3
    with pytest.raises(AgentSpecInvalid):
        parse_agent_spec(spec, sc, 2)


def test_agent_refinement(pool, toy_val, toy_stats):
    spec = {"rules": [{"rule": rule_to_obj(r)} for r in pool.rules[:3]]}
    start = Checklist((pool.rules[5],))
    out = refine(start, pool, toy_val, toy_stats, 2, 3, mode="agent", client=_agent_client(json.dumps(spec)))
    sc = SubsetScorer(pool, toy_val, toy_stats)
    assert sc.auc(sc.indices(out.rules)) >= sc.auc(sc.indices(start.rules))


EXPECTED_CARD = """### Toy score (N-of-3)

| Checklist rule (satisfied?) | Points |
|---|:---:|
| a ≥ 1 | +1 |
| f1 | +1 |
| c is z | +1 |
| **Total score** | **0–3** |
| **High-risk threshold** | **S(x) ≥ 2** |
"""


def test_card_layout_is_exact():
    c = Checklist((NumericThreshold("a", ">=", 1), BinaryTrue("f1"), CategoricalIn("c", frozenset({"z"}))), 2,
                  name="Toy score")
    assert render_card(c) == EXPECTED_CARD
    payload = json.loads(card_json(c))
    assert card_from_json(payload) == EXPECTED_CARD
    assert [r["points"] for r in payload["rules"]] == [1, 1, 1]
    assert payload["total_range"] == [0, 3]


def test_card_escapes_pipes_and_shows_description():
    c = Checklist((CategoricalIn("c", frozenset({"a|b"})),), 1, name="n", description="Adults only.")
    card = render_card(c)
    assert "Adults only." in card and "a\\|b" in card


def test_resolve_rule_fixes_cut_points(toy_stats):
    q = resolve_rule(QuantileThreshold("a", ">=", 0.9), toy_stats)
    assert q == {"type": "numeric_threshold", "feature": "a", "op": ">=", "threshold": toy_stats.quantile("a", 0.9)}
    z = resolve_rule(ZScoreThreshold("a", "<", -1), toy_stats)
    assert z["threshold"] == pytest.approx(toy_stats.mean("a") - toy_stats.std("a"))
    assert resolve_rule(BinaryTrue("f1"), toy_stats) == rule_to_obj(BinaryTrue("f1"))
