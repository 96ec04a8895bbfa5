import json

import httpx
import numpy as np
import pytest

from checkscore.data import Dataset, FeatureKind, fit_feature_stats
from checkscore.errors import BudgetExhausted, ConfigError, TransportError
from checkscore.grammar import BinaryTrue, NumericThreshold, RuleFamily, rule_family, validate_rule
from checkscore.pool import CONSTRUCTION, PipelineConfig, RulePool
from checkscore.proposal import (
    CallBudget,
    ChatClient,
    EndpointConfig,
    HeuristicProposer,
    RemoteProposer,
    ToolInterface,
    build_context,
    parse_verdict,
    plausibility_gate,
    propose_heuristic,
    render_prompt,
)
from checkscore.proposal.heuristic import round_sig
from checkscore.proposal.remote import PROMPTS, load_prompt
from checkscore.proposal.tools import Expression

from conftest import toy_dataset

SENTINEL = 987654.321


def ctx_for(d, pool=None, cfg=None):
    stats = fit_feature_stats(d)
    cfg = cfg or PipelineConfig()
    tools = ToolInterface(d, stats, pool if pool is not None else RulePool(cfg), cfg)
    return build_context(tools, "predict the outcome", {"LowAuroc": 2}, cfg)


def test_round_sig():
    assert round_sig(1234.5) == 1200
    assert round_sig(0.012345) == 0.012
    assert round_sig(0.0) == 0.0
    assert round_sig(-87.6) == -88


def test_heuristic_is_deterministic_and_well_typed(toy_con):
    ctx = ctx_for(toy_con)
    a = propose_heuristic(ctx, 6, [0, 0, 1])
    b = propose_heuristic(ctx, 6, [0, 0, 1])
    assert a == b and len(a) == 6
    for r in a:
        validate_rule(r, toy_con.catalog, max_depth=1)
    assert propose_heuristic(ctx, 6, [0, 0, 2]) != a


def test_heuristic_covers_many_families(toy_con):
    ctx = ctx_for(toy_con)
    fams = set()
    for it in range(30):
        fams |= {rule_family(r) for r in propose_heuristic(ctx, 3, [0, 0, it])}
    assert {RuleFamily.THRESHOLD, RuleFamily.CATEGORICAL, RuleFamily.BINARY, RuleFamily.DERIVED} <= fams
    assert len(fams) >= 6


def test_heuristic_candidates_clear_the_auroc_floor(toy_con):
    ctx = ctx_for(toy_con)
    tools = ctx.tools
    for r in propose_heuristic(ctx, 5, [1]):
        assert tools.evaluate_candidate(r)["auroc"] >= 0.5


def test_heuristic_proposer_wraps_candidates(toy_con):
    cands = HeuristicProposer().propose(ctx_for(toy_con), 2, [3])
    assert all(c.source == "heuristic" and c.rule is not None and c.error is None for c in cands)
    assert all(json.loads(c.raw)["type"] for c in cands)


def test_scan_thresholds_matches_direct_evaluation(toy_con, toy_stats):
    tools = ToolInterface(toy_con, toy_stats)
    cuts = [-1.0, 0.0, 0.5, 1.0]
    rows = tools.scan_thresholds(Expression("feature", "a"), cuts, ops=(">=", ">", "<", "<="))
    for row in rows:
        direct = tools.evaluate_candidate(NumericThreshold("a", row["op"], row["cut"]))
        assert row["auroc"] == pytest.approx(direct["auroc"])
        assert row["coverage"] == direct["coverage"]


def test_tool_outputs_never_carry_row_values(monkeypatch):
    """Plant a unique value in one row and watch every tool return and prompt for it."""
    d = toy_dataset(997, seed=4)
    cols = dict(d.columns)
    a = np.array(cols["a"])
    a[17] = SENTINEL
    cols["a"] = a
    d = Dataset.from_arrays(d.catalog, cols, d.y, d.groups, CONSTRUCTION)
    seen = []
    public = [m for m in dir(ToolInterface) if not m.startswith("_")]
    for name in public:
        orig = getattr(ToolInterface, name)
        if not callable(orig):
            continue

        def spy(self, *args, _orig=orig, **kw):
            out = _orig(self, *args, **kw)
            seen.append(out)
            return out

        monkeypatch.setattr(ToolInterface, name, spy)
    pool = RulePool()
    ctx = ctx_for(d, pool)
    for it in range(20):
        for r in propose_heuristic(ctx, 3, [it]):
            pool.offer(r, d, ctx.tools._stats)
        ctx = build_context(ToolInterface(d, ctx.tools._stats, pool), "task", None)
    prompt = render_prompt("feature_proposal", ctx.prompt_fields())
    blob = json.dumps(seen, default=str) + prompt
    assert str(SENTINEL) not in blob
    assert "987654" not in blob
    for out in seen:
        if isinstance(out, (list, tuple, np.ndarray)):
            assert len(out) != d.n


def test_context_is_built_from_tools_only(toy_con):
    ctx = ctx_for(toy_con)
    fields = ctx.prompt_fields()
    assert set(fields) == {"task_description", "variable_list", "analysis_context", "tool_summaries", "auc_threshold"}
    assert "a (numeric, mg)" in fields["variable_list"]
    analysis = json.loads(fields["analysis_context"])
    assert analysis["outcome"]["n"] == toy_con.n
    assert json.loads(fields["tool_summaries"])["feedback"] == {"LowAuroc": 2}


@pytest.mark.parametrize("name", PROMPTS)
def test_prompts_render_without_leftover_placeholders(name):
    fields = {k: "X" for k in ("task_description", "variable_list", "analysis_context", "tool_summaries",
                               "auc_threshold", "rule_json", "max_rules", "retained_rules_with_auc",
                               "current_score_json", "score_metrics")}
    text = render_prompt(name, fields)
    assert "$" not in text.replace("$$", "")
    assert len(text) > 200
    needed = {n for _, n, b, _ in load_prompt(name).pattern.findall(load_prompt(name).template) if n or b}
    with pytest.raises(KeyError):
        render_prompt(name, {k: v for k, v in fields.items() if k not in needed})


# -- remote client -------------------------------------------------------------

def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def make_client(handler, caps=None, **ep):
    sleeps = []
    endpoint = EndpointConfig(url="http://llm.test/v1/chat/completions", model="m", backoff=0.5, **ep)
    client = ChatClient(endpoint, CallBudget(caps=caps or {"proposal": 5, "plausibility": 5, "assembly": 5}),
                        transport=httpx.MockTransport(handler), sleep=sleeps.append)
    return client, sleeps


def test_client_sends_chat_request(monkeypatch):
    monkeypatch.setenv("CHECKSCORE_API_TOKEN", "secret")
    captured = {}

    def handler(req):
        captured["auth"] = req.headers.get("authorization")
        captured["body"] = json.loads(req.content)
        return chat_reply("ok")

    client, _ = make_client(handler, temperature=0.3)
    assert client.complete("hello", "proposal") == "ok"
    assert captured["auth"] == "Bearer secret"
    body = captured["body"]
    assert body["model"] == "m" and body["temperature"] == 0.3
    assert body["messages"][-1] == {"role": "user", "content": "hello"}


def test_client_retries_with_backoff_then_succeeds():
    replies = iter([httpx.Response(503), httpx.Response(429), chat_reply("fine")])
    client, sleeps = make_client(lambda req: next(replies))
    assert client.complete("p", "proposal") == "fine"
    assert sleeps == [0.5, 1.0]
    assert client.requests == 3
    assert client.budget.used == {"proposal": 1}


def test_client_gives_up_after_max_attempts():
    client, sleeps = make_client(lambda req: httpx.Response(500), max_attempts=3)
    with pytest.raises(TransportError, match="3 attempts"):
        client.complete("p", "proposal")
    assert sleeps == [0.5, 1.0]


def test_client_network_errors_are_retried():
    def handler(req):
        raise httpx.ConnectError("refused", request=req)

    client, _ = make_client(handler, max_attempts=2)
    with pytest.raises(TransportError, match="ConnectError"):
        client.complete("p", "proposal")


def test_client_does_not_retry_client_errors():
    client, sleeps = make_client(lambda req: httpx.Response(401))
    with pytest.raises(TransportError, match="401"):
        client.complete("p", "proposal")
    assert sleeps == [] and client.requests == 1


def test_client_rejects_odd_response_shape():
    client, _ = make_client(lambda req: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(TransportError):
        client.complete("p", "proposal")


def test_budget_caps_calls():
    client, _ = make_client(lambda req: chat_reply("x"), caps={"proposal": 2, "plausibility": 0, "assembly": 0})
    client.complete("p", "proposal")
    client.complete("p", "proposal")
    with pytest.raises(BudgetExhausted):
        client.complete("p", "proposal")
    assert client.requests == 2
    assert client.budget.remaining("proposal") == 0 and client.budget.total_cap == 2
    assert CallBudget().caps == {"proposal": 100, "plausibility": 100, "assembly": 21}


def test_endpoint_config_validation():
    with pytest.raises(ConfigError):
        EndpointConfig.from_mapping({"url": "http://x"})
    with pytest.raises(ConfigError):
        EndpointConfig.from_mapping({"url": "http://x", "model": "m", "colour": "red"})
    assert EndpointConfig.from_mapping({"url": "http://x", "model": "m"}).max_attempts == 5


def test_remote_proposer_parses_lines_independently(toy_con):
    text = "\n".join([
        "```json",
        '{"type":"binary_true","feature":"f1"}',
        '{"type":"numeric_threshold","feature":"a","op":">=","threshold":1}',
        '{"type":"binary_true","feature":"a"}',
        "not json at all",
        "```",
    ])
    client, _ = make_client(lambda req: chat_reply(text))
    prop = RemoteProposer(client, toy_con.catalog)
    cands = prop.propose(ctx_for(toy_con))
    assert [c.rule for c in cands[:2]] == [BinaryTrue("f1"), NumericThreshold("a", ">=", 1.0)]
    assert [c.rule for c in cands[2:]] == [None, None]
    assert "TypeMismatch" in cands[2].error and "MalformedSyntax" in cands[3].error
    assert prop.malformed == 2


def test_plausibility_gate_modes():
    rule = BinaryTrue("f1")
    assert plausibility_gate(rule).plausible
    client, _ = make_client(lambda req: chat_reply('{"plausible": false, "reason": "reverse causation"}'))
    v = plausibility_gate(rule, "remote", client)
    assert not v.plausible and v.reason == "reverse causation"
    broken, _ = make_client(lambda req: httpx.Response(500), max_attempts=1)
    assert plausibility_gate(rule, "remote", broken).reason == "gate-transport-failure"
    spent, _ = make_client(lambda req: chat_reply("{}"), caps={"proposal": 1, "plausibility": 0, "assembly": 1})
    assert plausibility_gate(rule, "remote", spent).reason == "gate-budget-exhausted"
    with pytest.raises(ValueError):
        plausibility_gate(rule, "remote", None)


@pytest.mark.parametrize(
    "text,plausible,reason",
    [
        ('{"plausible": true, "reason": "ok"}', True, "ok"),
        ('```json\n{"plausible": true}\n```', True, ""),
        ('{"plausible": "yes"}', False, "gate-parse-failure"),
        ("sure, looks fine", False, "gate-parse-failure"),
    ],
)
def test_parse_verdict(text, plausible, reason):
    v = parse_verdict(text)
    assert (v.plausible, v.reason) == (plausible, reason)


def test_tool_interface_lists_kinds(toy_con, toy_stats):
    tools = ToolInterface(toy_con, toy_stats)
    assert tools.names(FeatureKind.BINARY) == ("f1", "f2")
    assert tools.usable_numeric() == ("a", "b")
    assert tools.category_counts("c") == dict(toy_stats.categories["c"])
    assert tools.pool_summary() == [] and tools.diversity_guidance() == list(RuleFamily)
