"""Query pipeline tests: preprocessing, routing, streams, fusion, cost model."""

import json

import pytest

from filingsqa.corpus import Chunk, Modality
from filingsqa.embedding import EmbedderConfig, embed
from filingsqa.gateway import MockLlmGateway, MockScript, rule
from filingsqa.index import build_indexes
from filingsqa.memory_bank import CanonicalQuestion, Cell, MemoryBank, normalize_question
from filingsqa.pipeline import (
    ConversationTurn,
    CostLedger,
    Evidence,
    PipelineConfig,
    Route,
    SubQuery,
    ToolRegistry,
    answer_query,
    call_tool,
    canned_tool,
    decompose,
    estimate_cost,
    execute,
    normalize_query,
    synthesize,
)
from filingsqa.reranker import pretrained_model

CFG = EmbedderConfig()


def make_kb():
    sentences = {
        "revenue": "total q3 revenue increased twelve percent to four billion dollars",
        "battery": "battery cell production capacity expanded at the gigafactory",
        "margin": "gross margin improved to eighteen percent on mix and pricing",
    }
    chunks = []
    pos = 0
    for name, sentence in sentences.items():
        for j in range(3):
            text = f"{sentence} detail {j} " + " ".join(f"{name}tok{j}{m}" for m in range(5))
            chunks.append(Chunk("doc", pos, Modality.TEXT, text, name, len(text.split()),
                                summary=f"section about {name}",
                                embedding=embed(text, CFG)))
            pos += 1
    return build_indexes(chunks, CFG)


def make_bank():
    bank = MemoryBank(
        questions=[CanonicalQuestion(normalize_question("what was q3 revenue"))],
        periods=["Q3 FY24"],
        embed_cfg=CFG,
    )
    bank.cells[(0, 0)] = Cell(value="$4.0B", source_chunk_ids=["doc:0000"], verified=True)
    return bank


def make_registry():
    registry = ToolRegistry()
    registry.add(canned_tool("stock_price", "current share price quote", "ZK $21.40"))
    return registry


MODEL = pretrained_model()


# -- normalize_query ----------------------------------------------------------


def test_normalize_identity_mock_passthrough():
    ledger = CostLedger()
    got = normalize_query("What was revenue?", [], MockLlmGateway(), ledger)
    assert got == "What was revenue?"
    assert [r.step for r in ledger.records] == ["Query rewriting"]
    assert ledger.records[0].model == "chat"
    assert ledger.records[0].total_tokens > 0


def test_normalize_scripted_coref_resolution():
    gw = MockLlmGateway(MockScript(rules=[
        rule(purpose="rewrite", contains="its revenue", text="Zeekr's revenue in Q3"),
    ]))
    history = [ConversationTurn("user", "Tell me about Zeekr"),
               ConversationTurn("assistant", "Zeekr is an EV maker.")]
    got = normalize_query("what about its revenue", history, gw, CostLedger())
    assert got == "Zeekr's revenue in Q3"


def test_normalize_failure_falls_back():
    class Boom:
        def complete(self, req):
            raise RuntimeError("down")

    got = normalize_query("original", [], Boom(), CostLedger())
    assert got == "original"


def test_normalize_rejects_empty():
    with pytest.raises(ValueError):
        normalize_query("   ", [], MockLlmGateway(), CostLedger())


# -- decompose ----------------------------------------------------------------


def test_decompose_simple_query_deep_retrieval():
    ledger = CostLedger()
    got = decompose("what was gross margin", MockLlmGateway(), make_bank(),
                    make_registry().specs(), ledger)
    assert len(got) == 1
    assert got[0].route is Route.DEEP_RETRIEVAL
    assert ledger.n == 1


def test_decompose_routes_bank_and_tool():
    ledger = CostLedger()
    got = decompose("What was q3 revenue and the current share price?",
                    MockLlmGateway(), make_bank(), make_registry().specs(), ledger)
    assert [sq.route for sq in got] == [Route.MEMORY_BANK, Route.TOOL]
    assert ledger.n == 2


def test_decompose_scripted_json_plan():
    plan = [{"text": "a", "route": "Direct"}, {"text": "b", "route": "DeepRetrieval"}]
    gw = MockLlmGateway(MockScript(rules=[rule(purpose="decompose", text=json.dumps(plan))]))
    got = decompose("a and b", gw, None, [], CostLedger())
    assert [sq.route for sq in got] == [Route.DIRECT, Route.DEEP_RETRIEVAL]


def test_decompose_invalid_route_coerced(caplog):
    plan = [{"text": "a", "route": "Telepathy"}]
    gw = MockLlmGateway(MockScript(rules=[rule(purpose="decompose", text=json.dumps(plan))]))
    with caplog.at_level("WARNING"):
        got = decompose("a", gw, None, [], CostLedger())
    assert got[0].route is Route.DEEP_RETRIEVAL
    assert any("invalid route" in r.message for r in caplog.records)


# -- call_tool ----------------------------------------------------------------


def test_call_tool_canned_quote():
    ledger = CostLedger()
    ev = call_tool(SubQuery("current share price", Route.TOOL), make_registry(),
                   MockLlmGateway(), ledger)
    assert ev.error is None
    assert ev.payload["answer"] == "ZK $21.40"
    assert ev.provenance == ["stock_price"]
    assert [r.step for r in ledger.records] == ["Tool use"]


def test_call_tool_unknown_tool_is_error_evidence():
    gw = MockLlmGateway(MockScript(rules=[
        rule(purpose="tool", tool_name="ghost_tool", arguments={}),
    ]))
    ev = call_tool(SubQuery("share price", Route.TOOL), make_registry(), gw, CostLedger())
    assert ev.error is not None
    assert "ghost_tool" in ev.error


def test_call_tool_handler_failure_is_error_evidence():
    registry = ToolRegistry()

    def bad_handler(args):
        raise RuntimeError("api down")

    from filingsqa.pipeline import ToolSpec

    registry.add(ToolSpec("stock_price", "current share price quote",
                          {"type": "object", "properties": {}}, bad_handler))
    ev = call_tool(SubQuery("share price", Route.TOOL), registry, MockLlmGateway(),
                   CostLedger())
    assert ev.error is not None and "api down" in ev.error


# -- execute ------------------------------------------------------------------


def test_execute_deep_retrieval_ranked_bundles():
    kb = make_kb()
    cfg = PipelineConfig(k_each=4, top_r=5, jobs=1)
    ledger = CostLedger()
    evidence = execute([SubQuery("battery production capacity", Route.DEEP_RETRIEVAL)],
                       kb, None, ToolRegistry(), MODEL, MockLlmGateway(), cfg, ledger)
    assert len(evidence) == 1
    ev = evidence[0]
    assert ev.stream is Route.DEEP_RETRIEVAL
    bundles = ev.payload["bundles"]
    assert 0 < len(bundles) <= 5
    scores = [b["score"] for b in bundles]
    assert scores == sorted(scores, reverse=True)
    assert ev.provenance
    assert [r.step for r in ledger.records] == ["Sub-query answering"]


def test_execute_memory_bank_hit_bypasses_retrieval():
    kb = make_kb()
    ledger = CostLedger()
    evidence = execute([SubQuery("what was q3 revenue", Route.MEMORY_BANK)],
                       kb, make_bank(), ToolRegistry(), MODEL, MockLlmGateway(),
                       PipelineConfig(jobs=1), ledger)
    ev = evidence[0]
    assert ev.stream is Route.MEMORY_BANK
    assert ev.payload["answer"] == "$4.0B"
    assert ev.provenance == ["doc:0000"]
    # the fast path makes no model calls at all
    assert ledger.records == []


def test_execute_memory_bank_miss_falls_through():
    kb = make_kb()
    bank = make_bank()
    bank.cells[(0, 0)].verified = False
    ledger = CostLedger()
    evidence = execute([SubQuery("what was q3 revenue", Route.MEMORY_BANK)],
                       kb, bank, ToolRegistry(), MODEL, MockLlmGateway(),
                       PipelineConfig(jobs=1), ledger)
    assert evidence[0].stream is Route.DEEP_RETRIEVAL
    assert [r.step for r in ledger.records] == ["Sub-query answering"]


def test_execute_mixed_routes_input_order():
    kb = make_kb()
    subqueries = [
        SubQuery("what was q3 revenue", Route.MEMORY_BANK),
        SubQuery("battery production capacity", Route.DEEP_RETRIEVAL),
        SubQuery("current share price", Route.TOOL),
    ]
    for jobs in (1, 4):
        evidence = execute(subqueries, kb, make_bank(), make_registry(), MODEL,
                           MockLlmGateway(), PipelineConfig(jobs=jobs), CostLedger())
        assert [ev.stream for ev in evidence] == [Route.MEMORY_BANK,
                                                  Route.DEEP_RETRIEVAL, Route.TOOL]
        assert [ev.subquery for ev in evidence] == [sq.text for sq in subqueries]


def test_execute_stream_isolation():
    kb = make_kb()

    class ToolFailingGateway(MockLlmGateway):
        def complete(self, req):
            if req.purpose == "tool":
                raise RuntimeError("tool gateway down")
            return super().complete(req)

    subqueries = [
        SubQuery("battery production capacity", Route.DEEP_RETRIEVAL),
        SubQuery("current share price", Route.TOOL),
    ]
    ok = execute(subqueries, kb, None, make_registry(), MODEL, MockLlmGateway(),
                 PipelineConfig(jobs=1), CostLedger())
    broken = execute(subqueries, kb, None, make_registry(), MODEL, ToolFailingGateway(),
                     PipelineConfig(jobs=1), CostLedger())
    assert broken[0].payload == ok[0].payload  # untouched sibling
    assert broken[1].error is not None
    assert ok[1].error is None


def test_execute_records_tool_count():
    kb = make_kb()
    ledger = CostLedger()
    execute([SubQuery("battery", Route.DEEP_RETRIEVAL)], kb, None, make_registry(),
            MODEL, MockLlmGateway(), PipelineConfig(jobs=1), ledger)
    assert ledger.t == 1


# -- synthesize ---------------------------------------------------------------


def test_synthesize_single_evidence_skips_merge():
    ledger = CostLedger()
    ev = Evidence(Route.DEEP_RETRIEVAL, "q", {"answer": "the answer"})
    got = synthesize("q", [ev], MockLlmGateway(), ledger)
    assert got == "the answer"
    assert ledger.records == []  # no merging step at n=1


def test_synthesize_two_evidence_labeled_concatenation():
    ledger = CostLedger()
    evs = [Evidence(Route.MEMORY_BANK, "a", {"answer": "$4.0B"}),
           Evidence(Route.TOOL, "b", {"answer": "ZK $21.40"})]
    got = synthesize("q", evs, MockLlmGateway(), ledger)
    assert got == "[MemoryBank] $4.0B\n[Tool] ZK $21.40"
    assert [r.step for r in ledger.records] == ["Final answer merging"]


def test_synthesize_all_failed():
    evs = [Evidence(Route.TOOL, "a", {}, error="x"),
           Evidence(Route.DEEP_RETRIEVAL, "b", {}, error="y")]
    got = synthesize("q", evs, MockLlmGateway(), CostLedger())
    assert got.startswith("Unable to answer")
    with pytest.raises(ValueError):
        synthesize("q", [], MockLlmGateway(), CostLedger())


# -- end to end ---------------------------------------------------------------


def test_answer_query_end_to_end_deterministic():
    kb = make_kb()
    fingerprints = set()
    answers = set()
    for jobs in (1, 2, 8):
        for _ in range(2):
            answer, evidence, ledger = answer_query(
                "What was q3 revenue and the current share price?",
                [], kb, make_bank(), make_registry(), MODEL, MockLlmGateway(),
                PipelineConfig(jobs=jobs),
            )
            answers.add(answer)
            fingerprints.add(ledger.fingerprint())
            assert [ev.stream for ev in evidence] == [Route.MEMORY_BANK, Route.TOOL]
    assert len(answers) == 1
    assert len(fingerprints) == 1


def test_ledger_conservation():
    kb = make_kb()
    _, _, ledger = answer_query(
        "battery production capacity and gross margin trend",
        [], kb, None, ToolRegistry(), MODEL, MockLlmGateway(), PipelineConfig(jobs=1),
    )
    assert ledger.total_tokens == sum(r.total_tokens for r in ledger.records)
    assert ledger.n == 2
    steps = [r.step for r in ledger.records]
    assert steps == ["Query rewriting", "Query decomposition",
                     "Sub-query answering", "Sub-query answering",
                     "Final answer merging"]


# -- cost model ---------------------------------------------------------------


def test_estimate_cost_n1_t0():
    est = estimate_cost(1, 0)
    assert est.tokens == 5350
    assert est.usd_per_k_queries == 1.51


def test_estimate_cost_n2_t1():
    est = estimate_cost(2, 1)
    assert est.tokens == 10500
    assert est.usd_per_k_queries == pytest.approx(0.11 + 2.8 + 0.056, abs=1e-12)


def test_estimate_cost_step_sum_identity():
    for n in range(1, 6):
        for t in range(0, 4):
            est = estimate_cost(n, t)
            assert sum(est.steps.values()) == est.tokens
            assert est.steps["Query rewriting"] == 600
            assert est.steps["Tool use"] == 250 * n + 100 * t * n
            assert est.steps["Sub-query answering"] == 4500 * n
            assert est.steps["Final answer merging"] == 200 * (n - 1)


def test_estimate_cost_errors():
    with pytest.raises(ValueError):
        estimate_cost(0, 0)
    with pytest.raises(ValueError):
        estimate_cost(1, -1)
    with pytest.raises(ValueError):
        estimate_cost(1.5, 0)
