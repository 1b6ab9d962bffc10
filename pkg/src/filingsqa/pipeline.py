"""Query answering: preprocessing, routing, the three evidence streams, fusion.

A query is rewritten into a self-contained English form against the
conversation history, decomposed into routed sub-queries, and executed across
the memory bank, deep retrieval, and tool streams concurrently. Evidence is
merged into one answer, and every model call lands in a cost ledger that
tracks tokens and wall time per step.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

from .corpus import chunk_id_str
from .gateway import ChatRequest, ChatResponse, LlmGateway
from .index import KnowledgeBase
from .memory_bank import MatchThresholds, MemoryBank, lookup, match
from .reranker import RerankModel, score_texts
from .retrieval import bundle_candidates, bundle_text, multipath_retrieve

logger = logging.getLogger(__name__)


class Route(str, Enum):
    MEMORY_BANK = "MemoryBank"
    TOOL = "Tool"
    DEEP_RETRIEVAL = "DeepRetrieval"
    DIRECT = "Direct"


@dataclass(frozen=True)
class ConversationTurn:
    role: str  # "user" | "assistant"
    text: str
    timestamp: float = 0.0


@dataclass(frozen=True)
class SubQuery:
    text: str
    route: Route


@dataclass
class ToolSpec:
    """A callable tool declared in the function-calling schema."""

    name: str
    description: str
    parameters: dict
    handler: Callable[[dict], str]

    def to_openai_schema(self) -> dict:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            },
        }


class ToolRegistry:
    def __init__(self) -> None:
        self._tools: dict[str, ToolSpec] = {}

    def add(self, spec: ToolSpec) -> None:
        if spec.name in self._tools:
            raise ValueError(f"duplicate tool name: {spec.name}")
        self._tools[spec.name] = spec

    def get(self, name: str) -> Optional[ToolSpec]:
        return self._tools.get(name)

    def specs(self) -> list[ToolSpec]:
        return list(self._tools.values())

    def schemas(self) -> list[dict]:
        return [spec.to_openai_schema() for spec in self._tools.values()]

    def __len__(self) -> int:
        return len(self._tools)


def canned_tool(name: str, description: str, payload: str) -> ToolSpec:
    """Offline tool handler returning fixed data; the default binding when no
    external endpoint is configured."""
    return ToolSpec(
        name=name,
        description=description,
        parameters={"type": "object", "properties": {}},
        handler=lambda args: payload,
    )


def http_tool(name: str, description: str, parameters: dict, url: str) -> ToolSpec:
    """Tool bound to an external HTTP endpoint: POSTs the arguments as JSON."""
    import httpx

    def handler(args: dict) -> str:
        resp = httpx.post(url, json=args, timeout=30.0)
        resp.raise_for_status()
        return resp.text

    return ToolSpec(name=name, description=description, parameters=parameters, handler=handler)


@dataclass
class Evidence:
    stream: Route
    subquery: str
    payload: dict
    provenance: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def answer_text(self) -> str:
        if self.error:
            return f"[{self.stream.value} failed: {self.error}]"
        return str(self.payload.get("answer", ""))


@dataclass(frozen=True)
class StepRecord:
    step: str
    wall_s: float
    model: str
    prompt_tokens: int
    completion_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class CostLedger:
    """Per-step accounting of model usage for one query or session."""

    records: list[StepRecord] = field(default_factory=list)
    n: int = 0  # sub-query count
    t: int = 0  # available tool count

    def add(self, record: StepRecord) -> None:
        self.records.append(record)

    def extend(self, records: Sequence[StepRecord]) -> None:
        self.records.extend(records)

    @property
    def total_tokens(self) -> int:
        return sum(r.total_tokens for r in self.records)

    @property
    def total_wall_s(self) -> float:
        return sum(r.wall_s for r in self.records)

    def fingerprint(self) -> tuple:
        """Deterministic view: everything except wall times."""
        return tuple(
            (r.step, r.model, r.prompt_tokens, r.completion_tokens) for r in self.records
        ) + (self.n, self.t)

    def to_dicts(self) -> list[dict]:
        return [
            {
                "step": r.step,
                "wall_s": r.wall_s,
                "model": r.model,
                "prompt_tokens": r.prompt_tokens,
                "completion_tokens": r.completion_tokens,
            }
            for r in self.records
        ]


@dataclass(frozen=True)
class PipelineConfig:
    k_each: int = 10
    bundle_k: int = 2
    tau_bundle: float = 0.8
    top_r: int = 10  # re-ranked bundles fed to sub-answering
    jobs: int = 4
    chat_model: str = "chat"
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)


def _timed_call(
    gateway: LlmGateway, req: ChatRequest, ledger: CostLedger, step: str
) -> ChatResponse:
    start = time.perf_counter()
    resp = gateway.complete(req)
    ledger.add(
        StepRecord(
            step=step,
            wall_s=time.perf_counter() - start,
            model=req.model,
            prompt_tokens=resp.usage.prompt_tokens,
            completion_tokens=resp.usage.completion_tokens,
        )
    )
    return resp


# ---------------------------------------------------------------------------
# Preprocessing


_REWRITE_SYSTEM = (
    "Rewrite the user's question as one self-contained English question, "
    "resolving pronouns and references against the conversation so far. "
    "Reply with the rewritten question only."
)

_DECOMPOSE_SYSTEM = (
    "Split the question into the smallest self-contained sub-questions and "
    "route each one. Reply with a JSON array of objects "
    '{"text": ..., "route": "MemoryBank"|"Tool"|"DeepRetrieval"|"Direct"}.'
)


def normalize_query(
    query: str,
    history: Sequence[ConversationTurn],
    gateway: LlmGateway,
    ledger: CostLedger,
    cfg: PipelineConfig = PipelineConfig(),
) -> str:
    """Rewrite a raw query into a self-contained English form.

    The whole conversation history rides along for co-reference resolution.
    Gateway failures fall back to the original query with a warning.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    messages: list[tuple[str, str]] = [("system", _REWRITE_SYSTEM)]
    messages.extend((turn.role, turn.text) for turn in history)
    messages.append(("user", query))
    req = ChatRequest(model=cfg.chat_model, messages=messages, purpose="rewrite")
    try:
        resp = _timed_call(gateway, req, ledger, "Query rewriting")
        text = (resp.text or "").strip()
        return text or query
    except Exception as exc:
        logger.warning("query rewriting failed, using original: %s", exc)
        return query


_SPLIT_RE = re.compile(r"\s*(?:;|\band\b)\s*", re.IGNORECASE)


def _rule_based_subqueries(
    query: str, bank: Optional[MemoryBank], tools: Sequence[ToolSpec], thresholds: MatchThresholds
) -> list[SubQuery]:
    units = [u for u in _SPLIT_RE.split(query) if u.strip()]
    if not units:
        units = [query]
    out = []
    for unit in units:
        route = Route.DEEP_RETRIEVAL
        if bank is not None and bank.questions and match(unit, bank, thresholds):
            route = Route.MEMORY_BANK
        else:
            unit_tokens = set(re.findall(r"\w+", unit.lower()))
            for spec in tools:
                keywords = set(spec.name.lower().split("_"))
                keywords |= set(re.findall(r"\w+", spec.description.lower()))
                if keywords & unit_tokens:
                    route = Route.TOOL
                    break
        out.append(SubQuery(text=unit, route=route))
    return out


def decompose(
    query: str,
    gateway: LlmGateway,
    bank: Optional[MemoryBank],
    tools: Sequence[ToolSpec],
    ledger: CostLedger,
    cfg: PipelineConfig = PipelineConfig(),
) -> list[SubQuery]:
    """Decompose a normalized query into routed sub-queries.

    The gateway is asked for a JSON routing plan; a reply that is not valid
    JSON falls back to the rule-based router (split on top-level "and"/";",
    route to the memory bank on a canonical-question match, to a tool on a
    keyword match, else to deep retrieval). An explicitly invalid route label
    in a parsed plan is coerced to DeepRetrieval with a warning.
    """
    req = ChatRequest(
        model=cfg.chat_model,
        messages=[("system", _DECOMPOSE_SYSTEM), ("user", query)],
        purpose="decompose",
    )
    subqueries: Optional[list[SubQuery]] = None
    try:
        resp = _timed_call(gateway, req, ledger, "Query decomposition")
        plan = json.loads(resp.text or "")
        if isinstance(plan, list) and plan:
            subqueries = []
            for entry in plan:
                text = str(entry.get("text", "")).strip()
                if not text:
                    continue
                try:
                    route = Route(entry.get("route"))
                except ValueError:
                    logger.warning(
                        "invalid route %r for sub-query %r; coercing to DeepRetrieval",
                        entry.get("route"),
                        text[:60],
                    )
                    route = Route.DEEP_RETRIEVAL
                subqueries.append(SubQuery(text=text, route=route))
            if not subqueries:
                subqueries = None
    except json.JSONDecodeError:
        subqueries = None
    except Exception as exc:
        logger.warning("decomposition call failed, using rule-based router: %s", exc)
        subqueries = None

    if subqueries is None:
        subqueries = _rule_based_subqueries(query, bank, tools, cfg.thresholds)
    ledger.n = len(subqueries)
    return subqueries


# ---------------------------------------------------------------------------
# Streams


def call_tool(
    sq: SubQuery,
    registry: ToolRegistry,
    gateway: LlmGateway,
    ledger: CostLedger,
    cfg: PipelineConfig = PipelineConfig(),
) -> Evidence:
    """Let the gateway pick a tool for the sub-query and dispatch its handler.

    Unknown tool names and handler failures produce error evidence rather
    than exceptions so sibling streams never see them.
    """
    if sq.route is not Route.TOOL:
        raise ValueError(f"sub-query routed {sq.route.value}, not Tool")
    req = ChatRequest(
        model=cfg.chat_model,
        messages=[
            ("system", "Select and invoke the appropriate tool for the request."),
            ("user", sq.text),
        ],
        tools=registry.schemas(),
        purpose="tool",
    )
    try:
        resp = _timed_call(gateway, req, ledger, "Tool use")
    except Exception as exc:
        return Evidence(Route.TOOL, sq.text, {}, error=f"gateway failure: {exc}")
    if not resp.tool_calls:
        return Evidence(Route.TOOL, sq.text, {}, error="gateway returned no tool call")
    call = resp.tool_calls[0]
    spec = registry.get(call.name)
    if spec is None:
        return Evidence(Route.TOOL, sq.text, {}, error=f"unknown tool: {call.name}")
    try:
        output = spec.handler(call.arguments)
    except Exception as exc:
        return Evidence(Route.TOOL, sq.text, {}, error=f"tool {call.name} failed: {exc}")
    return Evidence(
        Route.TOOL,
        sq.text,
        {"answer": output, "tool": call.name, "arguments": call.arguments},
        provenance=[call.name],
    )


_SUBANSWER_SYSTEM = (
    "Answer the question using only the following filing excerpts. "
    "Excerpts:\n{context}"
)


def _deep_retrieval(
    sq_text: str,
    kb: KnowledgeBase,
    model: RerankModel,
    gateway: LlmGateway,
    ledger: CostLedger,
    cfg: PipelineConfig,
) -> Evidence:
    candidates = multipath_retrieve(sq_text, cfg.k_each, kb)
    if not candidates:
        return Evidence(Route.DEEP_RETRIEVAL, sq_text, {}, error="no candidates retrieved")
    bundles = bundle_candidates(candidates, kb, cfg.bundle_k, cfg.tau_bundle)
    texts = [bundle_text(b, kb) for b in bundles]
    scores = score_texts(sq_text, texts, model, kb.embed_cfg, kb.bm25_params)
    ranked = sorted(
        zip(bundles, texts, scores), key=lambda item: (-item[2], item[0].anchor)
    )[: cfg.top_r]
    context = "\n\n".join(text for _, text, _ in ranked)
    req = ChatRequest(
        model=cfg.chat_model,
        messages=[
            ("system", _SUBANSWER_SYSTEM.format(context=context)),
            ("user", sq_text),
        ],
        purpose="subanswer",
    )
    resp = _timed_call(gateway, req, ledger, "Sub-query answering")
    provenance = []
    for b, _, _ in ranked:
        provenance.extend(chunk_id_str(cid) for cid in b.members)
    return Evidence(
        Route.DEEP_RETRIEVAL,
        sq_text,
        {
            "answer": (resp.text or "").strip(),
            "bundles": [
                {
                    "anchor": chunk_id_str(b.anchor),
                    "members": [chunk_id_str(cid) for cid in b.members],
                    "score": s,
                    "text": text,
                }
                for b, text, s in ranked
            ],
        },
        provenance=list(dict.fromkeys(provenance)),
    )


def _memory_bank_stream(
    sq_text: str,
    bank: Optional[MemoryBank],
    kb: KnowledgeBase,
    model: RerankModel,
    gateway: LlmGateway,
    ledger: CostLedger,
    cfg: PipelineConfig,
) -> Evidence:
    if bank is not None:
        result = lookup(sq_text, None, bank, cfg.thresholds)
        if result.hit:
            # A verified cell bypasses deep retrieval entirely: no gateway
            # call, no retrieval ledger records for this sub-query.
            return Evidence(
                Route.MEMORY_BANK,
                sq_text,
                {
                    "answer": result.value,
                    "question": result.question,
                    "period": result.period,
                },
                provenance=list(result.sources),
            )
        logger.info("memory bank miss (%s); falling through to deep retrieval", result.reason)
    return _deep_retrieval(sq_text, kb, model, gateway, ledger, cfg)


def _direct_stream(
    sq_text: str, gateway: LlmGateway, ledger: CostLedger, cfg: PipelineConfig
) -> Evidence:
    req = ChatRequest(
        model=cfg.chat_model,
        messages=[("system", "Answer from general knowledge."), ("user", sq_text)],
        purpose="direct",
    )
    resp = _timed_call(gateway, req, ledger, "Direct answering")
    return Evidence(Route.DIRECT, sq_text, {"answer": (resp.text or "").strip()})


def execute(
    subqueries: Sequence[SubQuery],
    kb: KnowledgeBase,
    bank: Optional[MemoryBank],
    registry: ToolRegistry,
    model: RerankModel,
    gateway: LlmGateway,
    cfg: PipelineConfig = PipelineConfig(),
    ledger: Optional[CostLedger] = None,
) -> list[Evidence]:
    """Run every sub-query down its route, concurrently.

    Evidence comes back in sub-query input order no matter which stream
    finishes first, and each stream's ledger records merge in that same
    order, so output and accounting are scheduling-independent. A failure in
    one stream becomes error evidence without touching its siblings.
    """
    if ledger is None:
        ledger = CostLedger()
    ledger.t = len(registry)

    def run_one(sq: SubQuery) -> tuple[Evidence, CostLedger]:
        local = CostLedger()
        try:
            if sq.route is Route.MEMORY_BANK:
                ev = _memory_bank_stream(sq.text, bank, kb, model, gateway, local, cfg)
            elif sq.route is Route.DEEP_RETRIEVAL:
                ev = _deep_retrieval(sq.text, kb, model, gateway, local, cfg)
            elif sq.route is Route.TOOL:
                ev = call_tool(sq, registry, gateway, local, cfg)
            else:
                ev = _direct_stream(sq.text, gateway, local, cfg)
        except Exception as exc:
            logger.warning("stream failed for %r: %s", sq.text[:60], exc)
            ev = Evidence(sq.route, sq.text, {}, error=str(exc))
        return ev, local

    if cfg.jobs > 1 and len(subqueries) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(run_one, subqueries))
    else:
        outcomes = [run_one(sq) for sq in subqueries]

    evidence = []
    for ev, local in outcomes:  # input order: pool.map preserves it
        evidence.append(ev)
        ledger.extend(local.records)
    return evidence


_MERGE_SYSTEM = (
    "Merge the evidence below into one final answer to the user's question. "
    "Cite streams where useful. Reply with the answer only."
)


def synthesize(
    query: str,
    evidence: Sequence[Evidence],
    gateway: LlmGateway,
    ledger: CostLedger,
    cfg: PipelineConfig = PipelineConfig(),
) -> str:
    """Fuse evidence into the final answer.

    With a single sub-query the evidence answer is returned as-is and no
    merging step runs (or is ledgered). When every stream failed, the error
    summary comes back directly instead of a model call.
    """
    if not evidence:
        raise ValueError("no evidence to synthesize")
    if all(ev.error for ev in evidence):
        reasons = "; ".join(ev.error for ev in evidence if ev.error)
        return f"Unable to answer: all retrieval streams failed ({reasons})"
    if len(evidence) == 1:
        return evidence[0].answer_text
    labeled = "\n".join(f"[{ev.stream.value}] {ev.answer_text}" for ev in evidence)
    req = ChatRequest(
        model=cfg.chat_model,
        messages=[("system", _MERGE_SYSTEM + f"\nQuestion: {query}"), ("user", labeled)],
        purpose="merge",
    )
    resp = _timed_call(gateway, req, ledger, "Final answer merging")
    return (resp.text or "").strip()


def answer_query(
    query: str,
    history: Sequence[ConversationTurn],
    kb: KnowledgeBase,
    bank: Optional[MemoryBank],
    registry: ToolRegistry,
    model: RerankModel,
    gateway: LlmGateway,
    cfg: PipelineConfig = PipelineConfig(),
    ledger: Optional[CostLedger] = None,
) -> tuple[str, list[Evidence], CostLedger]:
    """End-to-end: normalize, decompose, execute all streams, synthesize."""
    if ledger is None:
        ledger = CostLedger()
    normalized = normalize_query(query, history, gateway, ledger, cfg)
    subqueries = decompose(normalized, gateway, bank, registry.specs(), ledger, cfg)
    evidence = execute(subqueries, kb, bank, registry, model, gateway, cfg, ledger)
    answer = synthesize(normalized, evidence, gateway, ledger, cfg)
    return answer, evidence, ledger


# ---------------------------------------------------------------------------
# Closed-form cost model


@dataclass(frozen=True)
class CostEstimate:
    tokens: int
    usd_per_k_queries: float
    steps: dict  # step name -> token count


def estimate_cost(n: int, t: int) -> CostEstimate:
    """Expected per-query token usage and per-thousand-queries cost for a
    request with `n` sub-queries and `t` available tools.

    The per-step token decomposition (rewriting 600; tool use 250n + 100tn;
    sub-query answering 4500n; merging 200(n-1)) sums exactly to the total.
    """
    if not isinstance(n, int) or not isinstance(t, int):
        raise ValueError("n and t must be integers")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    steps = {
        "Query rewriting": 600,
        "Tool use": 250 * n + 100 * t * n,
        "Sub-query answering": 4500 * n,
        "Final answer merging": 200 * (n - 1),
    }
    total = 400 + 4950 * n + 100 * n * t
    assert total == sum(steps.values())
    usd = 0.11 + 1.4 * n + 0.028 * n * t
    return CostEstimate(tokens=total, usd_per_k_queries=usd, steps=steps)
