"""HTTP API over the query pipeline for the web console and external clients.

Sessions are in-memory (optionally file-backed); requests within one session
serialize on a per-session lock so history ordering stays meaningful, while
different sessions run concurrently. Errors use a structured {code, message}
body.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .config import AppConfig
from .gateway import LlmGateway
from .index import KnowledgeBase, load_knowledge_base
from .memory_bank import MemoryBank, verify_cell
from .pipeline import (
    ConversationTurn,
    CostLedger,
    ToolRegistry,
    answer_query,
    estimate_cost,
)
from .reranker import RerankModel

logger = logging.getLogger(__name__)


@dataclass
class Session:
    session_id: str
    history: list[ConversationTurn] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class Resources:
    kb: KnowledgeBase
    bank: Optional[MemoryBank]
    model: RerankModel
    gateway: LlmGateway
    registry: ToolRegistry
    config: AppConfig


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def _evidence_payload(evidence) -> list[dict]:
    return [
        {
            "stream": ev.stream.value,
            "subquery": ev.subquery,
            "provenance": ev.provenance,
            "payload": ev.payload,
            "error": ev.error,
        }
        for ev in evidence
    ]


def _ledger_payload(ledger: CostLedger) -> dict:
    return {
        "records": ledger.to_dicts(),
        "total_tokens": ledger.total_tokens,
        "total_wall_s": ledger.total_wall_s,
        "n": ledger.n,
        "t": ledger.t,
    }


def create_app(resources: Resources) -> FastAPI:
    app = FastAPI(title="filingsqa", version=__version__)
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    session_dir = resources.config.session_dir

    def persist(session: Session) -> None:
        if not session_dir:
            return
        path = Path(session_dir) / f"{session.session_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(
                {
                    "session_id": session.session_id,
                    "history": [
                        {"role": t.role, "text": t.text, "timestamp": t.timestamp}
                        for t in session.history
                    ],
                    "ledger": _ledger_payload(session.ledger),
                },
                sort_keys=True,
            ),
            encoding="utf-8",
        )

    @app.exception_handler(Exception)
    async def on_error(request: Request, exc: Exception):
        logger.exception("unhandled error on %s", request.url.path)
        return _error(500, "internal", str(exc))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/cost-estimate")
    def cost_estimate(n: int = 1, t: int = 0):
        try:
            est = estimate_cost(n, t)
        except ValueError as exc:
            return _error(400, "bad_request", str(exc))
        return {
            "n": n,
            "t": t,
            "tokens": est.tokens,
            "usd_per_k_queries": est.usd_per_k_queries,
            "steps": est.steps,
        }

    @app.post("/sessions")
    def create_session():
        session = Session(session_id=uuid.uuid4().hex)
        with sessions_lock:
            sessions[session.session_id] = session
        return {"session_id": session.session_id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown_session", f"no session {session_id}")
        return {
            "session_id": session.session_id,
            "history": [
                {"role": t.role, "text": t.text, "timestamp": t.timestamp}
                for t in session.history
            ],
            "ledger": _ledger_payload(session.ledger),
        }

    @app.post("/sessions/{session_id}/query")
    async def query_session(session_id: str, request: Request):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown_session", f"no session {session_id}")
        body = await request.json()
        text = (body.get("text") or "").strip()
        if not text:
            return _error(400, "bad_request", "missing query text")
        with session.lock:
            before = len(session.ledger.records)
            answer, evidence, _ = answer_query(
                text,
                session.history,
                resources.kb,
                resources.bank,
                resources.registry,
                resources.model,
                resources.gateway,
                resources.config.pipeline,
                session.ledger,
            )
            now = time.time()
            session.history.append(ConversationTurn("user", text, now))
            session.history.append(ConversationTurn("assistant", answer, now))
            delta_records = session.ledger.records[before:]
            persist(session)
        delta = CostLedger(records=list(delta_records), n=session.ledger.n, t=session.ledger.t)
        return {
            "answer": answer,
            "evidence": _evidence_payload(evidence),
            "ledger_delta": _ledger_payload(delta),
            "ledger_total_tokens": session.ledger.total_tokens,
        }

    @app.get("/memory-bank")
    def memory_bank_view():
        bank = resources.bank
        if bank is None:
            return {"questions": [], "periods": [], "cells": {}}
        return {
            "questions": [{"text": q.text, "subject": q.subject} for q in bank.questions],
            "periods": bank.periods,
            "cells": {
                f"{qi},{pi}": {
                    "value": cell.value,
                    "sources": cell.source_chunk_ids,
                    "verified": cell.verified,
                }
                for (qi, pi), cell in sorted(bank.cells.items())
            },
        }

    @app.post("/memory-bank/verify")
    async def memory_bank_verify(request: Request):
        bank = resources.bank
        if bank is None:
            return _error(400, "no_bank", "no memory bank loaded")
        body = await request.json()
        question = body.get("question", "")
        period = body.get("period", "")
        try:
            verify_cell(bank, question, period)
        except ValueError as exc:
            return _error(400, "bad_request", str(exc))
        return {"verified": True, "question": question, "period": period}

    return app


def serve(config: AppConfig, resources: Optional[Resources] = None) -> None:
    """Load resources per config and run the API; exits nonzero on startup failure."""
    import uvicorn

    if resources is None:
        try:
            kb = load_knowledge_base(config.kb_dir)
            bank = (
                MemoryBank.load(config.bank_path, config.embedder)
                if Path(config.bank_path).exists()
                else None
            )
            if Path(config.model_path).exists():
                model = RerankModel.load(config.model_path)
            else:
                from .reranker import pretrained_model

                logger.info("no model at %s; using the pretrained scorer", config.model_path)
                model = pretrained_model()
            gateway = config.gateway.build()
            registry = config.build_registry()
        except Exception as exc:
            raise SystemExit(f"service startup failed: {exc}")
        resources = Resources(kb, bank, model, gateway, registry, config)
    app = create_app(resources)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
