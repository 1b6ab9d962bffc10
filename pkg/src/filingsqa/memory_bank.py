"""High-frequency answer cache: canonical questions x fiscal periods.

The bank is a small, human-editable table of expert-curated questions whose
cells hold verified answers per period. Incoming queries are matched against
the canonical questions by three parallel measures (character subsequence,
self-normalized BM25, embedding cosine); any one passing its threshold makes
the question a match, letting the pipeline skip deep retrieval entirely.
Only verified cells are ever served.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import chunk_id_str
from .embedding import EmbedderConfig, cosine, embed
from .gateway import ChatRequest, LlmGateway
from .index import InvertedIndex, KnowledgeBase, tokenize

logger = logging.getLogger(__name__)

BANK_MAGIC = "filingsqa-bank"
BANK_FORMAT = 1

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def normalize_question(text: str, stop_entities: Sequence[str] = ()) -> str:
    """Lowercase, strip punctuation, drop configured stop-entities, collapse
    whitespace. Applied to canonical questions at load and to queries at
    match time so both sides compare in the same form."""
    out = text.lower().translate(_PUNCT_TABLE)
    for entity in stop_entities:
        out = re.sub(rf"(?<!\w){re.escape(entity.lower())}(?!\w)", " ", out)
    return " ".join(out.split())


@dataclass(frozen=True)
class MatchThresholds:
    tau_seq: float = 0.85
    tau_bm25: float = 0.6
    tau_sem: float = 0.9

    def __post_init__(self) -> None:
        for name, value in (
            ("tau_seq", self.tau_seq),
            ("tau_bm25", self.tau_bm25),
            ("tau_sem", self.tau_sem),
        ):
            if not (0.0 < value <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {value}")


@dataclass
class CanonicalQuestion:
    text: str  # stored normalized
    subject: str = ""
    embedding: Optional[np.ndarray] = field(default=None, compare=False)


@dataclass
class Cell:
    value: str
    source_chunk_ids: list[str] = field(default_factory=list)
    verified: bool = False


@dataclass
class MemoryBank:
    questions: list[CanonicalQuestion] = field(default_factory=list)
    periods: list[str] = field(default_factory=list)
    cells: dict[tuple[int, int], Cell] = field(default_factory=dict)
    stop_entities: list[str] = field(default_factory=list)
    embed_cfg: EmbedderConfig = field(default_factory=EmbedderConfig)
    _bm25: Optional[InvertedIndex] = field(default=None, repr=False)
    _self_scores: Optional[list[float]] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        seen = set()
        for q in self.questions:
            if q.text in seen:
                raise ValueError(f"duplicate canonical question: {q.text!r}")
            seen.add(q.text)
        for (qi, pi) in self.cells:
            if not (0 <= qi < len(self.questions) and 0 <= pi < len(self.periods)):
                raise ValueError(f"cell index out of range: ({qi}, {pi})")

    def ensure_indexed(self) -> None:
        """Build the lazy question embeddings and BM25 index."""
        for q in self.questions:
            if q.embedding is None:
                q.embedding = embed(q.text, self.embed_cfg)
        if self._bm25 is None:
            self._bm25 = InvertedIndex.build(
                ((("q", i), q.text) for i, q in enumerate(self.questions))
            )
            self._self_scores = [
                self._bm25.bm25_score(tokenize(q.text), ("q", i))
                for i, q in enumerate(self.questions)
            ]

    # -- persistence: one human-editable JSON file ---------------------------

    def save(self, path: str | Path) -> None:
        obj = {
            "magic": BANK_MAGIC,
            "format": BANK_FORMAT,
            "questions": [{"text": q.text, "subject": q.subject} for q in self.questions],
            "periods": list(self.periods),
            "cells": {
                f"{qi},{pi}": {
                    "value": cell.value,
                    "sources": cell.source_chunk_ids,
                    "verified": cell.verified,
                }
                for (qi, pi), cell in sorted(self.cells.items())
            },
            "stop_entities": list(self.stop_entities),
        }
        Path(path).write_text(
            json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path, embed_cfg: EmbedderConfig = EmbedderConfig()) -> "MemoryBank":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("magic") != BANK_MAGIC:
            raise ValueError(f"not a {BANK_MAGIC} file")
        if obj.get("format") != BANK_FORMAT:
            raise ValueError(f"unsupported bank format {obj.get('format')}")
        stop_entities = obj.get("stop_entities", [])
        questions = [
            CanonicalQuestion(
                text=normalize_question(entry["text"], stop_entities),
                subject=entry.get("subject", ""),
            )
            for entry in obj.get("questions", [])
        ]
        cells = {}
        for key, entry in obj.get("cells", {}).items():
            qi, pi = key.split(",")
            cells[(int(qi), int(pi))] = Cell(
                value=entry["value"],
                source_chunk_ids=list(entry.get("sources", [])),
                verified=bool(entry.get("verified", False)),
            )
        return cls(
            questions=questions,
            periods=list(obj.get("periods", [])),
            cells=cells,
            stop_entities=stop_entities,
            embed_cfg=embed_cfg,
        )


# ---------------------------------------------------------------------------
# The three matchers


def subseq_similarity(a: str, b: str) -> float:
    """Ratcliff-Obershelp ratio: total characters covered by recursively
    matched longest common contiguous substrings, scaled as 2M/(|a|+|b|).
    Symmetric; 1.0 iff the strings are identical."""
    if not a or not b:
        raise ValueError("empty string")
    return SequenceMatcher(None, a, b, autojunk=False).ratio()


def bm25_match(query: str, bank: MemoryBank) -> list[float]:
    """Per-question BM25 of the query, normalized by each question's score
    against itself so thresholds live in [0, 1] (clamped above at 1)."""
    bank.ensure_indexed()
    if not bank.questions:
        return []
    terms = tokenize(query)
    scores = []
    for i in range(len(bank.questions)):
        raw = bank._bm25.bm25_score(terms, ("q", i))
        self_score = bank._self_scores[i]
        scores.append(min(1.0, raw / self_score) if self_score > 0 else 0.0)
    return scores


def semantic_match(query: str, bank: MemoryBank) -> list[float]:
    """Embedding cosine of the query against each canonical question."""
    bank.ensure_indexed()
    q_vec = embed(query, bank.embed_cfg)
    return [cosine(q_vec, q.embedding) for q in bank.questions]


@dataclass(frozen=True)
class MatchResult:
    question_idx: int
    seq: float
    bm25: float
    sem: float

    @property
    def best(self) -> float:
        return max(self.seq, self.bm25, self.sem)


def match(
    query: str, bank: MemoryBank, thresholds: MatchThresholds = MatchThresholds()
) -> Optional[MatchResult]:
    """Match a query against the bank's canonical questions.

    A question matches when ANY of the three scores clears its threshold
    (strictly greater). Among matches, the one with the highest single score
    wins; ties go to the lowest index. Returns None when nothing matches or
    the bank is empty.
    """
    if not bank.questions:
        return None
    normalized = normalize_question(query, bank.stop_entities)
    if not normalized:
        return None
    bm25_scores = bm25_match(normalized, bank)
    sem_scores = semantic_match(normalized, bank)
    results = []
    for i, q in enumerate(bank.questions):
        seq = subseq_similarity(normalized, q.text)
        if (
            seq > thresholds.tau_seq
            or bm25_scores[i] > thresholds.tau_bm25
            or sem_scores[i] > thresholds.tau_sem
        ):
            results.append(MatchResult(i, seq, bm25_scores[i], sem_scores[i]))
    if not results:
        return None
    return max(results, key=lambda r: (r.best, -r.question_idx))


@dataclass(frozen=True)
class LookupResult:
    hit: bool
    reason: Optional[str] = None  # set on misses
    question: Optional[str] = None
    period: Optional[str] = None
    value: Optional[str] = None
    sources: tuple[str, ...] = ()
    scores: Optional[MatchResult] = None


def lookup(
    query: str,
    period: Optional[str],
    bank: MemoryBank,
    thresholds: MatchThresholds = MatchThresholds(),
) -> LookupResult:
    """Serve a verified cell for a matching canonical question.

    Unspecified periods default to the bank's latest. Misses (no matching
    question, or a matched question whose cell is missing/unverified) report
    a reason so the pipeline can fall through to deep retrieval.
    """
    result = match(query, bank, thresholds)
    if result is None:
        return LookupResult(hit=False, reason="no_match")
    question = bank.questions[result.question_idx]
    if period is None:
        if not bank.periods:
            return LookupResult(hit=False, reason="unverified", question=question.text)
        period = bank.periods[-1]
    if period not in bank.periods:
        return LookupResult(
            hit=False, reason="unverified", question=question.text, period=period
        )
    cell = bank.cells.get((result.question_idx, bank.periods.index(period)))
    if cell is None or not cell.verified:
        return LookupResult(
            hit=False, reason="unverified", question=question.text, period=period
        )
    return LookupResult(
        hit=True,
        question=question.text,
        period=period,
        value=cell.value,
        sources=tuple(cell.source_chunk_ids),
        scores=result,
    )


def verify_cell(bank: MemoryBank, question_text: str, period: str) -> None:
    """Flip exactly one cell to verified; errors if the cell does not exist."""
    normalized = normalize_question(question_text, bank.stop_entities)
    q_indexes = [i for i, q in enumerate(bank.questions) if q.text == normalized]
    if not q_indexes:
        raise ValueError(f"unknown canonical question: {question_text!r}")
    if period not in bank.periods:
        raise ValueError(f"unknown period: {period!r}")
    key = (q_indexes[0], bank.periods.index(period))
    cell = bank.cells.get(key)
    if cell is None:
        raise ValueError(f"no cell for ({question_text!r}, {period!r})")
    cell.verified = True


_BANK_INIT_SYSTEM = (
    "Answer the canonical financial question for the stated fiscal period "
    "using only the provided filing excerpts. Reply with the value and a "
    "short justification."
)


def init_bank(
    questions: Sequence[str | tuple[str, str]],
    kb: KnowledgeBase,
    model,
    gateway: LlmGateway,
    periods: Sequence[str],
    stop_entities: Sequence[str] = (),
    k_each: int = 10,
    high_recall_multiplier: int = 3,
    bundle_k: int = 2,
    tau_bundle: float = 0.8,
    top_r: int = 10,
    reasoning_model: str = "reasoning",
) -> MemoryBank:
    """Populate a bank by running deep retrieval per (question, period).

    Offline accuracy-over-latency mode: the candidate budget is enlarged by
    `high_recall_multiplier` and answers go through the gateway's reasoning
    model slot. Every cell starts unverified; cells whose pipeline run fails
    are simply left empty.

    `questions` entries are either plain strings or (text, subject) pairs.
    """
    from .reranker import score_texts
    from .retrieval import bundle_candidates, bundle_text, multipath_retrieve

    canon = []
    for entry in questions:
        text, subject = entry if isinstance(entry, tuple) else (entry, "")
        canon.append(
            CanonicalQuestion(
                text=normalize_question(text, stop_entities), subject=subject
            )
        )
    bank = MemoryBank(
        questions=canon,
        periods=list(periods),
        stop_entities=list(stop_entities),
        embed_cfg=kb.embed_cfg,
    )

    budget = k_each * high_recall_multiplier
    for qi, question in enumerate(bank.questions):
        for pi, period in enumerate(bank.periods):
            query = f"{question.text} {period}".strip()
            try:
                candidates = multipath_retrieve(query, budget, kb)
                if not candidates:
                    continue
                bundles = bundle_candidates(candidates, kb, bundle_k, tau_bundle)
                texts = [bundle_text(b, kb) for b in bundles]
                scores = score_texts(query, texts, model, kb.embed_cfg, kb.bm25_params)
                ranked = sorted(
                    zip(bundles, texts, scores), key=lambda item: (-item[2], item[0].anchor)
                )[:top_r]
                context = "\n\n".join(text for _, text, _ in ranked)
                resp = gateway.complete(
                    ChatRequest(
                        model=reasoning_model,
                        messages=[
                            ("system", _BANK_INIT_SYSTEM + "\n\nExcerpts:\n" + context),
                            ("user", query),
                        ],
                        purpose="bank-init",
                    )
                )
                value = (resp.text or "").strip()
                if not value:
                    continue
                sources: list[str] = []
                for b, _, _ in ranked:
                    sources.extend(chunk_id_str(cid) for cid in b.members)
                bank.cells[(qi, pi)] = Cell(
                    value=value,
                    source_chunk_ids=list(dict.fromkeys(sources)),
                    verified=False,
                )
            except Exception as exc:
                logger.warning(
                    "bank init failed for (%r, %r): %s", question.text, period, exc
                )
    return bank
