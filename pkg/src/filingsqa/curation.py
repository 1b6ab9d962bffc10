"""Knowledge curation: turn raw filing documents into an indexed chunk store.

The pipeline runs chunking, textual transformation of tables and figures,
co-reference resolution, embedding, near-duplicate removal, and section
summary generation, then builds the three retrieval indexes. Gateway failures
degrade per chunk (skip and log) rather than aborting a whole corpus build.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import Chunk, DocumentRecord, Modality, chunk_document, words
from .embedding import EmbedderConfig, embed
from .gateway import ChatRequest, LlmGateway
from .index import Bm25Params, KnowledgeBase, build_indexes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurationConfig:
    tau_sim: float = 0.95
    chunk_length: int = 200

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_sim <= 1.0):
            raise ValueError(f"tau_sim must be in (0, 1], got {self.tau_sim}")
        if self.chunk_length < 1:
            raise ValueError(f"chunk_length must be >= 1, got {self.chunk_length}")


class CurationError(Exception):
    """Gateway failure while curating one chunk; carries the chunk id."""

    def __init__(self, chunk_id, message: str):
        super().__init__(f"{chunk_id}: {message}")
        self.chunk_id = chunk_id


_TRANSFORM_SYSTEM = (
    "Rewrite the following {kind} content from a financial filing as plain "
    "narrative sentences that capture its data, trends, and relationships. "
    "Reply with the narrative only."
)

_COREF_SYSTEM = (
    "Rewrite the passage replacing every pronoun with its explicit antecedent, "
    "using the section context: {context}. Reply with the rewritten passage only."
)

_SUMMARY_SYSTEM = (
    "Summarize the following filing section in a few sentences for use as "
    "retrieval metadata. Reply with the summary only."
)


def transform_nontext(
    chunk: Chunk, gateway: LlmGateway, chunk_length: int = 200, model: str = "chat"
) -> list[Chunk]:
    """Rewrite a table or figure chunk as narrative text chunks.

    The gateway narrative replaces the raw content; if it exceeds
    `chunk_length` words it is re-split into fixed-length parts. Part 0 keeps
    the source position and later parts take the following ordinals; callers
    rebuilding a whole document renumber afterwards. Raises CurationError
    (carrying the chunk id) when the gateway fails.
    """
    if chunk.modality is Modality.TEXT:
        raise ValueError(f"chunk {chunk.id_str} is already text")
    req = ChatRequest(
        model=model,
        messages=[
            ("system", _TRANSFORM_SYSTEM.format(kind=chunk.modality.value)),
            ("user", chunk.text),
        ],
        purpose="transform",
    )
    try:
        resp = gateway.complete(req)
    except Exception as exc:
        raise CurationError(chunk.id, f"transformation failed: {exc}") from exc
    narrative = (resp.text or "").strip()
    if not narrative:
        raise CurationError(chunk.id, "transformation returned empty narrative")

    ws = words(narrative)
    parts: list[Chunk] = []
    for i, start in enumerate(range(0, len(ws), chunk_length)):
        window = ws[start : start + chunk_length]
        parts.append(
            Chunk(
                doc_id=chunk.doc_id,
                position=chunk.position + i,
                modality=Modality.TEXT,
                text=" ".join(window),
                section_path=chunk.section_path,
                word_count=len(window),
            )
        )
    return parts


def resolve_coreferences(
    chunk: Chunk, section_context: str, gateway: LlmGateway, model: str = "chat"
) -> Chunk:
    """Replace pronouns in a text chunk with explicit antecedents.

    On gateway failure the original chunk comes back flagged unresolved so
    the pipeline can keep going.
    """
    if chunk.modality is not Modality.TEXT:
        raise ValueError(f"chunk {chunk.id_str} is not text")
    req = ChatRequest(
        model=model,
        messages=[
            ("system", _COREF_SYSTEM.format(context=section_context)),
            ("user", chunk.text),
        ],
        purpose="coref",
    )
    try:
        resp = gateway.complete(req)
    except Exception as exc:
        logger.warning("co-reference resolution failed for %s: %s", chunk.id_str, exc)
        return chunk.with_(unresolved=True)
    text = (resp.text or "").strip()
    if not text:
        logger.warning("co-reference resolution empty for %s", chunk.id_str)
        return chunk.with_(unresolved=True)
    return chunk.with_(text=text, word_count=len(words(text)))


def generate_section_summary(
    section_chunks: Sequence[Chunk], gateway: LlmGateway, model: str = "chat"
) -> str:
    """Produce the shared summary string for one section's chunks."""
    if not section_chunks:
        raise ValueError("section must contain at least one chunk")
    paths = {c.section_path for c in section_chunks}
    if len(paths) != 1:
        raise ValueError(f"chunks span multiple sections: {sorted(paths)}")
    text = " ".join(c.text for c in section_chunks)
    req = ChatRequest(
        model=model,
        messages=[("system", _SUMMARY_SYSTEM), ("user", text)],
        purpose="summary",
    )
    resp = gateway.complete(req)
    return (resp.text or "").strip()


def deduplicate(chunks: Sequence[Chunk], tau_sim: float) -> list[Chunk]:
    """Drop near-duplicate chunks in a single forward pass.

    A chunk is removed iff its embedding cosine with some already-retained
    earlier chunk exceeds `tau_sim`; relative order is preserved, so the
    output ids are a subsequence of the input ids. Idempotent.
    """
    retained: list[Chunk] = []
    vectors: list[np.ndarray] = []
    matrix: Optional[np.ndarray] = None
    for chunk in chunks:
        if chunk.embedding is None:
            raise ValueError(f"chunk {chunk.id_str} has no embedding")
        if matrix is not None and len(retained) > 0:
            sims = matrix @ chunk.embedding
            if float(sims.max()) > tau_sim:
                continue
        retained.append(chunk)
        vectors.append(chunk.embedding)
        matrix = np.vstack(vectors)
    return retained


def embed_chunks(chunks: Sequence[Chunk], cfg: EmbedderConfig) -> list[Chunk]:
    return [c.with_(embedding=embed(c.text, cfg)) for c in chunks]


def _curate_document(
    doc: DocumentRecord,
    cfg: CurationConfig,
    gateway: LlmGateway,
    embed_cfg: EmbedderConfig,
) -> list[Chunk]:
    raw = chunk_document(doc, cfg.chunk_length)
    transformed: list[Chunk] = []
    for chunk in raw:
        if chunk.modality is Modality.TEXT:
            transformed.append(chunk)
            continue
        try:
            transformed.extend(transform_nontext(chunk, gateway, cfg.chunk_length))
        except CurationError as exc:
            logger.warning("skipping chunk: %s", exc)
    # Renumber so positions are consecutive from 0 after splits and skips.
    renumbered = [c.with_(position=i) for i, c in enumerate(transformed)]
    resolved = [
        resolve_coreferences(c, f"{doc.title} / {c.section_path}", gateway)
        for c in renumbered
    ]
    return embed_chunks(resolved, embed_cfg)


def curate_chunks(
    docs: Sequence[DocumentRecord],
    cfg: CurationConfig = CurationConfig(),
    gateway: Optional[LlmGateway] = None,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    jobs: int = 1,
) -> list[Chunk]:
    """Run curation through to the final enriched chunk list.

    Steps: chunk each document, rewrite non-text chunks, resolve
    co-references, embed, de-duplicate across the corpus (order-stable
    sequential barrier), attach per-section summaries. Per-document curation
    fans out over `jobs` workers; results merge in input order, so
    concurrency never changes the output.
    """
    if gateway is None:
        from .gateway import MockLlmGateway

        gateway = MockLlmGateway()

    if jobs > 1 and len(docs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_doc = list(
                pool.map(lambda d: _curate_document(d, cfg, gateway, embed_cfg), docs)
            )
    else:
        per_doc = [_curate_document(d, cfg, gateway, embed_cfg) for d in docs]

    merged: list[Chunk] = [c for doc_chunks in per_doc for c in doc_chunks]
    deduped = deduplicate(merged, cfg.tau_sim)

    sections: dict[tuple[str, str], list[Chunk]] = {}
    for chunk in deduped:
        sections.setdefault((chunk.doc_id, chunk.section_path), []).append(chunk)
    summaries: dict[tuple[str, str], str] = {}
    for key, section_chunks in sections.items():
        try:
            summaries[key] = generate_section_summary(section_chunks, gateway)
        except Exception as exc:
            logger.warning("summary failed for section %s: %s", key, exc)
    return [
        c.with_(summary=summaries.get((c.doc_id, c.section_path)))
        for c in deduped
    ]


def build_knowledge_base(
    docs: Sequence[DocumentRecord],
    cfg: CurationConfig = CurationConfig(),
    gateway: Optional[LlmGateway] = None,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
    jobs: int = 1,
) -> KnowledgeBase:
    """Curate a corpus and index it: the one-call path from documents to a
    queryable knowledge base. Fully deterministic under the identity mock."""
    final = curate_chunks(docs, cfg, gateway, embed_cfg, jobs)
    return build_indexes(final, embed_cfg, bm25_params)
