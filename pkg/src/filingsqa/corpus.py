"""Documents, chunks, and fixed-length chunking of pre-extracted filing text.

Ingestion accepts structured text that has already been extracted from the
source filings: each document is an ordered list of modality-tagged blocks
(text, table, or figure) with a section path. Chunking splits text blocks
into fixed-length word windows; table and figure blocks stay whole until the
curation stage rewrites them as narrative text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

ChunkId = tuple[str, int]


class Modality(str, Enum):
    TEXT = "text"
    TABLE = "table"
    FIGURE = "figure"


@dataclass(frozen=True)
class Block:
    """One modality-tagged block of a document section."""

    path: str
    modality: Modality
    text: str


@dataclass(frozen=True)
class DocumentRecord:
    """A single filing: ordered, modality-tagged blocks under section paths."""

    doc_id: str
    title: str
    filing_type: str
    period: str
    sections: tuple[Block, ...]

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")


@dataclass(frozen=True)
class Chunk:
    """A fixed-length unit of filing text.

    Identified by (doc_id, position); positions are consecutive from 0 within
    a document at construction time, though downstream filtering may leave
    gaps. `summary` carries the section-level metadata attachment and
    `embedding` the dense vector, both filled in during curation.
    """

    doc_id: str
    position: int
    modality: Modality
    text: str
    section_path: str
    word_count: int
    summary: Optional[str] = None
    embedding: Optional[np.ndarray] = field(default=None, compare=False)
    unresolved: bool = False

    @property
    def id(self) -> ChunkId:
        return (self.doc_id, self.position)

    @property
    def id_str(self) -> str:
        return chunk_id_str(self.id)

    def with_(self, **changes) -> "Chunk":
        return replace(self, **changes)


def chunk_id_str(cid: ChunkId) -> str:
    return f"{cid[0]}:{cid[1]:04d}"


def parse_chunk_id(s: str) -> ChunkId:
    doc_id, _, pos = s.rpartition(":")
    if not doc_id:
        raise ValueError(f"malformed chunk id: {s!r}")
    return (doc_id, int(pos))


def words(text: str) -> list[str]:
    """Split into words: maximal non-whitespace runs."""
    return text.split()


def chunk_document(doc: DocumentRecord, chunk_length: int = 200) -> list[Chunk]:
    """Split a document into fixed-length chunks of `chunk_length` words.

    Text blocks are windowed so that every chunk except possibly the last per
    block has exactly `chunk_length` words; chunks never span blocks, so each
    inherits its block's modality and section path. Table and figure blocks
    become single chunks regardless of length (they are length-normalized
    only after textual transformation). Empty documents yield an empty list.
    """
    if chunk_length < 1:
        raise ValueError(f"chunk_length must be >= 1, got {chunk_length}")
    chunks: list[Chunk] = []
    position = 0
    for block in doc.sections:
        if block.modality is Modality.TEXT:
            ws = words(block.text)
            for start in range(0, len(ws), chunk_length):
                window = ws[start : start + chunk_length]
                chunks.append(
                    Chunk(
                        doc_id=doc.doc_id,
                        position=position,
                        modality=Modality.TEXT,
                        text=" ".join(window),
                        section_path=block.path,
                        word_count=len(window),
                    )
                )
                position += 1
        else:
            if not block.text.strip():
                continue
            chunks.append(
                Chunk(
                    doc_id=doc.doc_id,
                    position=position,
                    modality=block.modality,
                    text=block.text,
                    section_path=block.path,
                    word_count=len(words(block.text)),
                )
            )
            position += 1
    return chunks


# ---------------------------------------------------------------------------
# Line-delimited JSON formats: one object per document / per chunk.


def document_to_dict(doc: DocumentRecord) -> dict:
    return {
        "doc_id": doc.doc_id,
        "title": doc.title,
        "filing_type": doc.filing_type,
        "period": doc.period,
        "sections": [
            {"path": b.path, "modality": b.modality.value, "text": b.text}
            for b in doc.sections
        ],
    }


def document_from_dict(obj: dict) -> DocumentRecord:
    return DocumentRecord(
        doc_id=obj["doc_id"],
        title=obj.get("title", ""),
        filing_type=obj.get("filing_type", ""),
        period=obj.get("period", ""),
        sections=tuple(
            Block(path=s["path"], modality=Modality(s["modality"]), text=s["text"])
            for s in obj.get("sections", [])
        ),
    )


def read_corpus(path: str | Path) -> list[DocumentRecord]:
    docs = [
        document_from_dict(json.loads(line))
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    seen: set[str] = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc_id in corpus: {doc.doc_id}")
        seen.add(doc.doc_id)
    return docs


def write_corpus(docs: Iterable[DocumentRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_dict(doc), sort_keys=True) + "\n")


def chunk_to_dict(chunk: Chunk) -> dict:
    return {
        "doc_id": chunk.doc_id,
        "position": chunk.position,
        "modality": chunk.modality.value,
        "text": chunk.text,
        "section_path": chunk.section_path,
        "word_count": chunk.word_count,
        "summary": chunk.summary,
        "embedding": None if chunk.embedding is None else [float(x) for x in chunk.embedding],
        "unresolved": chunk.unresolved,
    }


def chunk_from_dict(obj: dict) -> Chunk:
    emb = obj.get("embedding")
    vec = None
    if emb is not None:
        vec = np.asarray(emb, dtype=np.float64)
        vec.flags.writeable = False
    return Chunk(
        doc_id=obj["doc_id"],
        position=obj["position"],
        modality=Modality(obj["modality"]),
        text=obj["text"],
        section_path=obj["section_path"],
        word_count=obj["word_count"],
        summary=obj.get("summary"),
        embedding=vec,
        unresolved=obj.get("unresolved", False),
    )


def read_chunks(path: str | Path) -> list[Chunk]:
    return [
        chunk_from_dict(json.loads(line))
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def write_chunks(chunks: Iterable[Chunk], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk_to_dict(chunk), sort_keys=True) + "\n")
