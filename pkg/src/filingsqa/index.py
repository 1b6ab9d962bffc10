"""The three physical retrieval indexes: BM25 inverted, dense vector, metadata.

All search is exact (exhaustive scoring); at the corpus sizes this engine
targets, approximate structures buy nothing and cost reproducibility. Every
ranking surface breaks ties by ascending chunk id so results are stable.

Each index persists to a single JSON file with a versioned header; loading
validates the header and the structural invariants. Rebuilding from the same
chunk store yields byte-identical files.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Chunk, ChunkId, chunk_id_str, parse_chunk_id
from .embedding import EmbedderConfig, embed

MAGIC = "filingsqa-index"
FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; the shared tokenizer for all lexical scoring."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not (0.0 <= self.b <= 1.0):
            raise ValueError(f"b must be in [0, 1], got {self.b}")


class InvertedIndex:
    """Term -> (chunk, term frequency) postings with BM25 scoring."""

    def __init__(self) -> None:
        self.postings: dict[str, dict[ChunkId, int]] = {}
        self.doc_lengths: dict[ChunkId, int] = {}
        self.avg_doc_length: float = 0.0

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @classmethod
    def build(cls, items: Iterable[tuple[ChunkId, str]]) -> "InvertedIndex":
        idx = cls()
        for cid, text in items:
            tokens = tokenize(text)
            idx.doc_lengths[cid] = len(tokens)
            for tok in tokens:
                idx.postings.setdefault(tok, {})
                idx.postings[tok][cid] = idx.postings[tok].get(cid, 0) + 1
        if idx.doc_lengths:
            idx.avg_doc_length = sum(idx.doc_lengths.values()) / len(idx.doc_lengths)
        return idx

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def bm25_score(
        self, query_terms: Sequence[str], chunk_id: ChunkId, params: Bm25Params = Bm25Params()
    ) -> float:
        """BM25 score of one chunk for a tokenized query.

        idf uses the ln(1 + .) form, so scores are non-negative even for
        terms present in most chunks. Repeated query terms contribute once
        per occurrence (additive over query-term multisets).
        """
        if chunk_id not in self.doc_lengths:
            raise ValueError(f"unknown chunk id: {chunk_id_str(chunk_id)}")
        length = self.doc_lengths[chunk_id]
        norm = params.k1 * (1.0 - params.b + params.b * length / self.avg_doc_length)
        score = 0.0
        for term in query_terms:
            tf = self.postings.get(term, {}).get(chunk_id, 0)
            if tf == 0:
                continue
            score += self.idf(term) * tf * (params.k1 + 1.0) / (tf + norm)
        return score

    def search(
        self, query: str, k: int, params: Bm25Params = Bm25Params()
    ) -> list[tuple[ChunkId, float]]:
        """Top-k chunks by BM25, ties broken by ascending chunk id.

        Exactly matches exhaustive scoring of every chunk: chunks sharing no
        query term score 0 and still take part in the ranking.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not self.doc_lengths:
            return []
        terms = tokenize(query)
        scores: dict[ChunkId, float] = {}
        for term in terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for cid, tf in plist.items():
                length = self.doc_lengths[cid]
                norm = params.k1 * (1.0 - params.b + params.b * length / self.avg_doc_length)
                scores[cid] = scores.get(cid, 0.0) + idf * tf * (params.k1 + 1.0) / (tf + norm)
        ranked = sorted(
            self.doc_lengths, key=lambda cid: (-scores.get(cid, 0.0), cid)
        )
        return [(cid, scores.get(cid, 0.0)) for cid in ranked[:k]]

    # -- persistence --------------------------------------------------------

    def to_json(self, params: Bm25Params = Bm25Params()) -> dict:
        return {
            "magic": MAGIC,
            "format": FORMAT_VERSION,
            "kind": "sparse",
            "params": {"k1": params.k1, "b": params.b},
            "postings": {
                term: [[chunk_id_str(cid), tf] for cid, tf in sorted(plist.items())]
                for term, plist in sorted(self.postings.items())
            },
            "doc_lengths": {
                chunk_id_str(cid): n for cid, n in sorted(self.doc_lengths.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InvertedIndex":
        _check_header(obj, "sparse")
        idx = cls()
        idx.doc_lengths = {
            parse_chunk_id(s): n for s, n in obj["doc_lengths"].items()
        }
        for term, plist in obj["postings"].items():
            idx.postings[term] = {parse_chunk_id(s): tf for s, tf in plist}
        for term, plist in idx.postings.items():
            for cid in plist:
                if cid not in idx.doc_lengths:
                    raise ValueError(
                        f"posting for {term!r} references unknown chunk {chunk_id_str(cid)}"
                    )
        if idx.doc_lengths:
            idx.avg_doc_length = sum(idx.doc_lengths.values()) / len(idx.doc_lengths)
        return idx


class VectorIndex:
    """Exact cosine search over unit vectors keyed by chunk id."""

    def __init__(self, dim: int, kind: str = "dense"):
        self.dim = dim
        self.kind = kind
        self._ids: list[ChunkId] = []
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, cid: ChunkId) -> bool:
        return cid in set(self._ids)

    @property
    def ids(self) -> list[ChunkId]:
        return list(self._ids)

    @classmethod
    def build(
        cls, entries: Iterable[tuple[ChunkId, np.ndarray]], dim: int, kind: str = "dense"
    ) -> "VectorIndex":
        idx = cls(dim, kind)
        rows = []
        for cid, vec in entries:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {chunk_id_str(cid)} has dim {vec.shape}, want ({dim},)")
            if not np.isfinite(vec).all():
                raise ValueError(f"non-finite vector for {chunk_id_str(cid)}")
            idx._ids.append(cid)
            rows.append(vec)
        idx._matrix = np.vstack(rows) if rows else np.zeros((0, dim))
        return idx

    def vector(self, cid: ChunkId) -> np.ndarray:
        i = self._ids.index(cid)
        return self._matrix[i]

    def search(self, query_vec: np.ndarray, k: int) -> list[tuple[ChunkId, float]]:
        """Exact top-k by cosine (vectors are unit-norm, so plain dot),
        ties broken by ascending chunk id.

        Scores are computed per entry rather than via one matrix product:
        blocked BLAS kernels can yield bit-different sums for identical rows
        at different offsets, which would break exact tie handling between
        chunks sharing a vector (e.g. a section's summary).
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        query_vec = np.asarray(query_vec, dtype=np.float64)
        if query_vec.shape != (self.dim,):
            raise ValueError(f"query dim {query_vec.shape} does not match index dim ({self.dim},)")
        if not self._ids:
            return []
        scores = [float(np.dot(self._matrix[i], query_vec)) for i in range(len(self._ids))]
        order = sorted(range(len(self._ids)), key=lambda i: (-scores[i], self._ids[i]))
        return [(self._ids[i], scores[i]) for i in order[:k]]

    # -- persistence --------------------------------------------------------

    def to_json(self) -> dict:
        pairs = sorted(zip(self._ids, self._matrix), key=lambda p: p[0])
        return {
            "magic": MAGIC,
            "format": FORMAT_VERSION,
            "kind": self.kind,
            "params": {"dim": self.dim},
            "entries": {
                chunk_id_str(cid): [float(x) for x in vec] for cid, vec in pairs
            },
        }

    @classmethod
    def from_json(cls, obj: dict, kind: str = "dense") -> "VectorIndex":
        _check_header(obj, kind)
        dim = obj["params"]["dim"]
        entries = [
            (parse_chunk_id(s), np.asarray(vec, dtype=np.float64))
            for s, vec in obj["entries"].items()
        ]
        return cls.build(entries, dim=dim, kind=kind)


def _check_header(obj: dict, kind: str) -> None:
    if obj.get("magic") != MAGIC:
        raise ValueError(f"not a {MAGIC} file")
    if obj.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported index format {obj.get('format')}")
    if obj.get("kind") != kind:
        raise ValueError(f"expected {kind} index, found {obj.get('kind')}")


def save_index(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def load_index_file(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Knowledge base: chunk store + the three indexes, built then frozen.


@dataclass
class KnowledgeBase:
    """Handle over a curated chunk store and its sparse/dense/metadata indexes.

    Built once and then read-only: safe for unrestricted concurrent queries.
    """

    chunks: dict[ChunkId, Chunk]
    order: list[ChunkId]
    sparse: InvertedIndex
    dense: VectorIndex
    metadata: VectorIndex
    embed_cfg: EmbedderConfig = field(default_factory=EmbedderConfig)
    bm25_params: Bm25Params = field(default_factory=Bm25Params)

    def __len__(self) -> int:
        return len(self.order)

    def chunk(self, cid: ChunkId) -> Chunk:
        return self.chunks[cid]

    def has(self, cid: ChunkId) -> bool:
        return cid in self.chunks

    def all_chunks(self) -> list[Chunk]:
        return [self.chunks[cid] for cid in self.order]


def build_indexes(
    chunks: Sequence[Chunk],
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> KnowledgeBase:
    """Index a curated chunk list into a queryable knowledge base.

    Chunks must already be embedded. The metadata index covers only chunks
    carrying a section summary; chunks sharing a summary share its vector,
    so whole sections surface together on summary matches.
    """
    store: dict[ChunkId, Chunk] = {}
    order: list[ChunkId] = []
    for chunk in chunks:
        if chunk.id in store:
            raise ValueError(f"duplicate chunk id {chunk.id_str}")
        if chunk.embedding is None:
            raise ValueError(f"chunk {chunk.id_str} has no embedding")
        store[chunk.id] = chunk
        order.append(chunk.id)

    sparse = InvertedIndex.build((c.id, c.text) for c in chunks)
    dense = VectorIndex.build(
        ((c.id, c.embedding) for c in chunks), dim=embed_cfg.dim, kind="dense"
    )
    summary_vecs: dict[str, np.ndarray] = {}
    meta_entries = []
    for c in chunks:
        if c.summary:
            if c.summary not in summary_vecs:
                summary_vecs[c.summary] = embed(c.summary, embed_cfg)
            meta_entries.append((c.id, summary_vecs[c.summary]))
    metadata = VectorIndex.build(meta_entries, dim=embed_cfg.dim, kind="metadata")
    return KnowledgeBase(
        chunks=store,
        order=order,
        sparse=sparse,
        dense=dense,
        metadata=metadata,
        embed_cfg=embed_cfg,
        bm25_params=bm25_params,
    )


def save_knowledge_base(kb: KnowledgeBase, directory: str | Path) -> None:
    from .corpus import write_chunks

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_chunks(kb.all_chunks(), directory / "chunks.jsonl")
    save_index(kb.sparse.to_json(kb.bm25_params), directory / "sparse.idx.json")
    save_index(kb.dense.to_json(), directory / "dense.idx.json")
    save_index(kb.metadata.to_json(), directory / "metadata.idx.json")
    manifest = {
        "magic": MAGIC,
        "format": FORMAT_VERSION,
        "kind": "manifest",
        "embedder": {
            "dim": kb.embed_cfg.dim,
            "ngram_min": kb.embed_cfg.ngram_min,
            "ngram_max": kb.embed_cfg.ngram_max,
            "seed": kb.embed_cfg.seed,
        },
        "bm25": {"k1": kb.bm25_params.k1, "b": kb.bm25_params.b},
        "chunk_order": [chunk_id_str(cid) for cid in kb.order],
    }
    save_index(manifest, directory / "kb.json")


def load_knowledge_base(directory: str | Path) -> KnowledgeBase:
    from .corpus import read_chunks

    directory = Path(directory)
    manifest = load_index_file(directory / "kb.json")
    _check_header(manifest, "manifest")
    embed_cfg = EmbedderConfig(**manifest["embedder"])
    bm25_params = Bm25Params(**manifest["bm25"])
    chunks = read_chunks(directory / "chunks.jsonl")
    store = {c.id: c for c in chunks}
    order = [parse_chunk_id(s) for s in manifest["chunk_order"]]
    if set(order) != set(store):
        raise ValueError("manifest chunk order does not match chunk store")
    sparse = InvertedIndex.from_json(load_index_file(directory / "sparse.idx.json"))
    dense = VectorIndex.from_json(load_index_file(directory / "dense.idx.json"), kind="dense")
    metadata = VectorIndex.from_json(
        load_index_file(directory / "metadata.idx.json"), kind="metadata"
    )
    return KnowledgeBase(
        chunks=store,
        order=order,
        sparse=sparse,
        dense=dense,
        metadata=metadata,
        embed_cfg=embed_cfg,
        bm25_params=bm25_params,
    )
