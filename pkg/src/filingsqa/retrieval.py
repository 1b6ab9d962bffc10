"""Multi-path retrieval fusion and semantic chunk bundling.

Three searches (BM25, dense, metadata) run in parallel over the knowledge
base; their top-k results merge into one candidate set with per-path
provenance. Each candidate can then be expanded into a bundle of adjacent,
semantically similar chunks from the same document so multi-paragraph
discussions survive retrieval intact.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .corpus import ChunkId
from .embedding import cosine, embed
from .index import KnowledgeBase


class RetrievalPath(str, Enum):
    SPARSE = "sparse"
    DENSE = "dense"
    METADATA = "metadata"


@dataclass
class Candidate:
    chunk_id: ChunkId
    provenance: set[RetrievalPath]
    path_scores: dict[RetrievalPath, float]


@dataclass(frozen=True)
class Bundle:
    """A retrieved anchor chunk plus its accepted neighbors, position-ordered."""

    anchor: ChunkId
    members: tuple[ChunkId, ...]


def normalize_scores(scores: Sequence[float]) -> list[float]:
    """Min-max normalize to [0, 1]; a flat positive profile maps to 1.0 and a
    flat non-positive one to 0.0. Only used for ordering, where BM25 and
    cosine magnitudes are incommensurable."""
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    if hi > lo:
        return [(s - lo) / (hi - lo) for s in scores]
    return [1.0 if hi > 0 else 0.0 for _ in scores]


def multipath_retrieve(query: str, k_each: int, kb: KnowledgeBase) -> list[Candidate]:
    """Union of the top-k_each results from all three retrieval paths.

    One candidate per chunk with merged provenance, ordered by provenance
    count (paths that agree first), then max normalized path score, then
    ascending chunk id. The merge is deterministic regardless of which path
    search finishes first.
    """
    if k_each < 1:
        raise ValueError(f"k_each must be >= 1, got {k_each}")
    query_vec = embed(query, kb.embed_cfg)

    def sparse():
        return kb.sparse.search(query, k_each, kb.bm25_params)

    def dense():
        return kb.dense.search(query_vec, k_each)

    def metadata():
        return kb.metadata.search(query_vec, k_each)

    with ThreadPoolExecutor(max_workers=3) as pool:
        futures = {
            RetrievalPath.SPARSE: pool.submit(sparse),
            RetrievalPath.DENSE: pool.submit(dense),
            RetrievalPath.METADATA: pool.submit(metadata),
        }
        results = {path: f.result() for path, f in futures.items()}

    candidates: dict[ChunkId, Candidate] = {}
    for path in (RetrievalPath.SPARSE, RetrievalPath.DENSE, RetrievalPath.METADATA):
        hits = results[path]
        normed = normalize_scores([score for _, score in hits])
        for (cid, _), norm_score in zip(hits, normed):
            cand = candidates.get(cid)
            if cand is None:
                cand = Candidate(chunk_id=cid, provenance=set(), path_scores={})
                candidates[cid] = cand
            cand.provenance.add(path)
            cand.path_scores[path] = norm_score

    def sort_key(cand: Candidate):
        return (-len(cand.provenance), -max(cand.path_scores.values()), cand.chunk_id)

    return sorted(candidates.values(), key=sort_key)


def bundle(anchor: ChunkId, kb: KnowledgeBase, k: int, tau_bundle: float) -> Bundle:
    """Expand an anchor chunk with similar neighbors within +-k positions.

    A neighbor joins the bundle iff it belongs to the same document, sits
    within the window, and its embedding cosine with the anchor exceeds
    `tau_bundle`. Members come back position-ordered with the anchor always
    included. Raising `tau_bundle` never grows a bundle.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if not kb.has(anchor):
        raise ValueError(f"unknown anchor chunk {anchor}")
    doc_id, pos = anchor
    anchor_vec = kb.chunk(anchor).embedding
    if anchor_vec is None:
        raise ValueError(f"anchor chunk {anchor} has no embedding")
    members = [anchor]
    for offset in range(-k, k + 1):
        if offset == 0:
            continue
        cid = (doc_id, pos + offset)
        if not kb.has(cid):
            continue
        neighbor = kb.chunk(cid)
        if neighbor.embedding is None:
            continue
        if cosine(anchor_vec, neighbor.embedding) > tau_bundle:
            members.append(cid)
    members.sort(key=lambda c: c[1])
    return Bundle(anchor=anchor, members=tuple(members))


def bundle_candidates(
    candidates: Sequence[Candidate], kb: KnowledgeBase, k: int, tau_bundle: float
) -> list[Bundle]:
    """Bundle every candidate independently, preserving candidate order.

    Bundles of nearby anchors may overlap; the re-ranker scores each bundle
    on its own, so overlap is harmless.
    """
    return [bundle(c.chunk_id, kb, k, tau_bundle) for c in candidates]


def bundle_text(b: Bundle, kb: KnowledgeBase) -> str:
    """Concatenated member texts in position order; the re-ranking unit."""
    return " ".join(kb.chunk(cid).text for cid in b.members)
