"""Multi-path fusion and chunk bundling tests."""

import pytest

from filingsqa.corpus import Chunk, Modality
from filingsqa.embedding import EmbedderConfig, cosine, embed
from filingsqa.index import build_indexes
from filingsqa.retrieval import (
    Bundle,
    RetrievalPath,
    bundle,
    bundle_candidates,
    bundle_text,
    multipath_retrieve,
    normalize_scores,
)

CFG = EmbedderConfig()

BASE = (
    "total revenue for the third fiscal quarter increased twelve percent year "
    "over year driven by strong vehicle deliveries across european markets and "
    "improved pricing on premium models while operating expenses remained "
    "broadly flat versus the prior quarter reflecting disciplined cost control "
    "across all segments"
)


def variant(text: str, changes: dict[int, str]) -> str:
    ws = text.split()
    for i, w in changes.items():
        ws[i] = w
    return " ".join(ws)


def make_chunk(doc, pos, text, section="s0", summary=None):
    return Chunk(doc, pos, Modality.TEXT, text, section, len(text.split()),
                 summary=summary, embedding=embed(text, CFG))


def make_kb(chunks):
    return build_indexes(chunks, CFG)


def window_kb():
    """doc with positions 0..3: unrelated, anchor, near-dup, looser paraphrase."""
    unrelated = ("board compensation committee approved new equity awards for "
                 "independent directors subject to shareholder approval at the annual meeting")
    near = variant(BASE, {4: "second", 8: "ten", 16: "asian"})
    loose = variant(BASE, {4: "second", 8: "ten", 16: "asian", 20: "lower",
                           24: "budget", 28: "slightly", 32: "previous"})
    chunks = [
        make_chunk("doc", 0, unrelated),
        make_chunk("doc", 1, BASE),
        make_chunk("doc", 2, near),
        make_chunk("doc", 3, loose),
    ]
    return make_kb(chunks), chunks


def test_bundle_window_case():
    kb, chunks = window_kb()
    anchor = ("doc", 1)
    tau = 0.8
    anchor_vec = kb.chunk(anchor).embedding
    sim_prev = cosine(anchor_vec, kb.chunk(("doc", 0)).embedding)
    sim_next = cosine(anchor_vec, kb.chunk(("doc", 2)).embedding)
    sim_next2 = cosine(anchor_vec, kb.chunk(("doc", 3)).embedding)
    # constructed-oracle premises
    assert sim_prev < tau
    assert sim_next > tau
    assert sim_next2 > tau
    assert sim_next2 < sim_next
    got = bundle(anchor, kb, k=2, tau_bundle=tau)
    assert got.members == (("doc", 1), ("doc", 2), ("doc", 3))
    assert got.anchor == anchor


def test_bundle_k_zero_is_singleton():
    kb, _ = window_kb()
    got = bundle(("doc", 1), kb, k=0, tau_bundle=0.5)
    assert got.members == (("doc", 1),)


def test_bundle_identical_neighbor_included():
    chunks = [make_chunk("d", 0, BASE), make_chunk("d", 1, BASE)]
    kb = make_kb(chunks)
    got = bundle(("d", 0), kb, k=1, tau_bundle=0.99)
    assert got.members == (("d", 0), ("d", 1))


def test_bundle_unknown_anchor():
    kb, _ = window_kb()
    with pytest.raises(ValueError, match="unknown anchor"):
        bundle(("doc", 99), kb, k=1, tau_bundle=0.8)


def test_bundle_same_document_only():
    chunks = [
        make_chunk("a", 0, BASE),
        make_chunk("b", 1, BASE),  # other doc, adjacent position
    ]
    kb = make_kb(chunks)
    got = bundle(("a", 0), kb, k=2, tau_bundle=0.5)
    assert got.members == (("a", 0),)


def test_bundle_anti_monotone_in_tau():
    kb, _ = window_kb()
    sizes = []
    for tau in (0.5, 0.7, 0.8, 0.9, 0.95, 0.999):
        sizes.append(len(bundle(("doc", 1), kb, k=2, tau_bundle=tau).members))
    assert sizes == sorted(sizes, reverse=True)


def test_bundle_invariant_window_doc_similarity():
    kb, _ = window_kb()
    k, tau = 2, 0.8
    for anchor in kb.order:
        b = bundle(anchor, kb, k, tau)
        anchor_vec = kb.chunk(anchor).embedding
        for member in b.members:
            assert member[0] == anchor[0]
            assert abs(member[1] - anchor[1]) <= k
            if member != anchor:
                assert cosine(anchor_vec, kb.chunk(member).embedding) > tau


def test_bundle_candidates_order_and_overlap():
    kb, _ = window_kb()
    cands = multipath_retrieve(BASE, 4, kb)
    bundles = bundle_candidates(cands, kb, 2, 0.8)
    assert len(bundles) == len(cands)
    assert [b.anchor for b in bundles] == [c.chunk_id for c in cands]
    # adjacent near-duplicates yield overlapping bundles
    anchors = {b.anchor: set(b.members) for b in bundles}
    assert anchors[("doc", 1)] & anchors[("doc", 2)]


def test_bundle_candidates_empty():
    kb, _ = window_kb()
    assert bundle_candidates([], kb, 2, 0.8) == []


def test_bundle_text_position_order():
    kb, _ = window_kb()
    b = Bundle(anchor=("doc", 2), members=(("doc", 1), ("doc", 2), ("doc", 3)))
    text = bundle_text(b, kb)
    assert text.index(kb.chunk(("doc", 1)).text) < text.index(kb.chunk(("doc", 3)).text)


# -- multipath fusion ---------------------------------------------------------


def topic_kb():
    """Three topics x sections, with summaries, for path-diversity tests."""
    topics = {
        "revenue": "total revenue increased twelve percent on strong deliveries",
        "battery": "battery cell production capacity expanded at the gigafactory",
        "dividend": "the board declared a quarterly cash dividend of ten cents",
    }
    chunks = []
    pos = 0
    for name, sentence in topics.items():
        for j in range(3):
            text = f"{sentence} detail {j} " + " ".join(f"{name}w{j}k{m}" for m in range(6))
            chunks.append(make_chunk("doc", pos, text, section=name,
                                     summary=f"section about {name} performance"))
            pos += 1
    return make_kb(chunks)


def test_multipath_top_agreement_first():
    kb = topic_kb()
    cands = multipath_retrieve("total revenue increased twelve percent", 3, kb)
    assert cands[0].provenance == {RetrievalPath.SPARSE, RetrievalPath.DENSE,
                                   RetrievalPath.METADATA}
    assert cands[0].chunk_id[1] in (0, 1, 2)  # a revenue chunk


def test_multipath_disjoint_union_size():
    kb = topic_kb()
    cands = multipath_retrieve("revenue deliveries", 5, kb)
    seen = [c.chunk_id for c in cands]
    assert len(seen) == len(set(seen))
    for path in RetrievalPath:
        path_cands = [c for c in cands if path in c.provenance]
        assert len(path_cands) <= 5


def test_multipath_superset_of_each_path():
    kb = topic_kb()
    k = 4
    cands = {c.chunk_id for c in multipath_retrieve("battery capacity expansion", k, kb)}
    qv = embed("battery capacity expansion", CFG)
    for single in (
        kb.sparse.search("battery capacity expansion", k, kb.bm25_params),
        kb.dense.search(qv, k),
        kb.metadata.search(qv, k),
    ):
        assert {cid for cid, _ in single} <= cands


def test_multipath_provenance_matches_path_scores():
    kb = topic_kb()
    for cand in multipath_retrieve("dividend", 3, kb):
        assert cand.provenance
        assert set(cand.path_scores) == cand.provenance


def test_normalize_scores_conventions():
    assert normalize_scores([]) == []
    assert normalize_scores([2.0, 4.0, 3.0]) == [0.0, 1.0, 0.5]
    assert normalize_scores([5.0, 5.0]) == [1.0, 1.0]
    assert normalize_scores([0.0, 0.0]) == [0.0, 0.0]
