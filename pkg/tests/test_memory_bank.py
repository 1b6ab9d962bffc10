"""Memory bank matching, lookup gating, and persistence tests."""

import itertools

import pytest

from filingsqa.embedding import EmbedderConfig
from filingsqa.memory_bank import (
    CanonicalQuestion,
    Cell,
    MatchThresholds,
    MemoryBank,
    bm25_match,
    lookup,
    match,
    normalize_question,
    semantic_match,
    subseq_similarity,
    verify_cell,
)

CFG = EmbedderConfig()

QUESTIONS = [
    "what was total revenue",
    "how many vehicles were delivered",
    "what was gross margin",
]


def make_bank(periods=("Q1 FY24", "Q2 FY24"), stop_entities=()):
    bank = MemoryBank(
        questions=[CanonicalQuestion(normalize_question(q, stop_entities)) for q in QUESTIONS],
        periods=list(periods),
        stop_entities=list(stop_entities),
        embed_cfg=CFG,
    )
    for qi in range(len(QUESTIONS)):
        for pi in range(len(periods)):
            bank.cells[(qi, pi)] = Cell(
                value=f"value-{qi}-{pi}", source_chunk_ids=[f"doc:{qi}{pi:03d}"],
                verified=True,
            )
    return bank


# -- subsequence similarity ---------------------------------------------------


def test_subseq_identical_and_disjoint():
    assert subseq_similarity("alpha beta", "alpha beta") == 1.0
    assert subseq_similarity("abc", "xyz") == 0.0


def test_subseq_abcd_abed_three_quarters():
    # longest block "ab", then "d" on the right flank: M=3, 2*3/8 = 0.75
    assert subseq_similarity("abcd", "abed") == 0.75


def test_subseq_symmetric():
    pairs = [("total revenue", "total revenues"), ("abcd", "abed"), ("a", "ab")]
    for a, b in pairs:
        assert subseq_similarity(a, b) == subseq_similarity(b, a)


def test_subseq_one_iff_identical():
    assert subseq_similarity("total revenue", "total revenue ") < 1.0


def test_subseq_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        subseq_similarity("", "abc")


# -- the three matchers -------------------------------------------------------


def test_bm25_match_self_is_one():
    bank = make_bank()
    scores = bm25_match("what was total revenue", bank)
    assert scores[0] == pytest.approx(1.0, abs=1e-12)


def test_bm25_match_no_shared_terms_zero():
    bank = make_bank()
    scores = bm25_match("unrelated wording entirely", bank)
    assert scores == [0.0, 0.0, 0.0]


def test_bm25_match_partial_equals_formula():
    bank = make_bank()
    bank.ensure_indexed()
    from filingsqa.index import tokenize

    query_terms = tokenize("total revenue please")
    raw = bank._bm25.bm25_score(query_terms, ("q", 0))
    self_score = bank._bm25.bm25_score(tokenize(bank.questions[0].text), ("q", 0))
    got = bm25_match("total revenue please", bank)[0]
    assert got == pytest.approx(min(1.0, raw / self_score), abs=1e-12)
    assert 0.0 < got < 1.0


def test_semantic_match_identity_and_symmetry():
    bank = make_bank()
    scores = semantic_match("what was total revenue", bank)
    assert scores[0] == pytest.approx(1.0, abs=1e-9)


def test_semantic_match_unrelated_below_threshold():
    bank = make_bank()
    scores = semantic_match("board election governance proposals", bank)
    assert max(scores) < MatchThresholds().tau_sem


# -- Eq-style boolean match ---------------------------------------------------


def test_match_exact_fires_all_three():
    bank = make_bank()
    result = match("What was total revenue?", bank)
    assert result is not None
    assert result.question_idx == 0
    assert result.seq == pytest.approx(1.0)
    assert result.bm25 == pytest.approx(1.0)
    assert result.sem == pytest.approx(1.0, abs=1e-9)


def test_match_unrelated_none():
    bank = make_bank()
    assert match("capital expenditure guidance for data centers", bank) is None


def test_match_single_disjunct_suffices():
    bank = make_bank()
    th = MatchThresholds()
    # character-level paraphrase: high subsequence overlap, low token overlap
    query = "whatwas total revenu"
    normalized = normalize_question(query, bank.stop_entities)
    seq = subseq_similarity(normalized, bank.questions[0].text)
    s_bm25 = bm25_match(normalized, bank)[0]
    s_sem = semantic_match(normalized, bank)[0]
    assert seq > th.tau_seq, f"premise: seq {seq}"
    assert s_bm25 <= th.tau_bm25, f"premise: bm25 {s_bm25}"
    assert s_sem <= th.tau_sem, f"premise: sem {s_sem}"
    result = match(query, bank, th)
    assert result is not None and result.question_idx == 0


def test_match_threshold_monotonicity_grid():
    bank = make_bank()
    queries = [
        "what was total revenue",
        "what was the total revenue please",
        "vehicles delivered",
        "board governance",
    ]
    grid = [0.2, 0.4, 0.6, 0.8, 0.99]
    for query in queries:
        matched_at: dict[tuple, bool] = {}
        for ts, tb, tm in itertools.product(grid, repeat=3):
            th = MatchThresholds(tau_seq=ts, tau_bm25=tb, tau_sem=tm)
            matched_at[(ts, tb, tm)] = match(query, bank, th) is not None
        for (ts, tb, tm), hit in matched_at.items():
            if hit:
                # lowering any threshold must keep it matched
                for ls, lb, lm in itertools.product(grid, repeat=3):
                    if ls <= ts and lb <= tb and lm <= tm:
                        assert matched_at[(ls, lb, lm)], (
                            f"{query!r} matched at {(ts, tb, tm)} but not {(ls, lb, lm)}"
                        )


def test_match_deterministic():
    bank = make_bank()
    results = {match("what was total revenue", bank) for _ in range(5)}
    assert len(results) == 1


def test_match_empty_bank():
    bank = MemoryBank(questions=[], periods=[], embed_cfg=CFG)
    assert match("anything", bank) is None


def test_stop_entities_removed_before_matching():
    bank = make_bank(stop_entities=("zeekr",))
    result = match("what was Zeekr total revenue", bank)
    assert result is not None and result.question_idx == 0
    assert result.seq == pytest.approx(1.0)


# -- lookup -------------------------------------------------------------------


def test_lookup_hit_with_period():
    bank = make_bank()
    got = lookup("what was total revenue", "Q1 FY24", bank)
    assert got.hit
    assert got.value == "value-0-0"
    assert got.sources == ("doc:0000",)
    assert got.period == "Q1 FY24"


def test_lookup_defaults_to_latest_period():
    bank = make_bank()
    got = lookup("what was total revenue", None, bank)
    assert got.hit
    assert got.period == "Q2 FY24"
    assert got.value == "value-0-1"


def test_lookup_never_serves_unverified():
    bank = make_bank()
    bank.cells[(0, 1)].verified = False
    got = lookup("what was total revenue", "Q2 FY24", bank)
    assert not got.hit
    assert got.reason == "unverified"


def test_lookup_missing_cell_is_unverified_miss():
    bank = make_bank()
    del bank.cells[(2, 0)]
    got = lookup("what was gross margin", "Q1 FY24", bank)
    assert not got.hit and got.reason == "unverified"


def test_lookup_no_match_reason():
    bank = make_bank()
    got = lookup("entirely unrelated question about directors", None, bank)
    assert not got.hit and got.reason == "no_match"


def test_verify_cell_flips_exactly_one():
    bank = make_bank()
    bank.cells[(1, 0)].verified = False
    bank.cells[(1, 1)].verified = False
    verify_cell(bank, "how many vehicles were delivered", "Q1 FY24")
    assert bank.cells[(1, 0)].verified
    assert not bank.cells[(1, 1)].verified
    with pytest.raises(ValueError, match="unknown canonical question"):
        verify_cell(bank, "nope", "Q1 FY24")
    with pytest.raises(ValueError, match="unknown period"):
        verify_cell(bank, QUESTIONS[0], "Q9 FY99")


# -- persistence --------------------------------------------------------------


def test_bank_file_round_trip(tmp_path):
    bank = make_bank()
    bank.cells[(0, 0)].verified = False
    path = tmp_path / "bank.json"
    bank.save(path)
    loaded = MemoryBank.load(path, CFG)
    assert [q.text for q in loaded.questions] == [q.text for q in bank.questions]
    assert loaded.periods == bank.periods
    assert loaded.cells[(0, 0)].verified is False
    assert loaded.cells[(1, 1)].value == "value-1-1"
    got = lookup("what was total revenue", "Q2 FY24", loaded)
    assert got.hit


def test_bank_rejects_duplicate_questions():
    with pytest.raises(ValueError, match="duplicate"):
        MemoryBank(
            questions=[CanonicalQuestion("same q"), CanonicalQuestion("same q")],
            periods=[],
        )


def test_normalize_question():
    assert normalize_question("What was Total Revenue?!") == "what was total revenue"
    assert normalize_question("Zeekr's revenue", ("zeekr",)) == "s revenue"
