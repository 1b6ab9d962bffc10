"""IR evaluation: evidence hit rate, NDCG/MRR/Precision/Recall@K, run reports.

Qrels are binary. Queries with zero relevant chunks are excluded from metric
means (the dominant IR convention); queries judged in the qrels but absent
from a run count as empty rankings. Report columns for LLM-judge metrics are
reserved but not computed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .embedding import EmbedderConfig, cosine, embed

logger = logging.getLogger(__name__)

Qrels = dict[str, set[str]]  # query_id -> relevant chunk ids
RunResult = dict[str, list[tuple[str, float]]]  # query_id -> ranked (chunk_id, score)

RESERVED_COLUMNS = (
    "factual_correctness",
    "response_relevancy",
    "context_recall",
    "context_precision",
)


# ---------------------------------------------------------------------------
# File formats


def read_qrels(path: str | Path) -> Qrels:
    """Whitespace-delimited lines: `query_id chunk_id grade` with binary grades."""
    qrels: Qrels = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected `query_id chunk_id grade`")
        qid, cid, grade = parts
        if grade not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: grade must be 0 or 1, got {grade!r}")
        qrels.setdefault(qid, set())
        if grade == "1":
            qrels[qid].add(cid)
    return qrels


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for cid in sorted(qrels[qid]):
                fh.write(f"{qid} {cid} 1\n")


def read_run(path: str | Path) -> RunResult:
    """Lines: `query_id chunk_id rank score run_label`."""
    staged: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected `query_id chunk_id rank score label`")
        qid, cid, rank, score, _label = parts
        staged.setdefault(qid, []).append((int(rank), cid, float(score)))
    run: RunResult = {}
    for qid, rows in staged.items():
        rows.sort()
        run[qid] = [(cid, score) for _, cid, score in rows]
    validate_run(run)
    return run


def write_run(run: RunResult, path: str | Path, label: str = "run") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (cid, score) in enumerate(run[qid], 1):
                fh.write(f"{qid} {cid} {rank} {score!r} {label}\n")


def validate_run(run: RunResult) -> None:
    for qid, ranking in run.items():
        ids = [cid for cid, _ in ranking]
        if len(ids) != len(set(ids)):
            raise ValueError(f"run for {qid} contains duplicate chunk ids")
        scores = [s for _, s in ranking]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"run for {qid} is not score-sorted")


# ---------------------------------------------------------------------------
# Metrics


def _evaluable(run: RunResult, qrels: Qrels) -> list[str]:
    qids = [qid for qid in sorted(qrels) if qrels[qid]]
    if not qids:
        raise ValueError("no evaluable queries")
    return qids


def _relevance_flags(run: RunResult, qrels: Qrels, qid: str, k: int) -> list[int]:
    ranking = run.get(qid, [])
    return [1 if cid in qrels[qid] else 0 for cid, _ in ranking[:k]]


def ndcg_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    """Mean NDCG@k with binary gains and a log2(rank+1) discount."""
    total = 0.0
    qids = _evaluable(run, qrels)
    for qid in qids:
        flags = _relevance_flags(run, qrels, qid, k)
        dcg = sum(rel / math.log2(r + 1) for r, rel in enumerate(flags, 1))
        ideal_hits = min(k, len(qrels[qid]))
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, ideal_hits + 1))
        total += dcg / idcg
    return total / len(qids)


def mrr_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    total = 0.0
    qids = _evaluable(run, qrels)
    for qid in qids:
        flags = _relevance_flags(run, qrels, qid, k)
        for rank, rel in enumerate(flags, 1):
            if rel:
                total += 1.0 / rank
                break
    return total / len(qids)


def precision_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    qids = _evaluable(run, qrels)
    return sum(sum(_relevance_flags(run, qrels, qid, k)) / k for qid in qids) / len(qids)


def recall_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    qids = _evaluable(run, qrels)
    return (
        sum(sum(_relevance_flags(run, qrels, qid, k)) / len(qrels[qid]) for qid in qids)
        / len(qids)
    )


METRICS: dict[str, Callable[[RunResult, Qrels, int], float]] = {
    "ndcg": ndcg_at_k,
    "mrr": mrr_at_k,
    "precision": precision_at_k,
    "recall": recall_at_k,
}


def hit_rate(
    run: RunResult,
    gold_evidence: dict[str, list[str]],
    chunk_texts: dict[str, str],
    k: int,
    tau_hit: float = 1.0,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
) -> float:
    """Fraction of queries whose top-k contains a chunk matching gold evidence.

    A retrieved chunk is a hit when its embedding cosine to some gold text
    reaches `tau_hit` (within 1e-9, so tau_hit=1.0 behaves as exact-chunk
    matching despite float rounding). Queries missing from the gold mapping
    are skipped with a warning.
    """
    eps = 1e-9
    hits = 0
    evaluated = 0
    for qid in sorted(run):
        if qid not in gold_evidence:
            logger.warning("query %r missing from gold evidence; skipped", qid)
            continue
        gold_vecs = [embed(text, embed_cfg) for text in gold_evidence[qid]]
        evaluated += 1
        for cid, _ in run[qid][:k]:
            text = chunk_texts.get(cid)
            if text is None:
                continue
            vec = embed(text, embed_cfg)
            if any(cosine(vec, gv) >= tau_hit - eps for gv in gold_vecs):
                hits += 1
                break
    if evaluated == 0:
        raise ValueError("no evaluable queries")
    return hits / evaluated


# ---------------------------------------------------------------------------
# Run comparison reports


@dataclass
class Report:
    """Per-run metric table at each k, with deltas against a baseline run."""

    ks: list[int]
    baseline: str
    rows: dict[str, dict[str, float]] = field(default_factory=dict)  # label -> metric@k -> value

    def delta(self, label: str, key: str) -> float:
        return self.rows[label][key] - self.rows[self.baseline][key]

    def to_text(self) -> str:
        keys = [f"{m}@{k}" for k in self.ks for m in METRICS]
        width = max(len(label) for label in self.rows)
        lines = [" ".join([f"{'run':<{width}}"] + [f"{key:>14}" for key in keys])]
        for label, row in self.rows.items():
            cells = []
            for key in keys:
                delta = self.delta(label, key)
                cells.append(f"{row[key]:.4f} ({delta:+.3f})")
            lines.append(" ".join([f"{label:<{width}}"] + [f"{c:>14}" for c in cells]))
        return "\n".join(lines)

    def to_machine_lines(self) -> list[str]:
        lines = [
            f"#baseline {self.baseline}",
            f"#ks {' '.join(map(str, self.ks))}",
            # columns reserved for LLM-judge metrics; not computed here
            f"#reserved {' '.join(RESERVED_COLUMNS)}",
        ]
        for label in self.rows:
            for key, value in self.rows[label].items():
                lines.append(f"{label} {key} {value!r}")
        return lines

    @classmethod
    def from_machine_lines(cls, lines: Sequence[str]) -> "Report":
        baseline = ""
        ks: list[int] = []
        rows: dict[str, dict[str, float]] = {}
        for line in lines:
            if line.startswith("#baseline "):
                baseline = line.split(maxsplit=1)[1]
            elif line.startswith("#ks "):
                ks = [int(x) for x in line.split()[1:]]
            elif line.startswith("#"):
                continue
            elif line.strip():
                label, key, value = line.split()
                rows.setdefault(label, {})[key] = float(value)
        return cls(ks=ks, baseline=baseline, rows=rows)


def compare_runs(
    runs: dict[str, RunResult],
    qrels: Qrels,
    ks: Sequence[int] = (5, 10),
    baseline: Optional[str] = None,
) -> Report:
    """Evaluate labeled runs over shared qrels at each k."""
    if baseline is None:
        baseline = next(iter(runs))
    if baseline not in runs:
        raise ValueError(f"baseline {baseline!r} not among runs")
    report = Report(ks=list(ks), baseline=baseline)
    for label, run in runs.items():
        row = {}
        for k in ks:
            for name, fn in METRICS.items():
                row[f"{name}@{k}"] = fn(run, qrels, k)
        report.rows[label] = row
    return report
