"""Relevance re-ranking with a two-head linear scorer and contrastive training.

The scorer assigns each (query, chunk) pair yes/no logits over a small
feature vector and scores relevance as sigmoid(z_yes - z_no). Training
minimizes cross-entropy of one positive against K sampled negatives. The
two-stage adaptation first trains a general model on entity-abstracted
human-annotated data, then specializes it on a target corpus using
automatically annotated retrieval output plus random negatives.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import EmbedderConfig, cosine, embed
from .gateway import ChatRequest, LlmGateway
from .index import Bm25Params, InvertedIndex, KnowledgeBase, tokenize

logger = logging.getLogger(__name__)

FEATURE_DIM = 6
MODEL_MAGIC = "filingsqa-reranker"
MODEL_FORMAT = 1

DEFAULT_PROMPT = (
    "Judge whether the document chunk answers or directly supports the query. "
    "Answer yes or no."
)


# ---------------------------------------------------------------------------
# Features and scoring


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def featurize(
    query: str,
    texts: Sequence[str],
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> np.ndarray:
    """Feature matrix phi(q, c) for a candidate set, one row per text.

    Columns: embedding cosine, unigram Jaccard, bigram Jaccard, BM25 of the
    text for the query min-max normalized over this candidate set, length
    ratio |c|/(|q|+|c|), and a constant bias 1. The BM25 column depends on
    the whole set, so scores are comparable only within one call.
    """
    if not texts:
        return np.zeros((0, FEATURE_DIM))
    q_vec = embed(query, embed_cfg)
    q_tokens = tokenize(query)
    q_set = set(q_tokens)
    q_bigrams = set(zip(q_tokens, q_tokens[1:]))

    mini_index = InvertedIndex.build(
        ((("", i), text) for i, text in enumerate(texts))
    )
    raw_bm25 = [
        mini_index.bm25_score(q_tokens, ("", i), bm25_params) for i in range(len(texts))
    ]
    from .retrieval import normalize_scores

    bm25_norm = normalize_scores(raw_bm25)

    rows = []
    for text, bm25_val in zip(texts, bm25_norm):
        t_tokens = tokenize(text)
        t_set = set(t_tokens)
        t_bigrams = set(zip(t_tokens, t_tokens[1:]))
        row = [
            cosine(q_vec, embed(text, embed_cfg)),
            _jaccard(q_set, t_set),
            _jaccard(q_bigrams, t_bigrams),
            bm25_val,
            len(t_tokens) / (len(q_tokens) + len(t_tokens)) if t_tokens or q_tokens else 0.0,
            1.0,
        ]
        rows.append(row)
    out = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(out).all():
        raise ValueError("non-finite feature encountered")
    return out


@dataclass
class RerankModel:
    w_yes: np.ndarray
    w_no: np.ndarray
    version: str = "init"

    def __post_init__(self) -> None:
        self.w_yes = np.asarray(self.w_yes, dtype=np.float64)
        self.w_no = np.asarray(self.w_no, dtype=np.float64)
        if self.w_yes.shape != self.w_no.shape or self.w_yes.ndim != 1:
            raise ValueError("w_yes and w_no must be vectors of equal length")

    @property
    def dim(self) -> int:
        return self.w_yes.shape[0]

    def copy(self, version: Optional[str] = None) -> "RerankModel":
        return RerankModel(
            self.w_yes.copy(), self.w_no.copy(), version or self.version
        )

    def logit_diffs(self, features: np.ndarray) -> np.ndarray:
        """z_yes - z_no per row; the pre-sigmoid relevance signal."""
        return features @ (self.w_yes - self.w_no)

    def save(self, path: str | Path) -> None:
        obj = {
            "magic": MODEL_MAGIC,
            "format": MODEL_FORMAT,
            "version": self.version,
            "feature_dim": self.dim,
            "w_yes": [float(x) for x in self.w_yes],
            "w_no": [float(x) for x in self.w_no],
        }
        Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RerankModel":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("magic") != MODEL_MAGIC:
            raise ValueError(f"not a {MODEL_MAGIC} file")
        if obj.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {obj.get('format')}")
        model = cls(
            np.asarray(obj["w_yes"], dtype=np.float64),
            np.asarray(obj["w_no"], dtype=np.float64),
            obj.get("version", "loaded"),
        )
        if model.dim != obj["feature_dim"]:
            raise ValueError("feature_dim does not match weight length")
        return model


def zero_model(version: str = "zero") -> RerankModel:
    return RerankModel(np.zeros(FEATURE_DIM), np.zeros(FEATURE_DIM), version)


def pretrained_model(version: str = "pretrained") -> RerankModel:
    """The stand-in 'pretrained' scorer: ranks by embedding cosine alone."""
    w_yes = np.zeros(FEATURE_DIM)
    w_yes[0] = 1.0
    return RerankModel(w_yes, np.zeros(FEATURE_DIM), version)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def score(
    query: str,
    text: str,
    model: RerankModel,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> float:
    """Relevance probability sigmoid(z_yes - z_no) for a single pair."""
    feats = featurize(query, [text], embed_cfg, bm25_params)
    return sigmoid(float(model.logit_diffs(feats)[0]))


def score_texts(
    query: str,
    texts: Sequence[str],
    model: RerankModel,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> list[float]:
    """Relevance scores for a candidate set; ranking by these equals ranking
    by the raw logit differences (sigmoid is monotone)."""
    feats = featurize(query, texts, embed_cfg, bm25_params)
    return [sigmoid(float(z)) for z in model.logit_diffs(feats)]


# ---------------------------------------------------------------------------
# Contrastive objective


def contrastive_loss(logit_pos: float, logits_neg: Sequence[float]) -> float:
    """Cross-entropy of the positive against K negatives:
    -log(e^{s+} / (e^{s+} + sum_j e^{s-_j})), evaluated via log-sum-exp."""
    if not logits_neg:
        raise ValueError("need at least one negative logit")
    all_logits = [float(logit_pos)] + [float(s) for s in logits_neg]
    if not all(math.isfinite(s) for s in all_logits):
        raise ValueError("non-finite logit")
    m = max(all_logits)
    lse = m + math.log(sum(math.exp(s - m) for s in all_logits))
    return lse - float(logit_pos)


def loss_and_grads(
    model: RerankModel, features: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and analytic gradients for one step; row 0 of `features` is the
    positive, the rest are negatives."""
    z = model.logit_diffs(features)
    m = float(z.max())
    exp_z = np.exp(z - m)
    p = exp_z / exp_z.sum()
    loss = -math.log(float(p[0]))
    coeff = p.copy()
    coeff[0] -= 1.0
    grad_yes = coeff @ features
    return loss, grad_yes, -grad_yes


# ---------------------------------------------------------------------------
# Training data


@dataclass(frozen=True)
class TrainingQuadruple:
    """One training record: a query, its positive and negative chunk texts,
    and the scoring instruction."""

    q: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self) -> None:
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"positives and negatives overlap: {sorted(overlap)[:3]}")


def read_quadruples(path: str | Path) -> list[TrainingQuadruple]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(
            TrainingQuadruple(
                q=obj["q"],
                positives=tuple(obj.get("positives", [])),
                negatives=tuple(obj.get("negatives", [])),
                prompt=obj.get("prompt", DEFAULT_PROMPT),
            )
        )
    return out


def write_quadruples(quads: Iterable[TrainingQuadruple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for quad in quads:
            fh.write(
                json.dumps(
                    {
                        "q": quad.q,
                        "positives": list(quad.positives),
                        "negatives": list(quad.negatives),
                        "prompt": quad.prompt,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 100
    negatives_per_step: int = 7  # one positive + these make a training group
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.negatives_per_step < 1:
            raise ValueError("negatives_per_step must be >= 1")


def train(
    model: RerankModel,
    data: Sequence[TrainingQuadruple],
    cfg: TrainConfig = TrainConfig(),
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> tuple[RerankModel, list[float]]:
    """Seeded SGD on the contrastive objective; returns (model, loss trace).

    Per step: one quadruple, one sampled positive, K sampled negatives
    (resampled with replacement when a quadruple has fewer than K), gradient
    step on both heads. Quadruples without positives or negatives are skipped
    with a warning. Fixed seeds give bitwise-identical final weights.
    """
    trainable = []
    for quad in data:
        if not quad.positives or not quad.negatives:
            logger.warning("skipping untrainable quadruple for query %r", quad.q[:60])
            continue
        trainable.append(quad)
    if not trainable:
        raise ValueError("no trainable quadruples")

    rng = random.Random(cfg.seed)
    out = model.copy(version=f"{model.version}+sgd(seed={cfg.seed},epochs={cfg.epochs})")
    k = cfg.negatives_per_step
    trace: list[float] = []
    for _ in range(cfg.epochs):
        order = list(range(len(trainable)))
        rng.shuffle(order)
        losses = []
        for qi in order:
            quad = trainable[qi]
            pos = rng.choice(quad.positives)
            if len(quad.negatives) >= k:
                negs = rng.sample(quad.negatives, k)
            else:
                negs = [rng.choice(quad.negatives) for _ in range(k)]
            feats = featurize(quad.q, [pos] + list(negs), embed_cfg, bm25_params)
            loss, g_yes, g_no = loss_and_grads(out, feats)
            out.w_yes = out.w_yes - cfg.learning_rate * g_yes
            out.w_no = out.w_no - cfg.learning_rate * g_no
            losses.append(loss)
        trace.append(sum(losses) / len(losses))
    return out, trace


# ---------------------------------------------------------------------------
# Stage 1: entity abstraction


class AbstractionStrategy(Enum):
    PRODUCT_PERSON = "product-person"
    COMPANY_NAME = "company-name"
    COMPLETE = "complete"


@dataclass(frozen=True)
class EntityLexicon:
    """Known entity surface forms. `companies[0]` is the target company for
    the company-name strategy; `competitors` feed its replacement sampling."""

    companies: tuple[str, ...] = ()
    products: tuple[str, ...] = ()
    persons: tuple[str, ...] = ()
    competitors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        seen: dict[str, str] = {}
        for kind, entries in (
            ("companies", self.companies),
            ("products", self.products),
            ("persons", self.persons),
        ):
            for entry in entries:
                key = entry.lower()
                if key in seen and seen[key] != kind:
                    raise ValueError(f"entity {entry!r} appears in both {seen[key]} and {kind}")
                seen[key] = kind


def _entity_pattern(entities: Sequence[str]) -> re.Pattern:
    # Longest alternatives first so "Zeekr 001" wins over "Zeekr"; lookarounds
    # instead of \b so entries may start or end with punctuation.
    ordered = sorted(entities, key=len, reverse=True)
    alternation = "|".join(re.escape(e) for e in ordered)
    return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)


def abstract_entities(
    quad: TrainingQuadruple,
    strategy: AbstractionStrategy,
    lexicon: EntityLexicon,
    seed: int = 0,
) -> TrainingQuadruple:
    """Mask entity mentions across a whole quadruple with consistent placeholders.

    Product/person strategy masks products and individuals; company-name maps
    the target company to COMPANY_TARGET and every other known company to a
    seeded random competitor; complete masks all three classes. The same
    entity always gets the same placeholder everywhere in the quadruple, and
    text outside lexicon matches is untouched. Inputs without matches come
    back unchanged.
    """
    kind_of: dict[str, str] = {}
    targets: list[str] = []

    def add(entries: Sequence[str], kind: str) -> None:
        for e in entries:
            kind_of[e.lower()] = kind
            targets.append(e)

    if strategy is AbstractionStrategy.PRODUCT_PERSON:
        add(lexicon.products, "product")
        add(lexicon.persons, "person")
    elif strategy is AbstractionStrategy.COMPANY_NAME:
        add(lexicon.companies, "company")
    else:
        add(lexicon.companies, "company")
        add(lexicon.products, "product")
        add(lexicon.persons, "person")
    if not targets:
        return quad

    pattern = _entity_pattern(targets)
    rng = random.Random(seed)
    counters = {"company": 0, "product": 0, "person": 0}
    replacement: dict[str, str] = {}
    target_company = lexicon.companies[0].lower() if lexicon.companies else None

    def placeholder_for(matched: str) -> str:
        key = matched.lower()
        if key in replacement:
            return replacement[key]
        kind = kind_of[key]
        if strategy is AbstractionStrategy.COMPANY_NAME:
            if key == target_company:
                replacement[key] = "COMPANY_TARGET"
            else:
                pool = lexicon.competitors or ("COMPETITOR",)
                replacement[key] = rng.choice(pool)
        else:
            counters[kind] += 1
            replacement[key] = f"{kind.upper()}_{counters[kind]}"
        return replacement[key]

    def rewrite(text: str) -> str:
        return pattern.sub(lambda m: placeholder_for(m.group(0)), text)

    # Scan in a fixed order (query, positives, negatives) so placeholder
    # numbering follows first appearance.
    return replace(
        quad,
        q=rewrite(quad.q),
        positives=tuple(rewrite(t) for t in quad.positives),
        negatives=tuple(rewrite(t) for t in quad.negatives),
    )


# ---------------------------------------------------------------------------
# Stage 2: automated annotation


_ANNOTATION_SYSTEM = """You are an expert financial document annotation specialist.
Decide whether the document chunk is relevant to the query.

High relevance: the chunk directly answers the query (direct match), provides
essential context needed to answer it (contextual support), or matches the
asked-for quantity in a near-miss time period (fuzzy time period match).
Low relevance: generic discussion of the topic without the asked-for facts,
or an incidental mention.

Examples:
Query: What was total revenue in Q2? Chunk: Total revenue in Q2 was $4.1B.
relevance: yes
analysis: direct match

Query: What was total revenue in Q2? Chunk: The company sells vehicles worldwide.
relevance: no
analysis: generic discussion

Respond in exactly two lines:
relevance: yes|no
analysis: <one short sentence>"""

_ANNOTATION_LINE = re.compile(r"^relevance:\s*(yes|no)\s*$", re.IGNORECASE)


def build_annotation_request(query: str, chunk_text: str, model: str = "chat") -> ChatRequest:
    return ChatRequest(
        model=model,
        messages=[
            ("system", _ANNOTATION_SYSTEM),
            ("user", f"Query: {query}\nChunk: {chunk_text}"),
        ],
        purpose="annotate",
    )


def parse_annotation(text: str) -> Optional[bool]:
    """First line must be `relevance: yes|no`; anything else is unparseable."""
    lines = [ln for ln in (text or "").strip().splitlines() if ln.strip()]
    if not lines:
        return None
    m = _ANNOTATION_LINE.match(lines[0].strip())
    if not m:
        return None
    return m.group(1).lower() == "yes"


def auto_annotate(
    query: str,
    retrieved: Sequence[str],
    annotator: LlmGateway,
    model: str = "chat",
) -> tuple[list[str], list[str]]:
    """Label retrieved chunk texts relevant/irrelevant via the annotator.

    Returns (positives, hard negatives). Chunks whose reply does not parse
    land in neither set, with a warning.
    """
    positives: list[str] = []
    hard_negatives: list[str] = []
    for text in retrieved:
        try:
            resp = annotator.complete(build_annotation_request(query, text, model))
        except Exception as exc:
            logger.warning("annotator failed for query %r: %s", query[:60], exc)
            continue
        verdict = parse_annotation(resp.text or "")
        if verdict is None:
            logger.warning(
                "unparseable annotation for query %r, chunk %r", query[:40], text[:40]
            )
            continue
        (positives if verdict else hard_negatives).append(text)
    return positives, hard_negatives


def sample_negatives(
    hard_negatives: Sequence[str],
    corpus_texts: Sequence[str],
    count_random: int,
    seed: int,
    positives: Sequence[str] = (),
) -> list[str]:
    """Hard negatives plus a seeded uniform sample of random corpus negatives.

    The random draw is without replacement and never touches positives or the
    hard negatives; if the corpus is too small, it shrinks with a warning.
    """
    if not corpus_texts:
        raise ValueError("corpus is empty")
    excluded = set(positives) | set(hard_negatives)
    eligible = [t for t in dict.fromkeys(corpus_texts) if t not in excluded]
    rng = random.Random(seed)
    take = min(count_random, len(eligible))
    if take < count_random:
        logger.warning(
            "corpus too small for %d random negatives; sampling %d", count_random, take
        )
    sampled = rng.sample(eligible, take) if take else []
    return list(hard_negatives) + sampled


# ---------------------------------------------------------------------------
# The two-stage adaptation


def stage1_train(
    base: RerankModel,
    d_human: Sequence[TrainingQuadruple],
    strategy: AbstractionStrategy,
    lexicon: EntityLexicon,
    cfg: TrainConfig,
    embed_cfg: EmbedderConfig = EmbedderConfig(),
    bm25_params: Bm25Params = Bm25Params(),
) -> RerankModel:
    """Train the general model on the entity-abstracted human dataset."""
    if not d_human:
        raise ValueError("d_human is empty")
    d_aug = [
        abstract_entities(quad, strategy, lexicon, seed=cfg.seed + i)
        for i, quad in enumerate(d_human)
    ]
    model, _ = train(base, d_aug, cfg, embed_cfg, bm25_params)
    model.version = f"general({strategy.value})"
    return model


def stage2_adapt(
    model: RerankModel,
    q_target: Sequence[str],
    kb_target: KnowledgeBase,
    annotator: LlmGateway,
    cfg: TrainConfig,
    k_each: int = 10,
    annotate_top: int = 12,
    count_random: int = 3,
) -> RerankModel:
    """Specialize a model for a target corpus via automated annotation.

    For each target query: retrieve with the multi-path retriever (so the
    training distribution mirrors inference), auto-annotate the candidates
    into positives and hard negatives, pad with random corpus negatives, and
    train on the resulting quadruples.
    """
    from .retrieval import multipath_retrieve

    if not q_target:
        raise ValueError("q_target is empty")
    corpus_texts = [c.text for c in kb_target.all_chunks()]
    d_auto: list[TrainingQuadruple] = []
    for i, query in enumerate(q_target):
        candidates = multipath_retrieve(query, k_each, kb_target)[:annotate_top]
        texts = [kb_target.chunk(c.chunk_id).text for c in candidates]
        positives, hard = auto_annotate(query, texts, annotator)
        if not positives:
            logger.warning("no positives annotated for query %r; skipping", query[:60])
            continue
        negatives = sample_negatives(
            hard, corpus_texts, count_random, seed=cfg.seed + i, positives=positives
        )
        if not negatives:
            continue
        d_auto.append(
            TrainingQuadruple(
                q=query, positives=tuple(positives), negatives=tuple(negatives)
            )
        )
    if not d_auto:
        raise ValueError("no trainable auto-annotated quadruples")
    out, _ = train(model, d_auto, cfg, kb_target.embed_cfg, kb_target.bm25_params)
    out.version = f"specialized<-{model.version}"
    return out


def two_stage_pipeline(
    base: RerankModel,
    d_human: Sequence[TrainingQuadruple],
    strategy: AbstractionStrategy,
    lexicon: EntityLexicon,
    q_target: Sequence[str],
    kb_target: KnowledgeBase,
    annotator: LlmGateway,
    cfg: TrainConfig = TrainConfig(),
    general_model_path: Optional[str | Path] = None,
    k_each: int = 10,
    annotate_top: int = 12,
    count_random: int = 3,
) -> tuple[RerankModel, RerankModel]:
    """Full domain-to-entity adaptation; returns (specialized, general).

    Stage 2 alone (the direct-specialization control) is `stage2_adapt(base,
    ...)`; this function chains stage 1 into stage 2 and optionally persists
    the intermediate general model.
    """
    general = stage1_train(
        base, d_human, strategy, lexicon, cfg, kb_target.embed_cfg, kb_target.bm25_params
    )
    if general_model_path is not None:
        general.save(general_model_path)
    specialized = stage2_adapt(
        general, q_target, kb_target, annotator, cfg, k_each, annotate_top, count_random
    )
    return specialized, general
