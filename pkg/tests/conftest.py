"""Shared fixtures: a small on-disk world (kb, bank, model, config)."""

import json

import pytest

from filingsqa.corpus import Block, DocumentRecord, Modality, write_corpus
from filingsqa.curation import CurationConfig, build_knowledge_base
from filingsqa.embedding import EmbedderConfig
from filingsqa.gateway import MockLlmGateway
from filingsqa.index import save_knowledge_base
from filingsqa.memory_bank import CanonicalQuestion, Cell, MemoryBank, normalize_question
from filingsqa.reranker import pretrained_model

WORLD_CFG = EmbedderConfig(dim=128)

SENTENCES = {
    "revenue": "total q3 revenue increased twelve percent to four billion dollars",
    "battery": "battery cell production capacity expanded at the gigafactory",
    "margin": "gross margin improved to eighteen percent on pricing and mix",
    "deliveries": "vehicle deliveries in europe reached a record forty thousand units",
}


def make_world_docs():
    docs = []
    for d in range(2):
        blocks = []
        for name, sentence in SENTENCES.items():
            text = f"{sentence} in document {d} " + " ".join(
                f"{name}tok{d}{m}" for m in range(6)
            )
            blocks.append(Block(name, Modality.TEXT, text))
        blocks.append(Block("tables", Modality.TABLE, f"revenue {d} 4.0 4.4 guidance 5.0"))
        docs.append(DocumentRecord(f"doc{d}", f"Filing {d}", "10-K", f"FY2{d}", tuple(blocks)))
    return docs


@pytest.fixture()
def world(tmp_path):
    """Corpus, curated kb directory, verified bank, model, and config file."""
    docs = make_world_docs()
    corpus_path = tmp_path / "corpus.jsonl"
    write_corpus(docs, corpus_path)

    kb = build_knowledge_base(docs, CurationConfig(), MockLlmGateway(), WORLD_CFG)
    kb_dir = tmp_path / "kb"
    save_knowledge_base(kb, kb_dir)

    bank = MemoryBank(
        questions=[CanonicalQuestion(normalize_question("what was q3 revenue"))],
        periods=["FY20", "FY21"],
        embed_cfg=WORLD_CFG,
    )
    bank.cells[(0, 0)] = Cell("$4.0B", ["doc0:0000"], verified=True)
    bank.cells[(0, 1)] = Cell("$4.4B", ["doc1:0000"], verified=True)
    bank_path = tmp_path / "bank.json"
    bank.save(bank_path)

    model_path = tmp_path / "reranker.model.json"
    pretrained_model().save(model_path)

    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "paths": {
            "corpus": str(corpus_path),
            "kb_dir": str(kb_dir),
            "bank": str(bank_path),
            "model": str(model_path),
        },
        "embedder": {"dim": WORLD_CFG.dim},
        "pipeline": {"k_each": 4, "top_r": 5, "jobs": 1},
        "gateway": {"mode": "mock"},
        "tools": [
            {"name": "stock_price", "description": "current share price quote",
             "canned": "ZK $21.40"},
        ],
    }))
    return {
        "tmp_path": tmp_path,
        "corpus": corpus_path,
        "kb_dir": kb_dir,
        "kb": kb,
        "bank_path": bank_path,
        "model_path": model_path,
        "config": config_path,
    }
