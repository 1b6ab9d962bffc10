"""One configuration file for the CLI and the HTTP service.

JSON with top-level sections: `paths` (corpus, knowledge base directory,
bank, model files), `embedder`, `bm25`, `curation`, `pipeline`, `thresholds`,
`gateway` (mock script or remote endpoint), and `tools`. Flags override file
values; everything has a workable default so a bare config works offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .curation import CurationConfig
from .embedding import EmbedderConfig
from .gateway import LlmGateway, MockLlmGateway, MockScript, RemoteLlmGateway
from .index import Bm25Params
from .memory_bank import MatchThresholds
from .pipeline import PipelineConfig, ToolRegistry, canned_tool, http_tool


@dataclass
class GatewayConfig:
    mode: str = "mock"  # "mock" | "remote"
    mock_script: Optional[str] = None
    endpoint: str = ""
    api_key_env: str = "FILINGSQA_API_KEY"
    chat_model: str = "chat"
    reasoning_model: str = "reasoning"
    max_concurrency: int = 8

    def build(self) -> LlmGateway:
        if self.mode == "remote":
            if not self.endpoint:
                raise ValueError("remote gateway requires an endpoint")
            return RemoteLlmGateway(
                self.endpoint,
                api_key_env=self.api_key_env,
                max_concurrency=self.max_concurrency,
            )
        script = MockScript.from_file(self.mock_script) if self.mock_script else None
        return MockLlmGateway(script)


@dataclass
class AppConfig:
    corpus_path: str = "corpus.jsonl"
    kb_dir: str = "kb"
    bank_path: str = "bank.json"
    model_path: str = "reranker.model.json"
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    bm25: Bm25Params = field(default_factory=Bm25Params)
    curation: CurationConfig = field(default_factory=CurationConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    tools: list[dict] = field(default_factory=list)
    host: str = "127.0.0.1"
    port: int = 8400
    session_dir: Optional[str] = None

    def build_registry(self) -> ToolRegistry:
        registry = ToolRegistry()
        for entry in self.tools:
            if entry.get("url"):
                registry.add(
                    http_tool(
                        entry["name"],
                        entry.get("description", ""),
                        entry.get("parameters", {"type": "object", "properties": {}}),
                        entry["url"],
                    )
                )
            else:
                registry.add(
                    canned_tool(
                        entry["name"],
                        entry.get("description", ""),
                        entry.get("canned", "no data"),
                    )
                )
        return registry


def load_config(path: Optional[str | Path]) -> AppConfig:
    if path is None:
        return AppConfig()
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    paths = obj.get("paths", {})
    thresholds = MatchThresholds(**obj.get("thresholds", {}))
    pipeline_kwargs = dict(obj.get("pipeline", {}))
    pipeline_kwargs["thresholds"] = thresholds
    return AppConfig(
        corpus_path=paths.get("corpus", "corpus.jsonl"),
        kb_dir=paths.get("kb_dir", "kb"),
        bank_path=paths.get("bank", "bank.json"),
        model_path=paths.get("model", "reranker.model.json"),
        embedder=EmbedderConfig(**obj.get("embedder", {})),
        bm25=Bm25Params(**obj.get("bm25", {})),
        curation=CurationConfig(**obj.get("curation", {})),
        pipeline=PipelineConfig(**pipeline_kwargs),
        gateway=GatewayConfig(**obj.get("gateway", {})),
        tools=obj.get("tools", []),
        host=obj.get("host", "127.0.0.1"),
        port=obj.get("port", 8400),
        session_dir=obj.get("session_dir"),
    )
