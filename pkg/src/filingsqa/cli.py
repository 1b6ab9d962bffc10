"""Operator command line: every lifecycle stage behind one binary.

Subcommands cover ingestion, curation, indexing, querying (one-shot and
REPL), evaluation, re-ranker training, annotation, memory-bank management,
cost estimation, and serving the HTTP API. All randomness is seeded via
--seed; --mock-script selects the scripted gateway everywhere, so every
stage runs offline.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .config import AppConfig, load_config
from .corpus import read_chunks, read_corpus, write_chunks
from .curation import curate_chunks
from .evaluation import compare_runs, METRICS, read_qrels, read_run
from .index import build_indexes, load_knowledge_base, save_knowledge_base
from .memory_bank import MemoryBank, init_bank, lookup, verify_cell
from .pipeline import ConversationTurn, CostLedger, answer_query, estimate_cost
from .reranker import (
    AbstractionStrategy,
    EntityLexicon,
    RerankModel,
    TrainConfig,
    pretrained_model,
    read_quadruples,
    stage1_train,
    stage2_adapt,
    write_quadruples,
)

logger = logging.getLogger(__name__)


class Context:
    def __init__(self, config: AppConfig, seed: int, jobs: int | None):
        self.config = config
        self.seed = seed
        self.jobs = jobs if jobs is not None else 1
        if jobs is not None:
            import dataclasses

            self.config.pipeline = dataclasses.replace(config.pipeline, jobs=jobs)

    def gateway(self):
        return self.config.gateway.build()


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config file; flags override its values.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None, help="Worker pool cap (default: config).")
@click.option("--mock-script", type=click.Path(exists=True), default=None,
              help="Use the scripted mock gateway with this script file.")
@click.option("-v", "--verbose", is_flag=True)
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path, seed, jobs, mock_script, verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    config = load_config(config_path)
    if mock_script:
        config.gateway.mode = "mock"
        config.gateway.mock_script = mock_script
    ctx.obj = Context(config, seed, jobs)


@main.command()
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the validated corpus back out (normalized form).")
@click.pass_obj
def ingest(obj: Context, corpus, out):
    """Validate a corpus file and report its shape."""
    docs = read_corpus(corpus)
    blocks = sum(len(d.sections) for d in docs)
    click.echo(f"documents={len(docs)} blocks={blocks}")
    if out:
        from .corpus import write_corpus

        write_corpus(docs, out)
        click.echo(f"wrote {out}")


@main.command()
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Curated chunk store (jsonl).")
@click.pass_obj
def curate(obj: Context, corpus, out):
    """Run the curation pipeline: chunk, transform, resolve, embed, dedup, summarize."""
    docs = read_corpus(corpus)
    chunks = curate_chunks(
        docs, obj.config.curation, obj.gateway(), obj.config.embedder, jobs=obj.jobs
    )
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_chunks(chunks, out)
    click.echo(f"chunks={len(chunks)} -> {out}")


@main.command()
@click.option("--chunks", "chunks_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Knowledge base directory.")
@click.pass_obj
def index(obj: Context, chunks_path, out_dir):
    """Build the sparse, dense, and metadata indexes from a curated chunk store."""
    chunks = read_chunks(chunks_path)
    kb = build_indexes(chunks, obj.config.embedder, obj.config.bm25)
    save_knowledge_base(kb, out_dir)
    click.echo(
        f"indexed chunks={len(kb)} sparse_terms={len(kb.sparse.postings)} "
        f"metadata_entries={len(kb.metadata)} -> {out_dir}"
    )


def _load_resources(obj: Context):
    config = obj.config
    kb = load_knowledge_base(config.kb_dir)
    bank = (
        MemoryBank.load(config.bank_path, config.embedder)
        if Path(config.bank_path).exists()
        else None
    )
    model = (
        RerankModel.load(config.model_path)
        if Path(config.model_path).exists()
        else pretrained_model()
    )
    return kb, bank, model, obj.gateway(), config.build_registry()


@main.command()
@click.argument("question")
@click.option("--show-evidence", is_flag=True)
@click.pass_obj
def query(obj: Context, question, show_evidence):
    """Answer one question against the configured knowledge base."""
    kb, bank, model, gateway, registry = _load_resources(obj)
    answer, evidence, ledger = answer_query(
        question, [], kb, bank, registry, model, gateway, obj.config.pipeline
    )
    click.echo(answer)
    if show_evidence:
        for ev in evidence:
            click.echo(f"  [{ev.stream.value}] {ev.subquery} -> {ev.provenance[:5]}")
    click.echo(f"tokens={ledger.total_tokens} steps={len(ledger.records)}", err=True)


@main.command()
@click.pass_obj
def chat(obj: Context):
    """Interactive multi-turn session in the terminal."""
    kb, bank, model, gateway, registry = _load_resources(obj)
    history: list[ConversationTurn] = []
    session_ledger = CostLedger()
    click.echo("filingsqa chat — empty line or Ctrl-D to exit", err=True)
    while True:
        try:
            line = input("> ").strip()
        except (EOFError, KeyboardInterrupt):
            break
        if not line:
            break
        answer, _, _ = answer_query(
            line, history, kb, bank, registry, model, gateway,
            obj.config.pipeline, session_ledger,
        )
        import time as _time

        now = _time.time()
        history.append(ConversationTurn("user", line, now))
        history.append(ConversationTurn("assistant", answer, now))
        click.echo(answer)
        click.echo(f"(session tokens: {session_ledger.total_tokens})", err=True)


@main.command(name="eval")
@click.option("--run", "runs", multiple=True, required=True,
              help="Run file, or label=path; repeatable for comparisons.")
@click.option("--qrels", type=click.Path(exists=True), required=True)
@click.option("--k", "ks", multiple=True, type=int, default=(5, 10), show_default=True)
@click.option("--baseline", default=None, help="Baseline run label for deltas.")
@click.option("--report-out", type=click.Path(), default=None)
def eval_cmd(runs, qrels, ks, baseline, report_out):
    """Score runs against qrels: NDCG, MRR, Precision, Recall at each k."""
    qrels_data = read_qrels(qrels)
    labeled = {}
    for entry in runs:
        label, _, path = entry.rpartition("=")
        if not label:
            label = Path(path).stem
        labeled[label] = read_run(path)
    if len(labeled) == 1:
        label, run = next(iter(labeled.items()))
        for k in ks:
            for name, fn in METRICS.items():
                click.echo(f"{name}@{k}={fn(run, qrels_data, k):.4f}")
        return
    report = compare_runs(labeled, qrels_data, ks=list(ks), baseline=baseline)
    click.echo(report.to_text())
    if report_out:
        Path(report_out).write_text("\n".join(report.to_machine_lines()) + "\n")
        click.echo(f"wrote {report_out}", err=True)


@main.command(name="train-reranker")
@click.option("--stage", type=click.Choice(["s1", "s2", "both", "control-s2-only"]),
              required=True)
@click.option("--strategy",
              type=click.Choice([s.value for s in AbstractionStrategy]),
              default=AbstractionStrategy.COMPLETE.value, show_default=True)
@click.option("--quadruples", type=click.Path(exists=True), default=None,
              help="Human-annotated training quadruples (jsonl); stages s1/both.")
@click.option("--lexicon", type=click.Path(exists=True), default=None,
              help="Entity lexicon JSON: {companies, products, persons, competitors}.")
@click.option("--queries", type=click.Path(exists=True), default=None,
              help="Target-company queries, one per line; stages s2/both/control.")
@click.option("--base-model", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--general-out", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.pass_obj
def train_reranker(obj: Context, stage, strategy, quadruples, lexicon, queries,
                   base_model, out, general_out, epochs, learning_rate):
    """Train the re-ranker: stage 1 (abstracted general), stage 2 (target
    adaptation), both chained, or the direct-specialization control."""
    cfg_kwargs = {"seed": obj.seed}
    if epochs is not None:
        cfg_kwargs["epochs"] = epochs
    if learning_rate is not None:
        cfg_kwargs["learning_rate"] = learning_rate
    cfg = TrainConfig(**cfg_kwargs)
    base = RerankModel.load(base_model) if base_model else pretrained_model()

    lex = EntityLexicon()
    if lexicon:
        data = json.loads(Path(lexicon).read_text())
        lex = EntityLexicon(
            companies=tuple(data.get("companies", [])),
            products=tuple(data.get("products", [])),
            persons=tuple(data.get("persons", [])),
            competitors=tuple(data.get("competitors", [])),
        )

    model = base
    if stage in ("s1", "both"):
        if not quadruples:
            raise click.UsageError("--quadruples is required for stage s1/both")
        d_human = read_quadruples(quadruples)
        model = stage1_train(
            base, d_human, AbstractionStrategy(strategy), lex, cfg,
            obj.config.embedder, obj.config.bm25,
        )
        if general_out:
            model.save(general_out)
    if stage in ("s2", "both", "control-s2-only"):
        if not queries:
            raise click.UsageError("--queries is required for stage s2/both/control")
        q_target = [
            q.strip() for q in Path(queries).read_text().splitlines() if q.strip()
        ]
        kb = load_knowledge_base(obj.config.kb_dir)
        start = base if stage == "control-s2-only" else model
        model = stage2_adapt(start, q_target, kb, obj.gateway(), cfg)
    model.save(out)
    click.echo(f"saved {out} (version={model.version})")


@main.command()
@click.option("--queries", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Quadruples jsonl.")
@click.option("--k-each", type=int, default=10, show_default=True)
@click.option("--count-random", type=int, default=3, show_default=True)
@click.pass_obj
def annotate(obj: Context, queries, out, k_each, count_random):
    """Auto-annotate retrieval output into training quadruples."""
    from .reranker import auto_annotate, sample_negatives, TrainingQuadruple
    from .retrieval import multipath_retrieve

    kb = load_knowledge_base(obj.config.kb_dir)
    gateway = obj.gateway()
    corpus_texts = [c.text for c in kb.all_chunks()]
    quads = []
    for i, line in enumerate(Path(queries).read_text().splitlines()):
        q = line.strip()
        if not q:
            continue
        candidates = multipath_retrieve(q, k_each, kb)
        texts = [kb.chunk(c.chunk_id).text for c in candidates]
        positives, hard = auto_annotate(q, texts, gateway)
        if not positives:
            logger.warning("no positives for %r", q)
            continue
        negatives = sample_negatives(
            hard, corpus_texts, count_random, seed=obj.seed + i, positives=positives
        )
        quads.append(TrainingQuadruple(q=q, positives=tuple(positives),
                                       negatives=tuple(negatives)))
    write_quadruples(quads, out)
    click.echo(f"quadruples={len(quads)} -> {out}")


@main.command(name="bank-init")
@click.option("--questions", type=click.Path(exists=True), required=True,
              help="One canonical question per line, optionally `text|subject`.")
@click.option("--periods", default=None,
              help="Comma-separated fiscal periods; default: document periods in --corpus.")
@click.option("--corpus", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def bank_init(obj: Context, questions, periods, corpus, out):
    """Build the memory bank by running deep retrieval per question and period."""
    kb = load_knowledge_base(obj.config.kb_dir)
    model = (
        RerankModel.load(obj.config.model_path)
        if Path(obj.config.model_path).exists()
        else pretrained_model()
    )
    question_list = []
    for line in Path(questions).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "|" in line:
            text, subject = line.split("|", 1)
            question_list.append((text.strip(), subject.strip()))
        else:
            question_list.append(line)
    if periods:
        period_list = [p.strip() for p in periods.split(",") if p.strip()]
    elif corpus:
        docs = read_corpus(corpus)
        period_list = list(dict.fromkeys(d.period for d in docs if d.period))
    else:
        raise click.UsageError("need --periods or --corpus to derive fiscal periods")
    bank = init_bank(
        question_list, kb, model, obj.gateway(), period_list,
        reasoning_model=obj.config.gateway.reasoning_model,
    )
    bank.save(out)
    click.echo(
        f"bank questions={len(bank.questions)} periods={len(bank.periods)} "
        f"cells={len(bank.cells)} -> {out}"
    )


@main.command(name="bank-verify")
@click.option("--bank", "bank_path", type=click.Path(exists=True), required=True)
@click.option("--question", required=True)
@click.option("--period", required=True)
@click.pass_obj
def bank_verify(obj: Context, bank_path, question, period):
    """Mark one (question, period) cell as expert-verified."""
    bank = MemoryBank.load(bank_path, obj.config.embedder)
    verify_cell(bank, question, period)
    bank.save(bank_path)
    click.echo(f"verified ({question!r}, {period!r})")


@main.command(name="bank-lookup")
@click.option("--bank", "bank_path", type=click.Path(exists=True), required=True)
@click.option("--question", required=True)
@click.option("--period", default=None)
@click.pass_obj
def bank_lookup(obj: Context, bank_path, question, period):
    """Look a question up in the memory bank."""
    bank = MemoryBank.load(bank_path, obj.config.embedder)
    result = lookup(question, period, bank, obj.config.pipeline.thresholds)
    if result.hit:
        click.echo(json.dumps({
            "question": result.question,
            "period": result.period,
            "value": result.value,
            "sources": list(result.sources),
        }, sort_keys=True))
    else:
        click.echo(f"miss ({result.reason})")
        sys.exit(1)


@main.command(name="cost-estimate")
@click.option("--n", type=int, required=True, help="Sub-query count (>= 1).")
@click.option("--t", type=int, default=0, show_default=True, help="Available tool count.")
def cost_estimate(n, t):
    """Closed-form token and cost estimate for a query shape."""
    try:
        est = estimate_cost(n, t)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"tokens={est.tokens}")
    click.echo(f"usd_per_k_queries={est.usd_per_k_queries:.4f}")
    for step, tokens in est.steps.items():
        click.echo(f"  {step}: {tokens}")


@main.command()
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_obj
def serve(obj: Context, host, port):
    """Run the HTTP API."""
    from .service import serve as run_service

    if host:
        obj.config.host = host
    if port:
        obj.config.port = port
    run_service(obj.config)


if __name__ == "__main__":
    main()
