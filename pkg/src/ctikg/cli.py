"""Command-line interface: pipeline stages, training, graph queries, QA,
export, and the HTTP service. Read commands accept ``--server`` to go
through a running service instead of touching files directly.
"""
from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from . import entities, ingest, parsing, qa as qa_mod, relations, relevance
from .kgraph import ThreatGraph, parse_tkq
from .model import Stage, UtkrDocument, dump_utkr, load_utkr
from .pipeline import Pipeline, PipelineConfig, load_stage_documents, run_pipeline


def _config(config_path) -> PipelineConfig:
    if config_path:
        return PipelineConfig.load(config_path)
    return PipelineConfig()


def _server_get(server, path, **params):
    import requests
    resp = requests.get(f"{server.rstrip('/')}{path}", params=params,
                        timeout=30)
    resp.raise_for_status()
    return resp.json()


def _server_post(server, path, payload):
    import requests
    resp = requests.post(f"{server.rstrip('/')}{path}", json=payload,
                         timeout=120)
    resp.raise_for_status()
    return resp.json()


@click.group()
def main():
    """Threat-report collection, extraction, and knowledge-graph tooling."""


@main.command()
@click.option("--sources", "sources_file", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", default="data/raw", show_default=True)
def crawl(sources_file, out_dir):
    """Fetch new reports from every configured source."""
    configs = ingest.load_source_configs(sources_file)
    seen = ingest.SeenSet()
    docs, errors = ingest.fetch_all(configs, seen)
    for doc in docs:
        ingest.save_raw(doc, out_dir)
    click.echo(f"fetched {len(docs)} documents "
               f"({len(errors)} source errors)")


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--source", "source_id", required=True)
@click.option("--out", "out_dir", default="data/raw", show_default=True)
def port(in_dir, source_id, out_dir):
    """Load a local corpus directory and cache it as raw documents."""
    docs = ingest.load_corpus(in_dir, source_id)
    for doc in docs:
        ingest.save_raw(doc, out_dir)
    click.echo(f"ported {len(docs)} documents")


@main.command()
@click.option("--in", "in_dir", default="data/raw", show_default=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", default="data/utkr/parsed",
              show_default=True)
@click.option("--parsers", "parsers_dir", type=click.Path(exists=True))
def parse(in_dir, out_dir, parsers_dir):
    """Parse cached raw documents into UTKR files."""
    if parsers_dir:
        for spec_file in sorted(Path(parsers_dir).glob("*.toml")):
            parsing.register_parser(parsing.load_parser_spec(spec_file))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for source_dir in sorted(Path(in_dir).iterdir()):
        if not source_dir.is_dir():
            continue
        for path in sorted(source_dir.iterdir()):
            body = path.read_bytes()
            kind = "HTML" if body.lstrip()[:1] == b"<" else "TEXT"
            raw = ingest.RawDocument(
                report_id=f"{source_dir.name}/{path.stem}",
                source_id=source_dir.name, url=str(path), fetched_at=0.0,
                media_kind=kind, body=body)
            doc = parsing.parse_document(raw)
            safe = doc.report_id.replace("/", "_")
            (out / f"{safe}.json").write_text(dump_utkr(doc),
                                              encoding="utf-8")
            count += 1
    click.echo(f"parsed {count} documents")


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--data", "data_dir", default="data", show_default=True)
def check(model_path, data_dir):
    """Run the relevance checker over parsed UTKRs."""
    model = relevance.CheckerModel.load(model_path)
    keywords = relevance.load_keywords()
    out = Path(data_dir) / "utkr" / "checked"
    out.mkdir(parents=True, exist_ok=True)
    kept = 0
    for doc in load_stage_documents(data_dir, "parsed"):
        verdict = relevance.predict_relevance(model, doc, keywords)
        checked = doc.advance(Stage.CHECKED, relevance=verdict)
        safe = doc.report_id.replace("/", "_")
        (out / f"{safe}.json").write_text(dump_utkr(checked),
                                          encoding="utf-8")
        kept += verdict[1]
    click.echo(f"checked; {kept} relevant")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", "data_dir", default="data", show_default=True)
@click.option("--stage", "only_stage",
              type=click.Choice(["entities", "relations", "all"]),
              default="all", show_default=True)
def extract(config_path, data_dir, only_stage):
    """Extract entities and relations from checked UTKRs."""
    cfg = _config(config_path)
    pipe = Pipeline(cfg)
    out = Path(data_dir) / "utkr" / "extracted"
    out.mkdir(parents=True, exist_ok=True)
    docs = load_stage_documents(data_dir, "checked") or \
        load_stage_documents(data_dir, "parsed")
    n = 0
    for doc in docs:
        if doc.relevance is not None and not doc.relevance[1]:
            continue
        extracted = pipe.extract(doc)
        safe = doc.report_id.replace("/", "_")
        (out / f"{safe}.json").write_text(dump_utkr(extracted),
                                          encoding="utf-8")
        n += 1
    click.echo(f"extracted {n} documents")


@main.command("build-kg")
@click.option("--data", "data_dir", default="data", show_default=True)
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True)
def build_kg(data_dir, graph_path):
    """Upsert extracted UTKRs into the graph."""
    path = Path(graph_path)
    graph = ThreatGraph.load(path) if path.exists() else ThreatGraph()
    added = 0
    for doc in load_stage_documents(data_dir, "extracted"):
        delta = graph.upsert_from_utkr(doc)
        added += delta.nodes_added
    path.parent.mkdir(parents=True, exist_ok=True)
    graph.save(path)
    click.echo(f"graph now has {len(graph)} nodes (+{added})")


@main.command()
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True, type=click.Path(exists=True))
@click.option("--threshold", default=0.75, show_default=True)
def fuse(graph_path, threshold):
    """Merge near-duplicate entities in the graph."""
    graph = ThreatGraph.load(graph_path)
    report = graph.fuse_entities(threshold)
    graph.save(graph_path)
    click.echo(f"merged {len(report['merged'])} pairs, "
               f"rejected {len(report['rejected'])}")


@main.command()
@click.argument("tkq")
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True)
@click.option("--server")
def query(tkq, graph_path, server):
    """Run a TKQ pattern query."""
    if server:
        rows = _server_post(server, "/api/query", {"query": tkq})["rows"]
    else:
        rows = ThreatGraph.load(graph_path).query(parse_tkq(tkq))
    for row in rows:
        click.echo(row)


@main.command()
@click.argument("question")
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True)
@click.option("--server")
def qa(question, graph_path, server):
    """Answer a natural-language question over the graph."""
    if server:
        record = _server_post(server, "/api/qa", {"question": question})
    else:
        graph = ThreatGraph.load(graph_path)
        model = qa_mod.default_intent_model()
        record = qa_mod.answer(question, graph, model).to_json()
    click.echo(json.dumps(record, indent=2))


@main.command()
@click.argument("keywords")
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True)
@click.option("--server")
def search(keywords, graph_path, server):
    """Keyword search over graph nodes."""
    if server:
        hits = _server_get(server, "/api/search", q=keywords)
        for h in hits:
            click.echo(f"{h['score']:.3f}  {h['node']['name']}")
    else:
        graph = ThreatGraph.load(graph_path)
        for node, score in graph.search(keywords):
            click.echo(f"{score:.3f}  {node.name}")


@main.command()
@click.option("--graph", "graph_path", default="data/graph.tkg",
              show_default=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["cypher"]),
              default="cypher", show_default=True)
@click.option("--out", "out_path", type=click.Path())
def export(graph_path, fmt, out_path):
    """Export the graph as a Cypher statement stream."""
    graph = ThreatGraph.load(graph_path)
    stream = graph.export_cypher()
    if out_path:
        Path(out_path).write_text("\n".join(stream) + "\n", encoding="utf-8")
    else:
        for stmt in stream:
            click.echo(stmt)


@main.command("train-checker")
@click.option("--labels", "labels_csv", required=True,
              type=click.Path(exists=True),
              help="CSV of utkr-json-path,label(0/1)")
@click.option("--source", "source_scope", default="universal",
              show_default=True)
@click.option("--out", "out_path", default="checker.model.json",
              show_default=True)
@click.option("--theta", default=relevance.DEFAULT_THETA, show_default=True)
def train_checker_cmd(labels_csv, source_scope, out_path, theta):
    """Train the relevance checker from labeled UTKR files."""
    rows = []
    with open(labels_csv, newline="", encoding="utf-8") as f:
        for path, label in csv.reader(f):
            doc = load_utkr(Path(path).read_text(encoding="utf-8"))
            rows.append((doc, label.strip() in ("1", "true", "relevant")))
    keywords = relevance.load_keywords()
    idf = relevance.compute_idf([d for d, _ in rows])
    labeled = [(relevance.featurize(d, keywords, idf), y) for d, y in rows]
    model = relevance.train_checker(
        labeled, theta=theta, source_scope=source_scope, idf=idf,
        lexicon_hash=relevance.keywords_hash(keywords))
    model.save(out_path)
    click.echo(f"wrote {out_path}")


@main.command("train-ner")
@click.option("--train", "train_file", required=True,
              type=click.Path(exists=True),
              help="CoNLL-style token<TAB>tag file")
@click.option("--epochs", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default="tagger.model.json",
              show_default=True)
def train_ner(train_file, epochs, seed, out_path):
    """Train the entity tagger."""
    data = entities.load_conll(Path(train_file).read_text(encoding="utf-8"))
    model = entities.train_tagger(data, epochs=epochs, seed=seed)
    model.save(out_path)
    click.echo(f"trained on {len(data)} sentences; wrote {out_path}")


@main.command("train-re")
@click.option("--train", "train_file", required=True,
              type=click.Path(exists=True),
              help="JSONL labeled relation candidates")
@click.option("--epochs", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default="relation.model.json",
              show_default=True)
def train_re(train_file, epochs, seed, out_path):
    """Train the relation classifier."""
    from .model import VerbLexicon
    lexicon = VerbLexicon.default()
    rows = relations.load_labeled_relations(train_file)
    labeled = [(relations.featurize_relation(c, lexicon), cls)
               for c, cls, _ in rows]
    weights = [w for _, _, w in rows]
    model = relations.train_relation_classifier(
        labeled, weights=weights, epochs=epochs, seed=seed)
    model.save(out_path)
    click.echo(f"trained on {len(rows)} candidates; wrote {out_path}")


@main.command("fit-label-model")
@click.option("--candidates", "cand_file", required=True,
              type=click.Path(exists=True),
              help="JSONL unlabeled relation candidates")
@click.option("--kb", "kb_path", type=click.Path(exists=True))
@click.option("--min-confidence", default=0.6, show_default=True)
@click.option("--out", "out_path", default="synth.labels.jsonl",
              show_default=True)
def fit_label_model_cmd(cand_file, kb_path, min_confidence, out_path):
    """Apply labeling functions, fit the label model, synthesize labels."""
    from . import weaksup
    from .model import VerbLexicon
    lexicon = VerbLexicon.default()
    cands = [c for c, _, _ in relations.load_labeled_relations(
        cand_file, require_class=False)]
    lfs = [weaksup.verb_keyword_lf(lexicon), weaksup.keyword_alias_lf()]
    if kb_path:
        lfs.append(weaksup.distant_supervision_lf(kb_path))
    matrix = weaksup.apply_lfs(lfs, cands)
    model = weaksup.fit_label_model(matrix)
    synth = weaksup.synthesize_training_set(matrix, model, min_confidence)
    with open(out_path, "w", encoding="utf-8") as f:
        for cand, cls, weight in synth:
            f.write(json.dumps(
                relations.labeled_relation_json(cand, cls, weight)) + "\n")
    click.echo(f"alphas={model.alphas.round(3).tolist()}; "
               f"wrote {len(synth)} rows to {out_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(config_path, host, port):
    """Run the HTTP service."""
    import uvicorn
    from .service import create_app
    app = create_app(_config(config_path))
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["once", "continuous"]),
              default="once", show_default=True)
@click.option("--cycles", default=1, show_default=True,
              help="iterations in continuous mode")
def pipeline(config_path, mode, cycles):
    """Run the full pipeline."""
    stats = run_pipeline(_config(config_path), mode=mode, cycles=cycles)
    click.echo(json.dumps(stats.to_json(), indent=2))


if __name__ == "__main__":
    sys.exit(main())
