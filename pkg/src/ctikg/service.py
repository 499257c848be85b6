"""HTTP API over the graph, search, queries, QA, and pipeline ingestion.

The explorer frontend consumes these routes exclusively; the CLI's read
commands can also go through them.
"""
from __future__ import annotations

import threading
import uuid
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from . import qa as qa_mod
from .kgraph import (
    GraphEdge, GraphNode, NodeNotFound, ThreatGraph, TkqParseError, _label,
    parse_tkq,
)
from .pipeline import Pipeline, PipelineConfig


class NodeOut(BaseModel):
    id: int
    category: str
    label: str
    name: str
    display_names: list[str]
    attributes: dict[str, list[str]]


class EdgeOut(BaseModel):
    src: int
    dst: int
    rel_class: str
    verb: Optional[str] = None
    step_order: Optional[int] = None
    confidence: float


class SubgraphOut(BaseModel):
    nodes: list[NodeOut]
    edges: list[EdgeOut]


class SearchHit(BaseModel):
    node: NodeOut
    score: float


class QueryIn(BaseModel):
    query: str = Field(description="TKQ text, e.g. "
                       'MATCH (a:Actor {name:"x"})-[:USE]->(b:Tool) '
                       "RETURN b.name")


class QueryOut(BaseModel):
    rows: list


class QaIn(BaseModel):
    question: str


class IngestOut(BaseModel):
    job_id: str
    status: str


class StatsOut(BaseModel):
    nodes: int
    edges: int
    jobs: dict[str, str]
    last_run: Optional[dict] = None


def _node_out(node: GraphNode) -> NodeOut:
    return NodeOut(
        id=node.node_id, category=node.category.value,
        label=_label(node.category), name=node.name,
        display_names=sorted(node.display_names),
        attributes={k: node.attribute_values(k)
                    for k in sorted(node.attributes)})


def _edge_out(edge: GraphEdge) -> EdgeOut:
    return EdgeOut(src=edge.src, dst=edge.dst,
                   rel_class=edge.rel_class.value, verb=edge.verb,
                   step_order=edge.step_order, confidence=edge.confidence)


def create_app(config: Optional[PipelineConfig] = None,
               graph: Optional[ThreatGraph] = None) -> FastAPI:
    config = config or PipelineConfig()
    app = FastAPI(title="ctikg", version="0.1.0")

    state: dict = {
        "graph": graph,
        "intent_model": None,
        "intents": None,
        "jobs": {},
        "last_run": None,
        "lock": threading.Lock(),
    }

    def get_graph() -> ThreatGraph:
        if state["graph"] is None:
            path = Path(config.graph_path)
            state["graph"] = (ThreatGraph.load(path) if path.exists()
                              else ThreatGraph())
        return state["graph"]

    def get_qa():
        if state["intent_model"] is None:
            state["intent_model"] = qa_mod.default_intent_model()
            state["intents"] = qa_mod.load_intents()
        return state["intent_model"], state["intents"]

    @app.get("/api/nodes/{node_id}", response_model=NodeOut)
    def get_node(node_id: int):
        try:
            return _node_out(get_graph().node(node_id))
        except NodeNotFound:
            raise HTTPException(status_code=404, detail="node not found")

    @app.get("/api/nodes/{node_id}/neighbors", response_model=SubgraphOut)
    def get_neighbors(node_id: int, limit: int = Query(default=25, ge=1)):
        try:
            sub = get_graph().neighbors(node_id, limit)
        except NodeNotFound:
            raise HTTPException(status_code=404, detail="node not found")
        return SubgraphOut(nodes=[_node_out(n) for n in sub["nodes"]],
                           edges=[_edge_out(e) for e in sub["edges"]])

    @app.get("/api/search", response_model=list[SearchHit])
    def search(q: str, limit: int = Query(default=20, ge=1)):
        return [SearchHit(node=_node_out(n), score=s)
                for n, s in get_graph().search(q, limit)]

    @app.post("/api/query", response_model=QueryOut)
    def run_query(body: QueryIn):
        try:
            tkq = parse_tkq(body.query)
        except TkqParseError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return QueryOut(rows=get_graph().query(tkq))

    @app.post("/api/qa")
    def run_qa(body: QaIn):
        model, intents = get_qa()
        record = qa_mod.answer(body.question, get_graph(), model, intents)
        return record.to_json()

    @app.post("/api/ingest", response_model=IngestOut)
    def ingest():
        job_id = uuid.uuid4().hex[:12]
        state["jobs"][job_id] = "running"

        def work():
            try:
                pipe = Pipeline(config)
                stats = pipe.run()
                with state["lock"]:
                    state["graph"] = pipe.graph
                    state["last_run"] = stats.to_json()
                    state["jobs"][job_id] = "done"
            except Exception as e:  # job errors surface via /api/stats
                state["jobs"][job_id] = f"failed: {e}"

        threading.Thread(target=work, daemon=True).start()
        return IngestOut(job_id=job_id, status="running")

    @app.get("/api/stats", response_model=StatsOut)
    def stats():
        g = get_graph()
        return StatsOut(nodes=len(g), edges=sum(1 for _ in g.edges),
                        jobs=dict(state["jobs"]),
                        last_run=state["last_run"])

    return app
