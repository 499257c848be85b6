"""Template question answering over the threat graph: entity linking,
log-linear intent classification, and query synthesis from per-intent
templates (single path or the intersection of two paths).
"""
from __future__ import annotations

import csv
import io
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .model import EntityCategory
from .entities import (
    TaggerModel, default_gazetteer, extract_iocs, gazetteer_match,
    mentions_from_tags, tag_sequence,
)
from .kgraph import ThreatGraph, TkqQuery, name_similarity, parse_tkq

LINK_SIMILARITY_FLOOR = 0.6
INTENT_CONFIDENCE_FLOOR = 0.4
INTENT_BUCKETS = 1 << 14

ENTITY_TOKEN = "ENT"


@dataclass(frozen=True)
class QaIntent:
    intent_id: str
    categories: tuple[EntityCategory, ...]
    templates: tuple[str, ...]           # one, or two for intersections
    combinator: str = "single"           # single | intersection

    @property
    def arity(self) -> int:
        return len(self.categories)


def load_intents(path=None) -> dict[str, QaIntent]:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    if path is None:
        data = tomllib.loads(
            resources.files("ctikg.data").joinpath("intents.toml")
            .read_text("utf-8"))
    else:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    intents = {}
    for row in data["intent"]:
        templates = [row["template"]]
        if "template2" in row:
            templates.append(row["template2"])
        intent = QaIntent(
            intent_id=row["id"],
            categories=tuple(EntityCategory(c) for c in row["categories"]),
            templates=tuple(templates),
            combinator=row.get("combinator", "single"))
        # templates must parse under the TKQ grammar at load time
        for t in intent.templates:
            parse_tkq(_fill(t, ["x"] * intent.arity))
        if len(intent.templates) != (2 if intent.combinator == "intersection"
                                     else 1):
            raise ValueError(f"intent {intent.intent_id}: template count "
                             f"does not match combinator")
        intents[intent.intent_id] = intent
    return intents


def _fill(template: str, names: list[str]) -> str:
    out = template
    for i, name in enumerate(names, 1):
        out = out.replace(f"${i}", name.replace("\\", "\\\\").replace('"', '\\"'))
    return out


# ---------------------------------------------------------------------------
# Entity linking

@dataclass(frozen=True)
class LinkedMention:
    surface: str
    category: EntityCategory
    node_name: Optional[str]             # None when unlinked
    similarity: float


def _question_tokens(question: str) -> list[str]:
    return re.findall(r"[\w.\-]+|\S", question)


def link_entities(question: str, graph: ThreatGraph,
                  gazetteer: Optional[dict] = None,
                  tagger: Optional[TaggerModel] = None) -> list[LinkedMention]:
    """Mentions via gazetteer/tagger/IOC rules, each linked to the most
    similar same-category node when similarity clears the floor."""
    if gazetteer is None:
        gazetteer = default_gazetteer()
    tokens = _question_tokens(question)
    mentions = list(gazetteer_match(tokens, gazetteer))
    if tagger is not None:
        occupied = {i for m in mentions for i in range(m.start, m.end + 1)}
        tags = tag_sequence(tagger, tokens)
        for m in mentions_from_tags(tokens, tags, 0):
            if not any(i in occupied for i in range(m.start, m.end + 1)):
                mentions.append(m)
    for m in extract_iocs(question):
        mentions.append(m)

    linked = []
    for m in mentions:
        best_name, best_sim = None, 0.0
        for node in graph.nodes:
            if node.category is not m.category:
                continue
            sim = name_similarity(m.normalized, node.name)
            if sim > best_sim or (sim == best_sim and best_name
                                  and node.name < best_name):
                best_name, best_sim = node.name, sim
        if best_sim < LINK_SIMILARITY_FLOOR:
            best_name = None
        linked.append(LinkedMention(m.surface, m.category, best_name,
                                    round(best_sim, 6)))
    return linked


# ---------------------------------------------------------------------------
# Intent classification

def _intent_features(question: str, linked: list[LinkedMention]) -> dict[int, float]:
    toks = [t.lower() for t in _question_tokens(question)]
    surfaces = {s.lower() for m in linked for s in m.surface.split()}
    toks = [ENTITY_TOKEN if t in surfaces else t for t in toks]
    feats: dict[int, float] = {}

    def add(name):
        b = zlib.crc32(name.encode()) % INTENT_BUCKETS
        feats[b] = feats.get(b, 0.0) + 1.0

    for t in toks:
        add(f"w={t}")
    for a, b in zip(toks, toks[1:]):
        add(f"b={a}|{b}")
    add("BIAS")
    return feats


@dataclass
class IntentModel:
    intents: list[str]
    weights: np.ndarray                  # [n_intents, INTENT_BUCKETS]

    def predict(self, feats: dict[int, float]) -> tuple[str, float]:
        idx = np.fromiter(feats.keys(), dtype=np.int64, count=len(feats))
        val = np.fromiter(feats.values(), dtype=np.float64, count=len(feats))
        scores = self.weights[:, idx] @ val
        scores -= scores.max()
        p = np.exp(scores)
        p /= p.sum()
        i = int(np.argmax(p))
        return self.intents[i], float(p[i])

    def save(self, path):
        import json
        nz = np.nonzero(self.weights)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"intents": self.intents,
                       "rows": nz[0].tolist(), "cols": nz[1].tolist(),
                       "vals": self.weights[nz].tolist()}, f)

    @classmethod
    def load(cls, path):
        import json
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        w = np.zeros((len(d["intents"]), INTENT_BUCKETS))
        w[d["rows"], d["cols"]] = d["vals"]
        return cls(intents=d["intents"], weights=w)


def train_intent_classifier(labeled: list[tuple[str, str]],
                            epochs: int = 200, lr: float = 0.5,
                            l2: float = 1e-4, seed: int = 0) -> IntentModel:
    """labeled: (question-with-ENT-masking, intent_id) pairs."""
    intents = sorted({i for _, i in labeled})
    if len(intents) < 2:
        raise ValueError("need at least 2 intents")
    iidx = {x: i for i, x in enumerate(intents)}
    rows = [_intent_features(q, []) for q, _ in labeled]
    y = [iidx[i] for _, i in labeled]
    rng = np.random.default_rng(seed)
    W = rng.normal(0, 1e-6, (len(intents), INTENT_BUCKETS))
    n = len(labeled)
    X_idx = [np.fromiter(f.keys(), dtype=np.int64, count=len(f)) for f in rows]
    X_val = [np.fromiter(f.values(), dtype=np.float64, count=len(f))
             for f in rows]
    for _ in range(epochs):
        grad = l2 * W
        for i in range(n):
            scores = W[:, X_idx[i]] @ X_val[i]
            scores -= scores.max()
            p = np.exp(scores)
            p /= p.sum()
            p[y[i]] -= 1.0
            grad[:, X_idx[i]] += np.outer(p, X_val[i])
        W -= (lr / n) * grad
    return IntentModel(intents=intents, weights=W)


def load_question_csv(path=None) -> list[tuple[str, str]]:
    if path is None:
        text = resources.files("ctikg.data").joinpath("qa_questions.csv") \
            .read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    rows = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].startswith("#"):
            continue
        rows.append((row[0], row[1]))
    return rows


def default_intent_model() -> IntentModel:
    return train_intent_classifier(load_question_csv())


def classify_intent(model: IntentModel, question: str,
                    linked: Optional[list[LinkedMention]] = None,
                    intents: Optional[dict[str, QaIntent]] = None,
                    ) -> tuple[Optional[QaIntent], float]:
    intent_id, conf = model.predict(_intent_features(question, linked or []))
    if conf < INTENT_CONFIDENCE_FLOOR:
        return None, conf
    table = intents if intents is not None else load_intents()
    return table.get(intent_id), conf


# ---------------------------------------------------------------------------
# Query synthesis + answering

class Unanswerable(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def synthesize_query(intent: QaIntent,
                     linked: list[LinkedMention]) -> list[tuple[str, TkqQuery]]:
    """Bind linked entity names into the intent's template(s)."""
    bound = [m for m in linked if m.node_name is not None]
    if len(bound) != intent.arity:
        raise Unanswerable(
            f"intent {intent.intent_id} needs {intent.arity} linked "
            f"entities, got {len(bound)}")
    for m, cat in zip(bound, intent.categories):
        if m.category is not cat:
            raise Unanswerable(
                f"entity {m.surface!r} is {m.category.value}, "
                f"intent expects {cat.value}")
    names = [m.node_name for m in bound]
    out = []
    for t in intent.templates:
        text = _fill(t, names)
        out.append((text, parse_tkq(text)))
    return out


@dataclass
class AnswerRecord:
    question: str
    linked: list = field(default_factory=list)
    intent: Optional[str] = None
    intent_confidence: float = 0.0
    queries: list = field(default_factory=list)   # query texts
    rows: list = field(default_factory=list)      # raw rows per query
    values: list = field(default_factory=list)    # final answer values
    failure: Optional[str] = None                 # typed unanswerable reason

    def to_json(self) -> dict:
        return {
            "question": self.question,
            "linked": [{"surface": m.surface, "category": m.category.value,
                        "node": m.node_name, "similarity": m.similarity}
                       for m in self.linked],
            "intent": self.intent,
            "intent_confidence": self.intent_confidence,
            "queries": self.queries,
            "rows": self.rows,
            "values": self.values,
            "failure": self.failure,
        }


def answer(question: str, graph: ThreatGraph, intent_model: IntentModel,
           intents: Optional[dict[str, QaIntent]] = None,
           gazetteer: Optional[dict] = None,
           tagger: Optional[TaggerModel] = None) -> AnswerRecord:
    """Three stages: link entities, classify intent, synthesize + run the
    template query. Failures surface as typed outcomes, never exceptions."""
    record = AnswerRecord(question=question)
    record.linked = link_entities(question, graph, gazetteer, tagger)
    if not any(m.node_name for m in record.linked):
        record.failure = "no-link"
        return record

    intent, conf = classify_intent(intent_model, question, record.linked,
                                   intents)
    record.intent_confidence = conf
    if intent is None:
        record.failure = "unknown-intent"
        return record
    record.intent = intent.intent_id

    try:
        queries = synthesize_query(intent, record.linked)
    except Unanswerable as e:
        record.failure = e.reason
        return record
    record.queries = [text for text, _ in queries]

    results = [graph.query(q) for _, q in queries]
    record.rows = results
    if intent.combinator == "intersection":
        first = [r for r in results[0] if r in set(results[1])]
        record.values = first
    else:
        record.values = results[0]
    if not record.values:
        record.failure = "empty-result"
    return record
