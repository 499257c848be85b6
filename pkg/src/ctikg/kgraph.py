"""Persistent threat knowledge graph: upsert from extracted documents,
trigram-similarity entity fusion, a single-path pattern query engine,
TF-IDF keyword search, line-delimited JSON persistence, and Cypher export.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import (
    EntityCategory, Provenance, RelationClass, Stage, TripleOrigin,
    UtkrDocument, canonical_name,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_FUSE_THRESHOLD = 0.75

# attribute keys where two different values on one entity are a conflict
SINGLE_VALUED_KEYS = frozenset({"platform", "cve_id"})

_TOKEN_RE = re.compile(r"[A-Za-z0-9_.\-]+")


class GraphError(Exception):
    pass


class NodeNotFound(GraphError):
    pass


class GraphLoadError(GraphError):
    pass


@dataclass
class GraphNode:
    node_id: int
    category: EntityCategory
    name: str                            # canonical, unique within category
    display_names: set = field(default_factory=set)
    attributes: dict = field(default_factory=dict)  # key -> set[(value, Provenance)]

    @property
    def platform(self) -> Optional[str]:
        vals = self.attributes.get("platform")
        if vals:
            return sorted(v for v, _ in vals)[0]
        return None

    def attribute_values(self, key: str) -> list[str]:
        return sorted({v for v, _ in self.attributes.get(key, ())})

    def add_attribute(self, key: str, value: str, prov: Provenance) -> bool:
        entry = (value, prov)
        bucket = self.attributes.setdefault(key, set())
        if entry in bucket:
            return False
        bucket.add(entry)
        return True


@dataclass
class GraphEdge:
    src: int
    dst: int
    rel_class: RelationClass
    verb: Optional[str] = None
    step_order: Optional[int] = None
    provenance: set = field(default_factory=set)  # set[(Provenance, confidence)]

    @property
    def confidence(self) -> float:
        return max((c for _, c in self.provenance), default=1.0)

    def key(self) -> tuple:
        return (self.src, self.dst, self.rel_class)


@dataclass
class UpsertDelta:
    nodes_added: int = 0
    nodes_updated: int = 0
    edges_added: int = 0
    edges_updated: int = 0

    def is_zero(self) -> bool:
        return not (self.nodes_added or self.nodes_updated
                    or self.edges_added or self.edges_updated)


class ThreatGraph:
    def __init__(self):
        self._nodes: dict[int, GraphNode] = {}
        self._by_name: dict[tuple[EntityCategory, str], int] = {}
        self._edges: dict[tuple, GraphEdge] = {}
        self._next_id = 1
        self._index_dirty = True
        self._index: dict[str, dict[int, float]] = {}
        self._norms: dict[int, float] = {}

    # -- basic access -------------------------------------------------------

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self) -> Iterable[GraphNode]:
        return self._nodes.values()

    @property
    def edges(self) -> Iterable[GraphEdge]:
        return self._edges.values()

    def node(self, node_id: int) -> GraphNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise NodeNotFound(f"node {node_id} not in graph")

    def find(self, category: EntityCategory, name: str) -> Optional[GraphNode]:
        nid = self._by_name.get((category, name))
        return self._nodes.get(nid) if nid is not None else None

    def get_or_create(self, category: EntityCategory, name: str,
                      display: str) -> tuple[GraphNode, bool]:
        node = self.find(category, name)
        if node is not None:
            created = display not in node.display_names
            node.display_names.add(display)
            self._index_dirty = True
            return node, False
        node = GraphNode(node_id=self._next_id, category=category, name=name,
                         display_names={display})
        self._next_id += 1
        self._nodes[node.node_id] = node
        self._by_name[(category, name)] = node.node_id
        self._index_dirty = True
        return node, True

    def add_edge(self, src: int, dst: int, rel_class: RelationClass,
                 prov: Provenance, confidence: float = 1.0,
                 verb: Optional[str] = None,
                 step_order: Optional[int] = None) -> tuple[GraphEdge, bool, bool]:
        """Returns (edge, created, provenance_added); parallel edges with the
        same (src, dst, class) merge by unioning provenance."""
        key = (src, dst, rel_class)
        edge = self._edges.get(key)
        created = edge is None
        if created:
            edge = GraphEdge(src=src, dst=dst, rel_class=rel_class, verb=verb,
                             step_order=step_order)
            self._edges[key] = edge
        entry = (prov, confidence)
        added = entry not in edge.provenance
        edge.provenance.add(entry)
        if verb and edge.verb is None:
            edge.verb = verb
        if step_order and edge.step_order is None:
            edge.step_order = step_order
        return edge, created, added

    # -- upsert -------------------------------------------------------------

    def upsert_from_utkr(self, doc: UtkrDocument) -> UpsertDelta:
        if doc.stage is not Stage.EXTRACTED:
            raise GraphError(f"document {doc.report_id} is not EXTRACTED")
        delta = UpsertDelta()
        if doc.relevance is not None and not doc.relevance[1]:
            log.warning("skipping irrelevant document %s", doc.report_id)
            return delta

        stamp = doc.published.isoformat() if doc.published else ""
        prov = Provenance(doc.report_id, doc.source_id, "upsert", stamp)

        report, created = self.get_or_create(
            EntityCategory.REPORT, canonical_name(EntityCategory.REPORT,
                                                  doc.report_id),
            doc.report_id)
        self._count(delta, created, False)
        for key, value in (("title", doc.title), ("url", doc.url),
                           ("published", stamp)):
            if value and report.add_attribute(key, value, prov):
                if not created:
                    delta.nodes_updated += 1
                self._index_dirty = True

        entity_nodes: list[GraphNode] = []
        for ent in doc.entities:
            node, is_new = self.get_or_create(ent.category, ent.normalized,
                                              ent.surface)
            self._count(delta, is_new, False)
            entity_nodes.append(node)
            eprov = Provenance(doc.report_id, doc.source_id,
                               ent.source.value, stamp)
            _, ecreated, eadded = self.add_edge(
                node.node_id, report.node_id, RelationClass.REPORTED_IN,
                eprov, ent.confidence)
            self._count_edge(delta, ecreated, eadded)

        for t in doc.relations:
            subj = entity_nodes[t.subject]
            obj = entity_nodes[t.object]
            tprov = Provenance(doc.report_id, doc.source_id,
                               t.origin.value, stamp)
            _, ecreated, eadded = self.add_edge(
                subj.node_id, obj.node_id, t.rel_class, tprov, t.confidence,
                verb=t.verb, step_order=t.step_order)
            self._count_edge(delta, ecreated, eadded)

        if doc.structured_fields:
            primary = self._primary_entity(doc, entity_nodes) or report
            for key, value in doc.structured_fields.items():
                if primary.add_attribute(key.strip().lower(), value, prov):
                    delta.nodes_updated += 1
                    self._index_dirty = True
        return delta

    @staticmethod
    def _primary_entity(doc: UtkrDocument,
                        entity_nodes: list[GraphNode]) -> Optional[GraphNode]:
        """The title-named entity, when one of the extracted entities'
        canonical names occurs in the canonicalized title."""
        title = "".join(ch for ch in doc.title.lower() if ch.isalnum())
        best = None
        for node in entity_nodes:
            probe = "".join(ch for ch in node.name if ch.isalnum())
            if probe and probe in title:
                if best is None or len(node.name) > len(best.name):
                    best = node
        return best

    @staticmethod
    def _count(delta: UpsertDelta, created: bool, updated: bool):
        if created:
            delta.nodes_added += 1
        elif updated:
            delta.nodes_updated += 1

    @staticmethod
    def _count_edge(delta: UpsertDelta, created: bool, added: bool):
        if created:
            delta.edges_added += 1
        elif added:
            delta.edges_updated += 1

    # -- fusion -------------------------------------------------------------

    def fuse_entities(self, threshold: float = DEFAULT_FUSE_THRESHOLD) -> dict:
        """Merge same-category nodes with similar names and compatible
        attributes; edges are re-targeted, never dropped."""
        if not 0.0 < threshold <= 1.0:
            raise ValueError("fusion threshold must be in (0, 1]")
        merged: list[tuple[str, str]] = []
        rejected: list[tuple[str, str, str]] = []
        by_cat: dict[EntityCategory, list[int]] = {}
        for node in self._nodes.values():
            if node.category is EntityCategory.REPORT:
                continue
            by_cat.setdefault(node.category, []).append(node.node_id)

        for cat in sorted(by_cat, key=lambda c: c.value):
            ids = by_cat[cat]
            pairs = []
            for i, a in enumerate(ids):
                for b in ids[i + 1:]:
                    na, nb = self._nodes[a].name, self._nodes[b].name
                    pairs.append(tuple(sorted([(na, a), (nb, b)])))
            for (na, a), (nb, b) in sorted(pairs):
                if a not in self._nodes or b not in self._nodes:
                    continue
                sim = name_similarity(self._nodes[a].name, self._nodes[b].name)
                if sim < threshold:
                    continue
                reason = self._merge_conflict(self._nodes[a], self._nodes[b])
                if reason:
                    rejected.append((na, nb, reason))
                    continue
                self._merge(a, b)
                merged.append((na, nb))
        return {"merged": merged, "rejected": rejected}

    @staticmethod
    def _merge_conflict(a: GraphNode, b: GraphNode) -> Optional[str]:
        for key in SINGLE_VALUED_KEYS:
            va = {v for v, _ in a.attributes.get(key, ())}
            vb = {v for v, _ in b.attributes.get(key, ())}
            if va and vb and va.isdisjoint(vb):
                return f"{key}-conflict"
        return None

    def _merge(self, a_id: int, b_id: int) -> None:
        a, b = self._nodes[a_id], self._nodes[b_id]
        keep, drop = (a, b) if len(a.name) >= len(b.name) else (b, a)
        keep.display_names |= drop.display_names
        for key, vals in drop.attributes.items():
            keep.attributes.setdefault(key, set()).update(vals)
        # re-target edges
        for key in list(self._edges):
            edge = self._edges.pop(key)
            src = keep.node_id if edge.src == drop.node_id else edge.src
            dst = keep.node_id if edge.dst == drop.node_id else edge.dst
            nk = (src, dst, edge.rel_class)
            if nk in self._edges:
                self._edges[nk].provenance |= edge.provenance
            else:
                edge.src, edge.dst = src, dst
                self._edges[nk] = edge
        del self._nodes[drop.node_id]
        del self._by_name[(drop.category, drop.name)]
        self._index_dirty = True

    # -- queries ------------------------------------------------------------

    def query(self, q: "TkqQuery") -> list:
        rows = []
        if q.rel_class is None:
            node = self.find(q.src_category, q.src_name) if q.src_name else None
            nodes = [node] if node else (
                [] if q.src_name else sorted(
                    (n for n in self._nodes.values()
                     if n.category is q.src_category),
                    key=lambda n: n.name))
            for n in nodes:
                rows.extend(_select_rows(n, q))
        else:
            starts = []
            if q.src_name:
                node = self.find(q.src_category, q.src_name)
                if node:
                    starts = [node]
            else:
                starts = [n for n in self._nodes.values()
                          if n.category is q.src_category]
            matched = []
            for s in starts:
                for edge in self._edges.values():
                    if edge.src != s.node_id or edge.rel_class is not q.rel_class:
                        continue
                    dst = self._nodes[edge.dst]
                    if q.dst_category and dst.category is not q.dst_category:
                        continue
                    if q.dst_name and dst.name != q.dst_name:
                        continue
                    matched.append((s, dst))
            matched.sort(key=lambda p: (p[0].name, p[1].name))
            for s, d in matched:
                target = d if q.return_var == "b" else s
                rows.extend(_select_rows(target, q))
        # dedupe, preserving order
        seen = set()
        unique = []
        for r in rows:
            if r not in seen:
                seen.add(r)
                unique.append(r)
        if q.selector == "count":
            return [len(unique)]
        return unique

    def neighbors(self, node_id: int, limit: int = 25) -> dict:
        center = self.node(node_id)
        adjacent: dict[int, float] = {}
        edges = []
        for edge in self._edges.values():
            other = None
            if edge.src == node_id:
                other = edge.dst
            elif edge.dst == node_id:
                other = edge.src
            if other is None or other == node_id:
                continue
            conf = edge.confidence
            adjacent[other] = max(adjacent.get(other, 0.0), conf)
            edges.append(edge)
        ranked = sorted(adjacent,
                        key=lambda nid: (-adjacent[nid], self._nodes[nid].name))
        keep = set(ranked[:limit])
        return {
            "nodes": [center] + [self._nodes[n] for n in ranked[:limit]],
            "edges": [e for e in edges
                      if (e.src == node_id and e.dst in keep)
                      or (e.dst == node_id and e.src in keep)],
        }

    # -- search -------------------------------------------------------------

    def _rebuild_index(self):
        self._index = {}
        docs: dict[int, dict[str, int]] = {}
        for node in self._nodes.values():
            counts: dict[str, int] = {}
            for name in node.display_names:
                for t in _TOKEN_RE.findall(name.lower()):
                    counts[t] = counts.get(t, 0) + 1
            for vals in node.attributes.values():
                for v, _ in vals:
                    for t in _TOKEN_RE.findall(str(v).lower()):
                        counts[t] = counts.get(t, 0) + 1
            docs[node.node_id] = counts
        n = max(len(docs), 1)
        df: dict[str, int] = {}
        for counts in docs.values():
            for t in counts:
                df[t] = df.get(t, 0) + 1
        self._norms = {}
        for nid, counts in docs.items():
            sq = 0.0
            for t, c in counts.items():
                idf = math.log((1 + n) / (1 + df[t])) + 1.0
                w = c * idf
                self._index.setdefault(t, {})[nid] = w
                sq += w * w
            self._norms[nid] = math.sqrt(sq) or 1.0
        self._index_dirty = False

    def search(self, query: str, limit: int = 20) -> list[tuple[GraphNode, float]]:
        if self._index_dirty:
            self._rebuild_index()
        qtoks = _TOKEN_RE.findall(query.lower())
        scores: dict[int, float] = {}
        for t in qtoks:
            for nid, w in self._index.get(t, {}).items():
                scores[nid] = scores.get(nid, 0.0) + w
        ranked = sorted(
            ((self._nodes[nid], s / self._norms[nid])
             for nid, s in scores.items()),
            key=lambda p: (-p[1], p[0].name))
        return ranked[:limit]

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"format": "tkg", "version": FORMAT_VERSION,
                                "nodes": len(self._nodes),
                                "edges": len(self._edges)}) + "\n")
            for node in sorted(self._nodes.values(), key=lambda n: n.node_id):
                f.write(json.dumps({
                    "id": node.node_id,
                    "category": node.category.value,
                    "name": node.name,
                    "display_names": sorted(node.display_names),
                    "attributes": {
                        k: [[v, p.to_json()] for v, p in sorted(
                            vals, key=lambda e: (e[0], e[1].report_id))]
                        for k, vals in sorted(node.attributes.items())},
                }, ensure_ascii=False) + "\n")
            for edge in sorted(self._edges.values(),
                               key=lambda e: (e.src, e.dst, e.rel_class.value)):
                f.write(json.dumps({
                    "src": edge.src, "dst": edge.dst,
                    "class": edge.rel_class.value,
                    "verb": edge.verb, "step_order": edge.step_order,
                    "provenance": [[p.to_json(), c] for p, c in sorted(
                        edge.provenance,
                        key=lambda e: (e[0].report_id, e[1]))],
                }, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "ThreatGraph":
        g = cls()
        try:
            with open(path, encoding="utf-8") as f:
                header = json.loads(f.readline())
                if header.get("format") != "tkg":
                    raise GraphLoadError(f"{path}: not a tkg graph file")
                if header.get("version") != FORMAT_VERSION:
                    raise GraphLoadError(
                        f"{path}: unsupported version {header.get('version')}")
                for _ in range(header["nodes"]):
                    d = json.loads(f.readline())
                    node = GraphNode(
                        node_id=d["id"],
                        category=EntityCategory(d["category"]),
                        name=d["name"],
                        display_names=set(d["display_names"]),
                        attributes={
                            k: {(v, Provenance.from_json(p)) for v, p in vals}
                            for k, vals in d["attributes"].items()})
                    g._nodes[node.node_id] = node
                    g._by_name[(node.category, node.name)] = node.node_id
                    g._next_id = max(g._next_id, node.node_id + 1)
                for _ in range(header["edges"]):
                    d = json.loads(f.readline())
                    edge = GraphEdge(
                        src=d["src"], dst=d["dst"],
                        rel_class=RelationClass(d["class"]),
                        verb=d.get("verb"), step_order=d.get("step_order"),
                        provenance={(Provenance.from_json(p), c)
                                    for p, c in d["provenance"]})
                    g._edges[edge.key()] = edge
        except GraphLoadError:
            raise
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise GraphLoadError(f"{path}: corrupt graph file ({e})")
        g._index_dirty = True
        return g

    # -- export -------------------------------------------------------------

    def export_cypher(self) -> Iterable[str]:
        for node in sorted(self._nodes.values(), key=lambda n: n.node_id):
            props = {"name": node.name,
                     "display": sorted(node.display_names)[0]}
            for key, vals in sorted(node.attributes.items()):
                values = sorted({v for v, _ in vals})
                props[key] = values[0] if len(values) == 1 else values
            yield (f"CREATE (:{_label(node.category)} "
                   f"{{{_cypher_props(props)}}});")
        for edge in sorted(self._edges.values(),
                           key=lambda e: (e.src, e.dst, e.rel_class.value)):
            a, b = self._nodes[edge.src], self._nodes[edge.dst]
            props = {}
            if edge.verb:
                props["verb"] = edge.verb
            if edge.step_order:
                props["step_order"] = edge.step_order
            props["confidence"] = round(edge.confidence, 6)
            yield (f"MATCH (a:{_label(a.category)} "
                   f"{{name:{_cypher_str(a.name)}}}), "
                   f"(b:{_label(b.category)} {{name:{_cypher_str(b.name)}}}) "
                   f"CREATE (a)-[:{edge.rel_class.value} "
                   f"{{{_cypher_props(props)}}}]->(b);")


# ---------------------------------------------------------------------------
# name similarity + fusion helper

def name_similarity(a: str, b: str) -> float:
    """Character-trigram Jaccard; strings shorter than 3 chars compare
    exactly."""
    if len(a) < 3 or len(b) < 3:
        return 1.0 if a == b else 0.0
    ta = {a[i:i + 3] for i in range(len(a) - 2)}
    tb = {b[i:i + 3] for i in range(len(b) - 2)}
    return len(ta & tb) / len(ta | tb)


# ---------------------------------------------------------------------------
# Cypher helpers

_LABELS = {
    EntityCategory.THREAT_ACTOR: "Actor",
    EntityCategory.HASH_MD5: "HashMd5",
    EntityCategory.HASH_SHA1: "HashSha1",
    EntityCategory.HASH_SHA256: "HashSha256",
    EntityCategory.CVE: "Cve",
    EntityCategory.IP: "Ip",
    EntityCategory.URL: "Url",
}


def _label(cat: EntityCategory) -> str:
    if cat in _LABELS:
        return _LABELS[cat]
    return cat.value.title().replace("_", "")


def category_for_label(label: str) -> EntityCategory:
    for cat in EntityCategory:
        if _label(cat).lower() == label.lower():
            return cat
    return EntityCategory(label.upper())


def _cypher_str(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _cypher_props(props: dict) -> str:
    parts = []
    for k, v in props.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            parts.append(f"{k}:{v}")
        elif isinstance(v, list):
            parts.append(f"{k}:[{', '.join(_cypher_str(x) for x in v)}]")
        else:
            parts.append(f"{k}:{_cypher_str(v)}")
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# TKQ query DSL

@dataclass(frozen=True)
class TkqQuery:
    src_category: EntityCategory
    src_name: Optional[str] = None
    rel_class: Optional[RelationClass] = None
    dst_category: Optional[EntityCategory] = None
    dst_name: Optional[str] = None
    return_var: str = "b"               # "a" or "b"
    selector: str = "names"             # names | attributes | count
    attribute_key: Optional[str] = None


def _select_rows(node: GraphNode, q: TkqQuery) -> list:
    if q.selector == "attributes":
        return node.attribute_values(q.attribute_key)
    return [node.name]


class TkqParseError(GraphError):
    pass


_NODE_PAT = r"\(\s*(\w+)\s*:\s*(\w+)\s*(?:\{\s*name\s*:\s*\"((?:[^\"\\]|\\.)*)\"\s*\})?\s*\)"
_TKQ_RE = re.compile(
    r"^\s*MATCH\s*" + _NODE_PAT +
    r"(?:\s*-\s*\[\s*(?:\w+\s*)?:\s*(\w+)\s*\]\s*->\s*" + _NODE_PAT + r")?"
    r"\s*RETURN\s+(.+?)\s*$",
    re.IGNORECASE | re.DOTALL)

_RET_RE = re.compile(
    r"^(?:count\s*\(\s*(\w+)\s*\)|(\w+)\.name|(\w+)\.attr\.(\w+))$",
    re.IGNORECASE)


def parse_tkq(text: str) -> TkqQuery:
    m = _TKQ_RE.match(text)
    if not m:
        raise TkqParseError(f"cannot parse query: {text!r}")
    a_var, a_label, a_name, rel, b_var, b_label, b_name, ret = m.groups()
    try:
        src_cat = category_for_label(a_label)
        rel_class = RelationClass(rel.upper()) if rel else None
        dst_cat = category_for_label(b_label) if b_label else None
    except ValueError as e:
        raise TkqParseError(str(e))
    rm = _RET_RE.match(ret.strip())
    if not rm:
        raise TkqParseError(f"cannot parse RETURN clause: {ret!r}")
    count_var, name_var, attr_var, attr_key = rm.groups()
    var = (count_var or name_var or attr_var)
    var_map = {a_var: "a"}
    if b_var:
        var_map[b_var] = "b"
    if var not in var_map:
        raise TkqParseError(f"unknown variable {var!r} in RETURN")
    selector = "count" if count_var else ("attributes" if attr_var else "names")
    return TkqQuery(
        src_category=src_cat,
        src_name=a_name.replace('\\"', '"') if a_name else None,
        rel_class=rel_class,
        dst_category=dst_cat,
        dst_name=b_name.replace('\\"', '"') if b_name else None,
        return_var=var_map[var],
        selector=selector,
        attribute_key=attr_key.lower() if attr_key else None)
