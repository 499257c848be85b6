"""Core ontology types, the per-report document model, and the verb lexicon.

Everything downstream (extractors, graph, QA) builds on the types here.
All values are immutable after construction; stages enrich documents by
producing copies via ``dataclasses.replace``.
"""
from __future__ import annotations

import dataclasses
import datetime
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Optional

SCHEMA_VERSION = "1.0"

# Major versions we can read. Unknown majors are rejected on load.
_ACCEPTED_MAJOR = "1"


class EntityCategory(str, Enum):
    # report-context layer
    REPORT = "REPORT"
    AUTHOR = "AUTHOR"
    VENDOR = "VENDOR"
    # behavior layer (IOC kinds)
    FILENAME = "FILENAME"
    FILEPATH = "FILEPATH"
    IP = "IP"
    URL = "URL"
    DOMAIN = "DOMAIN"
    EMAIL = "EMAIL"
    REGISTRY = "REGISTRY"
    HASH_MD5 = "HASH_MD5"
    HASH_SHA1 = "HASH_SHA1"
    HASH_SHA256 = "HASH_SHA256"
    CVE = "CVE"
    # context layer
    MALWARE = "MALWARE"
    VULNERABILITY = "VULNERABILITY"
    THREAT_ACTOR = "THREAT_ACTOR"
    TECHNIQUE = "TECHNIQUE"
    SOFTWARE = "SOFTWARE"
    TOOL = "TOOL"
    MITIGATION = "MITIGATION"


IOC_CATEGORIES = frozenset({
    EntityCategory.FILENAME, EntityCategory.FILEPATH, EntityCategory.IP,
    EntityCategory.URL, EntityCategory.DOMAIN, EntityCategory.EMAIL,
    EntityCategory.REGISTRY, EntityCategory.HASH_MD5, EntityCategory.HASH_SHA1,
    EntityCategory.HASH_SHA256, EntityCategory.CVE,
})

CONTEXT_CATEGORIES = frozenset({
    EntityCategory.MALWARE, EntityCategory.VULNERABILITY,
    EntityCategory.THREAT_ACTOR, EntityCategory.TECHNIQUE,
    EntityCategory.SOFTWARE, EntityCategory.TOOL, EntityCategory.MITIGATION,
})


class RelationClass(str, Enum):
    USE = "USE"
    EXECUTE = "EXECUTE"
    ENABLE = "ENABLE"
    OWN = "OWN"
    INJECT = "INJECT"
    ALTER = "ALTER"
    GET = "GET"
    KEEP = "KEEP"
    SPREAD = "SPREAD"
    HIDE = "HIDE"
    RELATE = "RELATE"
    CREATE = "CREATE"
    UPDATE = "UPDATE"
    BREAK = "BREAK"
    FIND = "FIND"
    MITIGATE = "MITIGATE"
    AIM = "AIM"
    OTHER = "OTHER"
    # structural
    REPORTED_IN = "REPORTED_IN"
    HAS_ATTRIBUTE = "HAS_ATTRIBUTE"


VERB_CLASSES = tuple(
    c for c in RelationClass
    if c not in (RelationClass.OTHER, RelationClass.REPORTED_IN,
                 RelationClass.HAS_ATTRIBUTE)
)


class MentionSource(str, Enum):
    IOC_RULE = "IOC_RULE"
    TAGGER = "TAGGER"
    GAZETTEER = "GAZETTEER"
    PARSER_FIELD = "PARSER_FIELD"


class TripleOrigin(str, Enum):
    SVO = "SVO"
    CLASSIFIER = "CLASSIFIER"
    STRUCTURAL = "STRUCTURAL"


class Stage(str, Enum):
    RAW = "RAW"
    PARSED = "PARSED"
    CHECKED = "CHECKED"
    EXTRACTED = "EXTRACTED"


_STAGE_ORDER = [Stage.RAW, Stage.PARSED, Stage.CHECKED, Stage.EXTRACTED]


def stage_index(stage: Stage) -> int:
    return _STAGE_ORDER.index(stage)


class LexiconError(ValueError):
    """Raised when the verb lexicon file is malformed or inconsistent."""


class NameError_(ValueError):
    """Raised when a raw name normalizes to the empty string."""


@dataclass(frozen=True)
class EntityMention:
    surface: str
    category: EntityCategory
    sentence: int
    start: int
    end: int
    normalized: str
    confidence: float = 1.0
    source: MentionSource = MentionSource.IOC_RULE

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"mention span start {self.start} > end {self.end}")
        if not self.normalized:
            raise ValueError("mention normalized form is empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0,1]")


@dataclass(frozen=True)
class RelationTriple:
    subject: int           # index into UtkrDocument.entities
    object: int
    rel_class: RelationClass
    verb: Optional[str] = None
    step_order: Optional[int] = None
    confidence: float = 1.0
    origin: TripleOrigin = TripleOrigin.SVO

    def __post_init__(self):
        if (self.verb is not None) != (self.origin == TripleOrigin.SVO):
            raise ValueError("verb must be present iff origin is SVO")
        if self.step_order is not None and self.step_order < 1:
            raise ValueError("step_order must be positive")


@dataclass(frozen=True)
class Provenance:
    report_id: str
    source_id: str
    origin: str
    timestamp: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Provenance":
        return cls(d["report_id"], d["source_id"], d["origin"], d["timestamp"])


@dataclass(frozen=True)
class UtkrDocument:
    report_id: str
    source_id: str
    title: str = ""
    url: str = ""
    authors: tuple[str, ...] = ()
    published: Optional[datetime.date] = None
    text_blocks: tuple[str, ...] = ()
    structured_fields: dict = field(default_factory=dict)
    sentences: tuple[tuple[str, ...], ...] = ()
    entities: tuple[EntityMention, ...] = ()
    relations: tuple[RelationTriple, ...] = ()
    relevance: Optional[tuple[float, bool]] = None  # (probability, is_relevant)
    stage: Stage = Stage.RAW
    schema_version: str = SCHEMA_VERSION

    def advance(self, to: Stage, **changes) -> "UtkrDocument":
        """Return an enriched copy at a later stage; stages never regress."""
        if stage_index(to) < stage_index(self.stage):
            raise ValueError(f"stage cannot regress {self.stage.value} -> {to.value}")
        return dataclasses.replace(self, stage=to, **changes)

    def body_text(self) -> str:
        return "\n".join(self.text_blocks)


# ---------------------------------------------------------------------------
# Verb lexicon

class VerbLexicon:
    """Maps indicator verbs (and verb phrases) to their relation class.

    Loaded from a tab-separated table: ``CLASS<TAB>verb1,verb2,...``.
    A verb appearing under two classes is a load-time error.
    """

    def __init__(self, by_verb: dict[str, RelationClass]):
        self._by_verb = dict(by_verb)

    @classmethod
    def from_text(cls, text: str) -> "VerbLexicon":
        by_verb: dict[str, RelationClass] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                cls_name, verbs = line.split("\t", 1)
            except ValueError:
                raise LexiconError(f"line {lineno}: expected CLASS<TAB>verbs")
            try:
                rel = RelationClass(cls_name.strip().upper())
            except ValueError:
                raise LexiconError(f"line {lineno}: unknown class {cls_name!r}")
            if rel not in VERB_CLASSES:
                raise LexiconError(f"line {lineno}: {rel.value} cannot carry verbs")
            for verb in verbs.split(","):
                verb = verb.strip().lower()
                if not verb:
                    continue
                if verb in by_verb and by_verb[verb] is not rel:
                    raise LexiconError(
                        f"verb {verb!r} listed under both "
                        f"{by_verb[verb].value} and {rel.value}")
                by_verb[verb] = rel
        missing = [c.value for c in VERB_CLASSES
                   if c not in set(by_verb.values())]
        if missing:
            raise LexiconError(f"classes without indicator verbs: {missing}")
        return cls(by_verb)

    @classmethod
    def from_file(cls, path) -> "VerbLexicon":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    @classmethod
    def default(cls) -> "VerbLexicon":
        text = resources.files("ctikg.data").joinpath("verbs.tsv").read_text("utf-8")
        return cls.from_text(text)

    def __contains__(self, verb: str) -> bool:
        return verb in self._by_verb

    def classes(self) -> dict[str, RelationClass]:
        return dict(self._by_verb)

    def verbs_of(self, rel: RelationClass) -> list[str]:
        return sorted(v for v, c in self._by_verb.items() if c is rel)

    def lemmatize(self, token: str) -> str:
        """Suffix-stripping lemmatizer guided by the closed lexicon.

        Tries candidate stems in a fixed order and returns the first one
        present in the lexicon, else the lowercased token unchanged.
        """
        t = token.lower()
        if t in self._by_verb:
            return t
        for cand in _stem_candidates(t):
            if cand in self._by_verb:
                return cand
        return t

    def class_of(self, verb: str) -> Optional[RelationClass]:
        """Relation class for a (possibly inflected) verb, or None."""
        return self._by_verb.get(self.lemmatize(verb))


def _stem_candidates(t: str):
    # plain s / es
    if t.endswith("s") and not t.endswith("ss"):
        yield t[:-1]
        if t.endswith("es"):
            yield t[:-2]
    # past tense
    if t.endswith("ied") and len(t) > 4:
        yield t[:-3] + "y"          # "carried" -> "carry"
    if t.endswith("ed") and len(t) > 3:
        yield t[:-2]
        yield t[:-2] + "e"          # "used" -> "use"
        if len(t) > 4 and t[-3] == t[-4]:
            yield t[:-3]            # "dropped" -> "drop"
        yield t[:-1]                # "shared" -> "share" via d-strip
    # gerund
    if t.endswith("ing") and len(t) > 4:
        yield t[:-3]
        yield t[:-3] + "e"          # "hiding" -> "hide"
        if len(t) > 5 and t[-4] == t[-5]:
            yield t[:-4]            # "running" -> "run"


def relation_class_of_verb(verb: str, lexicon: VerbLexicon) -> Optional[RelationClass]:
    """Total function: class of the lemmatized verb, or None when unknown."""
    return lexicon.class_of(verb)


# ---------------------------------------------------------------------------
# Canonical names

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def canonical_name(category: EntityCategory, raw: str) -> str:
    """Canonical form used for graph-node identity and fusion.

    Context entities lose everything but letters/digits ("Z-Quest" and
    "ZQuest" collide on purpose); IOC kinds get defang reversal + case
    normalization instead, since punctuation is meaningful there.
    """
    if not raw:
        raise NameError_("empty raw name")
    if category in IOC_CATEGORIES:
        from .entities import normalize_ioc  # deferred: entities imports model
        out = normalize_ioc(raw, category)
    else:
        out = _NON_ALNUM.sub("", raw.lower())
    if not out:
        raise NameError_(f"name {raw!r} is empty after normalization")
    return out


# ---------------------------------------------------------------------------
# UTKR validation + JSON serialization

def validate_utkr(doc: UtkrDocument) -> list[str]:
    """Return a list of invariant violations (empty when well-formed)."""
    violations = []
    if not doc.report_id:
        violations.append("report_id: must be non-empty")
    for i, ent in enumerate(doc.entities):
        if ent.start > ent.end:
            violations.append(f"entities[{i}].span: start > end")
        if doc.sentences and ent.sentence >= len(doc.sentences):
            violations.append(f"entities[{i}].sentence: index out of range")
    n = len(doc.entities)
    for i, rel in enumerate(doc.relations):
        for side, idx in (("subject", rel.subject), ("object", rel.object)):
            if not 0 <= idx < n:
                violations.append(f"relations[{i}].{side}: dangling entity ref {idx}")
    if stage_index(doc.stage) < stage_index(Stage.EXTRACTED):
        parser_only = all(e.source is MentionSource.PARSER_FIELD for e in doc.entities)
        if doc.entities and not parser_only:
            violations.append("entities: non-parser entities before EXTRACTED stage")
        if doc.relations:
            violations.append("relations: present before EXTRACTED stage")
    if doc.relevance is not None:
        p = doc.relevance[0]
        if not 0.0 <= p <= 1.0:
            violations.append("relevance: probability outside [0,1]")
    return violations


def mention_to_json(m: EntityMention) -> dict:
    return {
        "surface": m.surface, "category": m.category.value,
        "span": [m.sentence, m.start, m.end],
        "normalized": m.normalized, "confidence": m.confidence,
        "source": m.source.value,
    }


def mention_from_json(d: dict) -> EntityMention:
    s, a, b = d["span"]
    return EntityMention(
        surface=d["surface"], category=EntityCategory(d["category"]),
        sentence=s, start=a, end=b, normalized=d["normalized"],
        confidence=d["confidence"], source=MentionSource(d["source"]))


def triple_to_json(t: RelationTriple) -> dict:
    return {
        "subject": t.subject, "object": t.object, "class": t.rel_class.value,
        "verb": t.verb, "step_order": t.step_order,
        "confidence": t.confidence, "origin": t.origin.value,
    }


def triple_from_json(d: dict) -> RelationTriple:
    return RelationTriple(
        subject=d["subject"], object=d["object"],
        rel_class=RelationClass(d["class"]), verb=d.get("verb"),
        step_order=d.get("step_order"), confidence=d["confidence"],
        origin=TripleOrigin(d["origin"]))


def utkr_to_json(doc: UtkrDocument) -> dict:
    return {
        "report_id": doc.report_id,
        "source_id": doc.source_id,
        "title": doc.title,
        "url": doc.url,
        "authors": list(doc.authors),
        "published": doc.published.isoformat() if doc.published else None,
        "text_blocks": list(doc.text_blocks),
        "structured_fields": dict(doc.structured_fields),
        "sentences": [list(s) for s in doc.sentences],
        "entities": [mention_to_json(m) for m in doc.entities],
        "relations": [triple_to_json(t) for t in doc.relations],
        "relevance": list(doc.relevance) if doc.relevance else None,
        "stage": doc.stage.value,
        "schema_version": doc.schema_version,
    }


class SchemaVersionError(ValueError):
    pass


def utkr_from_json(d: dict) -> UtkrDocument:
    version = d.get("schema_version", SCHEMA_VERSION)
    if version.split(".")[0] != _ACCEPTED_MAJOR:
        raise SchemaVersionError(f"unsupported schema major version in {version!r}")
    rel = d.get("relevance")
    return UtkrDocument(
        report_id=d["report_id"],
        source_id=d["source_id"],
        title=d.get("title", ""),
        url=d.get("url", ""),
        authors=tuple(d.get("authors", ())),
        published=(datetime.date.fromisoformat(d["published"])
                   if d.get("published") else None),
        text_blocks=tuple(d.get("text_blocks", ())),
        structured_fields=dict(d.get("structured_fields", {})),
        sentences=tuple(tuple(s) for s in d.get("sentences", ())),
        entities=tuple(mention_from_json(m) for m in d.get("entities", ())),
        relations=tuple(triple_from_json(t) for t in d.get("relations", ())),
        relevance=(rel[0], bool(rel[1])) if rel else None,
        stage=Stage(d.get("stage", "RAW")),
        schema_version=version,
    )


def dump_utkr(doc: UtkrDocument) -> str:
    return json.dumps(utkr_to_json(doc), ensure_ascii=False, indent=None)


def load_utkr(text: str) -> UtkrDocument:
    return utkr_from_json(json.loads(text))
