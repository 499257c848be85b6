"""Relation extraction: verb-lexicon SVO with passive voice and temporal
ordering, plus a multinomial log-linear classifier over hashed sparse
features for relations not expressed by verbs.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    EntityMention, RelationClass, RelationTriple, TripleOrigin, UtkrDocument,
    VerbLexicon, _stem_candidates,
)
from .entities import CorefLink

DEFAULT_WINDOW = 20          # max token gap between candidate mentions
DEFAULT_TAU = 0.5            # classifier emission threshold
SVO_CONFIDENCE = 0.9

FEATURE_BUCKETS = 1 << 16

CLASSES = [c for c in RelationClass
           if c not in (RelationClass.REPORTED_IN, RelationClass.HAS_ATTRIBUTE)]
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

ORDINAL_MARKERS = ("first", "second", "third", "then", "next", "finally",
                   "subsequently")

_PASSIVE_AUX = {"is", "was", "are", "were", "been", "being", "be"}

ALIAS_KEYWORDS = ("alias", "aka", "aliases")


@dataclass(frozen=True)
class CandidateMention:
    """A mention as seen by relation extraction: either a real entity or a
    coreference pronoun standing in for its antecedent."""
    entity_index: int        # identity (antecedent's for coref stand-ins)
    category: object         # EntityCategory
    start: int
    end: int


@dataclass(frozen=True)
class RelationCandidate:
    sentence: tuple[str, ...]
    subject: CandidateMention
    object: CandidateMention

    @property
    def middle(self) -> tuple[str, ...]:
        lo = min(self.subject.end, self.object.end) + 1
        hi = max(self.subject.start, self.object.start)
        return self.sentence[lo:hi]

    @property
    def left(self) -> tuple[str, ...]:
        return self.sentence[:min(self.subject.start, self.object.start)]

    @property
    def right(self) -> tuple[str, ...]:
        return self.sentence[max(self.subject.end, self.object.end) + 1:]


def candidate_pairs(sentence: tuple[str, ...],
                    mentions: list[CandidateMention],
                    window: int = DEFAULT_WINDOW) -> list[RelationCandidate]:
    """All ordered pairs of distinct-identity mentions within the gap window."""
    out = []
    for a in mentions:
        for b in mentions:
            if a is b or a.entity_index == b.entity_index:
                continue
            gap = max(a.start, b.start) - min(a.end, b.end) - 1
            if gap > window or gap < 0:
                continue
            out.append(RelationCandidate(tuple(sentence), a, b))
    return out


def sentence_mentions(doc: UtkrDocument, sentence_index: int,
                      coref: Optional[list[CorefLink]] = None,
                      ) -> list[CandidateMention]:
    """Mentions in one sentence, with coref pronouns carrying their
    antecedent's identity and category."""
    out = []
    for idx, e in enumerate(doc.entities):
        if e.sentence == sentence_index:
            out.append(CandidateMention(idx, e.category, e.start, e.end))
    for link in coref or []:
        if link.sentence == sentence_index:
            ante = doc.entities[link.antecedent]
            out.append(CandidateMention(link.antecedent, ante.category,
                                        link.start, link.end))
    out.sort(key=lambda m: m.start)
    return out


# ---------------------------------------------------------------------------
# SVO extraction

def extract_svo(cand: RelationCandidate,
                lexicon: VerbLexicon) -> Optional[RelationTriple]:
    """Nearest lexicon verb strictly between the mentions; passive markers
    around the verb swap subject and object."""
    left_m, right_m = cand.subject, cand.object
    if left_m.start > right_m.start:
        left_m, right_m = right_m, left_m
    lo = left_m.end + 1
    hi = right_m.start
    between = [t.lower() for t in cand.sentence[lo:hi]]
    hit = None
    classes = lexicon.classes()
    for i, tok in enumerate(between):
        # try bigram verb phrases first ("carry out", "look for"); the first
        # token may be inflected, so every candidate stem is tried
        if i + 1 < len(between):
            hit_phrase = None
            for stem in (tok, *_stem_candidates(tok)):
                phrase = f"{stem} {between[i + 1]}"
                if phrase in classes:
                    hit_phrase = (i, phrase, classes[phrase])
                    break
            if hit_phrase is not None:
                hit = hit_phrase
                break
        cls = lexicon.class_of(tok)
        if cls is not None:
            hit = (i, lexicon.lemmatize(tok), cls)
            break
    if hit is None:
        return None
    vi, verb, cls = hit
    passive = (vi > 0 and between[vi - 1] in _PASSIVE_AUX
               and "by" in between[vi + 1:vi + 3])
    subj, obj = (right_m, left_m) if passive else (left_m, right_m)
    return RelationTriple(
        subject=subj.entity_index, object=obj.entity_index, rel_class=cls,
        verb=verb, confidence=SVO_CONFIDENCE, origin=TripleOrigin.SVO)


def mark_temporal_order(sentence: tuple[str, ...],
                        triples: list[RelationTriple],
                        triple_positions: list[int],
                        ) -> list[RelationTriple]:
    """Assign 1-based segment indices from ordinal markers to SVO triples.

    ``triple_positions[i]`` is the verb token index of ``triples[i]`` in the
    sentence; sentences without markers leave step_order unset.
    """
    marker_pos = [i for i, t in enumerate(sentence)
                  if t.lower().rstrip(",") in ORDINAL_MARKERS]
    if not marker_pos:
        return list(triples)
    out = []
    for t, pos in zip(triples, triple_positions):
        segment = 1 + sum(1 for mp in marker_pos[1:] if mp <= pos)
        out.append(RelationTriple(
            subject=t.subject, object=t.object, rel_class=t.rel_class,
            verb=t.verb, step_order=segment, confidence=t.confidence,
            origin=t.origin))
    return out


# ---------------------------------------------------------------------------
# Feature hashing + classifier

def _bucket(feature: str) -> int:
    return zlib.crc32(feature.encode("utf-8")) % FEATURE_BUCKETS


def featurize_relation(cand: RelationCandidate,
                       lexicon: Optional[VerbLexicon] = None) -> dict[int, float]:
    """Hashed sparse features mirroring a piecewise left/middle/right split."""
    feats: dict[int, float] = {}

    def add(name: str, value: float = 1.0):
        feats[_bucket(name)] = feats.get(_bucket(name), 0.0) + value

    scat = getattr(cand.subject.category, "value", str(cand.subject.category))
    ocat = getattr(cand.object.category, "value", str(cand.object.category))
    add(f"SUBJ:{scat}")
    add(f"OBJ:{ocat}")
    add(f"PAIR:{scat}|{ocat}")

    for seg, toks in (("L", cand.left), ("M", cand.middle), ("R", cand.right)):
        for t in toks:
            add(f"{seg}:{t.lower()}")

    gap = len(cand.middle)
    add(f"GAP:{min(gap // 5, 4)}")

    middle_lower = [t.lower() for t in cand.middle]
    if lexicon is not None:
        for t in middle_lower:
            lemma = lexicon.lemmatize(t)
            if lemma in lexicon:
                add(f"VERB:{lemma}")
    for kw in ALIAS_KEYWORDS:
        if kw in middle_lower:
            add(f"ALIASKW:{kw}")
    add("BIAS")
    return feats


@dataclass
class RelationModel:
    weights: np.ndarray                  # [n_classes, FEATURE_BUCKETS]
    template_version: str = "1"
    tau: float = DEFAULT_TAU

    def probabilities(self, feats: dict[int, float]) -> np.ndarray:
        idx = np.fromiter(feats.keys(), dtype=np.int64, count=len(feats))
        val = np.fromiter(feats.values(), dtype=np.float64, count=len(feats))
        scores = self.weights[:, idx] @ val
        scores -= scores.max()
        p = np.exp(scores)
        return p / p.sum()

    def save(self, path) -> None:
        nz = np.nonzero(self.weights)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({
                "shape": list(self.weights.shape),
                "rows": nz[0].tolist(),
                "cols": nz[1].tolist(),
                "vals": self.weights[nz].tolist(),
                "template_version": self.template_version,
                "tau": self.tau,
                "classes": [c.value for c in CLASSES],
            }, f)

    @classmethod
    def load(cls, path) -> "RelationModel":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        if d["classes"] != [c.value for c in CLASSES]:
            raise ValueError("relation model class set mismatch")
        w = np.zeros(tuple(d["shape"]))
        w[d["rows"], d["cols"]] = d["vals"]
        return cls(weights=w, template_version=d.get("template_version", "1"),
                   tau=d.get("tau", DEFAULT_TAU))


def _loss_and_grad(weights: np.ndarray, X_idx, X_val, y, sample_w, l2):
    """Weighted cross-entropy + L2; X as per-row sparse (idx, val) lists."""
    n_classes, _ = weights.shape
    n = len(y)
    grad = l2 * weights
    loss = 0.5 * l2 * float((weights ** 2).sum())
    for i in range(n):
        idx, val = X_idx[i], X_val[i]
        scores = weights[:, idx] @ val
        scores -= scores.max()
        e = np.exp(scores)
        p = e / e.sum()
        loss -= sample_w[i] * float(np.log(max(p[y[i]], 1e-300)))
        delta = sample_w[i] * p
        delta[y[i]] -= sample_w[i]
        grad[:, idx] += np.outer(delta, val)
    return loss, grad


def train_relation_classifier(
        labeled: list[tuple[dict[int, float], RelationClass]],
        weights: Optional[list[float]] = None,
        epochs: int = 100, lr: float = 0.5, l2: float = 1e-4,
        seed: int = 0) -> RelationModel:
    """Batch gradient descent on weighted multinomial log-loss.

    Deterministic given the seed (which only fixes initialization; the
    descent itself is full-batch).
    """
    present = {cls for i, (_, cls) in enumerate(labeled)
               if weights is None or weights[i] != 0}
    if len(present) < 2:
        raise ValueError("training data must contain at least 2 classes")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1e-6, size=(len(CLASSES), FEATURE_BUCKETS))
    X_idx = [np.fromiter(f.keys(), dtype=np.int64, count=len(f))
             for f, _ in labeled]
    X_val = [np.fromiter(f.values(), dtype=np.float64, count=len(f))
             for f, _ in labeled]
    y = [CLASS_INDEX[cls] for _, cls in labeled]
    sw = np.asarray(weights if weights is not None else [1.0] * len(labeled))
    n_eff = max(float(sw.sum()), 1.0)
    for _ in range(epochs):
        _, grad = _loss_and_grad(W, X_idx, X_val, y, sw, l2)
        W -= (lr / n_eff) * grad
    return RelationModel(weights=W)


def classify_relation(model: RelationModel, cand: RelationCandidate,
                      lexicon: Optional[VerbLexicon] = None,
                      ) -> tuple[RelationClass, float]:
    p = model.probabilities(featurize_relation(cand, lexicon))
    i = int(np.argmax(p))
    return CLASSES[i], float(p[i])


def classifier_triple(model: RelationModel, cand: RelationCandidate,
                      lexicon: Optional[VerbLexicon] = None,
                      tau: Optional[float] = None) -> Optional[RelationTriple]:
    """Emit a CLASSIFIER triple only for confident non-OTHER predictions."""
    cls, conf = classify_relation(model, cand, lexicon)
    if cls is RelationClass.OTHER or conf < (model.tau if tau is None else tau):
        return None
    return RelationTriple(
        subject=cand.subject.entity_index, object=cand.object.entity_index,
        rel_class=cls, confidence=conf, origin=TripleOrigin.CLASSIFIER)


# ---------------------------------------------------------------------------
# Labeled-relation file format (JSONL)

def labeled_relation_json(cand: RelationCandidate,
                          rel_class: Optional[RelationClass],
                          weight: float = 1.0) -> dict:
    return {
        "tokens": list(cand.sentence),
        "subject": [cand.subject.start, cand.subject.end,
                    getattr(cand.subject.category, "value",
                            str(cand.subject.category))],
        "object": [cand.object.start, cand.object.end,
                   getattr(cand.object.category, "value",
                           str(cand.object.category))],
        "class": rel_class.value if rel_class else None,
        "weight": weight,
    }


def load_labeled_relations(path, require_class: bool = True,
                           ) -> list[tuple[RelationCandidate,
                                           Optional[RelationClass], float]]:
    from .model import EntityCategory
    rows = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            d = json.loads(line)
            if require_class and not d.get("class"):
                raise ValueError(f"{path}:{i + 1}: missing class label")
            ss, se, scat = d["subject"]
            os_, oe, ocat = d["object"]
            cand = RelationCandidate(
                sentence=tuple(d["tokens"]),
                subject=CandidateMention(0, EntityCategory(scat), ss, se),
                object=CandidateMention(1, EntityCategory(ocat), os_, oe))
            cls = RelationClass(d["class"]) if d.get("class") else None
            rows.append((cand, cls, float(d.get("weight", 1.0))))
    return rows


# ---------------------------------------------------------------------------
# Document-level wiring

def extract_document_relations(
        doc: UtkrDocument,
        lexicon: VerbLexicon,
        coref: Optional[list[CorefLink]] = None,
        model: Optional[RelationModel] = None,
        window: int = DEFAULT_WINDOW,
) -> tuple[RelationTriple, ...]:
    """SVO first; the classifier only sees pairs without an SVO triple.

    Each unordered identity pair yields at most one triple per origin.
    """
    triples: list[RelationTriple] = []
    seen_svo: set[frozenset] = set()
    seen_clf: set[frozenset] = set()
    for si, sent in enumerate(doc.sentences):
        mentions = sentence_mentions(doc, si, coref)
        cands = candidate_pairs(sent, mentions, window)
        sent_triples: list[RelationTriple] = []
        positions: list[int] = []
        for cand in cands:
            key = frozenset((cand.subject.entity_index, cand.object.entity_index))
            if key in seen_svo:
                continue
            svo = extract_svo(cand, lexicon)
            if svo is not None:
                seen_svo.add(key)
                lo = min(cand.subject.end, cand.object.end) + 1
                verb_pos = lo
                for j in range(lo, max(cand.subject.start, cand.object.start)):
                    if lexicon.class_of(sent[j]) is not None:
                        verb_pos = j
                        break
                sent_triples.append(svo)
                positions.append(verb_pos)
        sent_triples = mark_temporal_order(sent, sent_triples, positions)
        triples.extend(sent_triples)
        if model is not None:
            for cand in cands:
                key = frozenset((cand.subject.entity_index,
                                 cand.object.entity_index))
                if key in seen_svo or key in seen_clf:
                    continue
                t = classifier_triple(model, cand, lexicon)
                if t is not None:
                    seen_clf.add(key)
                    triples.append(t)
    return tuple(triples)
