"""Entity extraction: IOC regex rules, placeholder substitution, a
transition-constrained sequence tagger (averaged perceptron + Viterbi),
gazetteer matching, and heuristic coreference resolution.
"""
from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .model import (
    EntityCategory, EntityMention, MentionSource, UtkrDocument,
)
from .parsing import segment_sentences_offsets

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# IOC rules


@dataclass(frozen=True)
class IocRule:
    category: EntityCategory
    pattern: re.Pattern
    priority: int


def load_ioc_rules(text: str) -> list[IocRule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            cat, prio, pattern = line.split("\t", 2)
        except ValueError:
            raise ValueError(f"ioc rules line {lineno}: expected 3 tab fields")
        rules.append(IocRule(EntityCategory(cat.strip()),
                             re.compile(pattern), int(prio)))
    return rules


def default_ioc_rules() -> list[IocRule]:
    text = resources.files("ctikg.data").joinpath("ioc_rules.tsv").read_text("utf-8")
    return load_ioc_rules(text)


_DEFANG = [
    ("hxxp", "http"), ("hXXp", "http"), ("HXXP", "HTTP"),
    ("[.]", "."), ("(.)", "."), ("{.}", "."),
    ("[at]", "@"), ("[@]", "@"),
    ("[:]", ":"),
]

_HASH_CATS = {EntityCategory.HASH_MD5, EntityCategory.HASH_SHA1,
              EntityCategory.HASH_SHA256}


def normalize_ioc(raw: str, category: EntityCategory) -> str:
    """Reverse defanging and normalize case where case is not significant."""
    out = raw
    for a, b in _DEFANG:
        out = out.replace(a, b)
    if category in _HASH_CATS:
        return out.lower()
    if category in (EntityCategory.IP, EntityCategory.DOMAIN):
        return out.lower()
    if category is EntityCategory.EMAIL:
        return out.lower()
    if category is EntityCategory.CVE:
        return out.upper()
    if category is EntityCategory.URL:
        m = re.match(r"(?i)([a-z][a-z0-9+.-]*://)([^/]*)(.*)", out, re.DOTALL)
        if m:
            return m.group(1).lower() + m.group(2).lower() + m.group(3)
        return out
    return out


def extract_iocs(text: str,
                 rules: Optional[list[IocRule]] = None) -> list[EntityMention]:
    """Rule-based IOC extraction over one text block.

    Spans are character offsets (sentence index -1) since this runs before
    segmentation. Overlaps resolve by priority, then leftmost-longest.
    """
    if rules is None:
        rules = default_ioc_rules()
    matches: list[tuple[int, int, int, EntityCategory]] = []
    for rule in rules:
        for m in rule.pattern.finditer(text):
            matches.append((rule.priority, m.start(), m.end(), rule.category))
    matches.sort(key=lambda t: (-t[0], t[1], -(t[2] - t[1])))
    taken: list[tuple[int, int]] = []
    out = []
    for prio, a, b, cat in matches:
        if any(a < tb and ta < b for ta, tb in taken):
            continue
        taken.append((a, b))
        surface = text[a:b]
        out.append(EntityMention(
            surface=surface, category=cat, sentence=-1, start=a, end=b,
            normalized=normalize_ioc(surface, cat),
            confidence=1.0, source=MentionSource.IOC_RULE))
    out.sort(key=lambda m: m.start)
    return out


# ---------------------------------------------------------------------------
# Placeholder substitution

PLACEHOLDER = {
    EntityCategory.FILENAME: "FILE",
    EntityCategory.FILEPATH: "FILE",
    EntityCategory.IP: "ADDRESS",
    EntityCategory.URL: "SITE",
    EntityCategory.DOMAIN: "SITE",
    EntityCategory.REGISTRY: "REGISTRY",
    EntityCategory.HASH_MD5: "HASH",
    EntityCategory.HASH_SHA1: "HASH",
    EntityCategory.HASH_SHA256: "HASH",
    EntityCategory.EMAIL: "EMAIL",
    EntityCategory.CVE: "FLAW",
}

PLACEHOLDER_WORDS = frozenset(PLACEHOLDER.values())


def substitute_placeholders(
        sentences: list[list[str]],
        ioc_mentions: Iterable[EntityMention],
) -> tuple[list[list[str]], dict[tuple[int, int], str]]:
    """Replace token-aligned IOC mentions with category placeholder words.

    Returns masked sentences and a (sentence, token) -> original map that
    ``restore_placeholders`` applies after tagging.
    """
    masked = [list(s) for s in sentences]
    mapping: dict[tuple[int, int], str] = {}
    for m in ioc_mentions:
        if m.category not in PLACEHOLDER:
            continue
        for pos in range(m.start, m.end + 1):
            key = (m.sentence, pos)
            if key in mapping:
                raise ValueError(f"overlapping IOC mentions at {key}")
            mapping[key] = masked[m.sentence][pos]
            masked[m.sentence][pos] = PLACEHOLDER[m.category]
    return masked, mapping


def restore_placeholders(masked: list[list[str]],
                         mapping: dict[tuple[int, int], str]) -> list[list[str]]:
    restored = [list(s) for s in masked]
    for (si, ti), original in mapping.items():
        restored[si][ti] = original
    return restored


# ---------------------------------------------------------------------------
# Sequence tagger

TAG_CATEGORY = {
    "BADACTOR": EntityCategory.THREAT_ACTOR,
    "MALWARE": EntityCategory.MALWARE,
    "MITIGATION": EntityCategory.MITIGATION,
    "SOFTWARE": EntityCategory.SOFTWARE,
    "TECHNIQUE": EntityCategory.TECHNIQUE,
    "TOOL": EntityCategory.TOOL,
    "VULNERABILITY": EntityCategory.VULNERABILITY,
}

CATEGORY_TAGNAME = {v: k for k, v in TAG_CATEGORY.items()}

# O first, then alphabetical: the fixed order also breaks score ties.
TAGS = (["O"]
        + sorted("B-" + n for n in TAG_CATEGORY)
        + sorted("I-" + n for n in TAG_CATEGORY))
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}

NEG_INF = float("-inf")


def transition_allowed(prev: str, tag: str) -> bool:
    if tag.startswith("I-"):
        base = tag[2:]
        return prev in (f"B-{base}", f"I-{base}")
    return True


def valid_bio(tags: list[str]) -> bool:
    prev = "O"
    for t in tags:
        if t not in TAG_INDEX:
            return False
        if not transition_allowed(prev, t):
            return False
        prev = t
    return True


def viterbi(emissions: list[list[float]],
            transitions: list[list[float]],
            start: Optional[list[float]] = None) -> tuple[list[int], float]:
    """Exact max-score path. emissions: [n][T]; transitions: [T][T].

    Ties break toward the lowest tag index (strict > comparison keeps the
    earliest candidate).
    """
    n = len(emissions)
    T = len(emissions[0])
    if start is None:
        start = [0.0] * T
    score = [start[t] + emissions[0][t] for t in range(T)]
    back: list[list[int]] = []
    for i in range(1, n):
        nxt = [NEG_INF] * T
        bp = [0] * T
        for t in range(T):
            best, arg = NEG_INF, 0
            for p in range(T):
                s = score[p] + transitions[p][t]
                if s > best:
                    best, arg = s, p
            nxt[t] = best + emissions[i][t]
            bp[t] = arg
        score = nxt
        back.append(bp)
    best, arg = NEG_INF, 0
    for t in range(T):
        if score[t] > best:
            best, arg = score[t], t
    path = [arg]
    for bp in reversed(back):
        path.append(bp[path[-1]])
    path.reverse()
    return path, best


def token_features(tokens: list[str], i: int) -> list[str]:
    w = tokens[i]
    lw = w.lower()
    feats = [
        f"w={lw}",
        f"p3={lw[:3]}",
        f"s3={lw[-3:]}",
        f"sh={_shape(w)}",
        f"pw={tokens[i-1].lower() if i > 0 else '<s>'}",
        f"nw={tokens[i+1].lower() if i + 1 < len(tokens) else '</s>'}",
    ]
    if w in PLACEHOLDER_WORDS:
        feats.append("ph=1")
    return feats


def _shape(w: str) -> str:
    out = []
    for ch in w:
        c = "X" if ch.isupper() else "x" if ch.islower() else \
            "d" if ch.isdigit() else ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


@dataclass
class TaggerModel:
    emission: dict = field(default_factory=dict)    # (feat, tag_idx) -> w
    transition: dict = field(default_factory=dict)  # (prev_idx, tag_idx) -> w
    template_version: str = "1"

    def emission_scores(self, tokens: list[str]) -> list[list[float]]:
        T = len(TAGS)
        rows = []
        for i in range(len(tokens)):
            feats = token_features(tokens, i)
            row = [0.0] * T
            for f in feats:
                for t in range(T):
                    w = self.emission.get((f, t))
                    if w:
                        row[t] += w
            rows.append(row)
        return rows

    def transition_matrix(self) -> list[list[float]]:
        T = len(TAGS)
        mat = [[0.0] * T for _ in range(T)]
        for p in range(T):
            for t in range(T):
                if not transition_allowed(TAGS[p], TAGS[t]):
                    mat[p][t] = NEG_INF
                else:
                    mat[p][t] = self.transition.get((p, t), 0.0)
        return mat

    def start_scores(self) -> list[float]:
        # sentence start behaves like a preceding O
        return [NEG_INF if TAGS[t].startswith("I-") else 0.0
                for t in range(len(TAGS))]

    def save(self, path) -> None:
        data = {
            "tags": TAGS,
            "template_version": self.template_version,
            "emission": [[f, t, w] for (f, t), w in self.emission.items()],
            "transition": [[p, t, w] for (p, t), w in self.transition.items()],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh)

    @classmethod
    def load(cls, path) -> "TaggerModel":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("tags") != TAGS:
            raise ValueError("tagger model tag set mismatch")
        return cls(
            emission={(f, t): w for f, t, w in data["emission"]},
            transition={(p, t): w for p, t, w in data["transition"]},
            template_version=data.get("template_version", "1"))


def tag_sequence(model: TaggerModel, tokens: list[str]) -> list[str]:
    if not tokens:
        raise ValueError("empty token list")
    path, _ = viterbi(model.emission_scores(tokens),
                      model.transition_matrix(), model.start_scores())
    return [TAGS[t] for t in path]


class BioFormatError(ValueError):
    pass


def train_tagger(labeled: list[tuple[list[str], list[str]]],
                 epochs: int = 5, seed: int = 0) -> TaggerModel:
    """Averaged structured perceptron over the sparse feature template."""
    for n, (tokens, tags) in enumerate(labeled):
        if len(tokens) != len(tags) or not valid_bio(tags):
            raise BioFormatError(f"invalid BIO labels in sentence {n}: {tags}")

    model = TaggerModel()
    em_acc: dict = {}
    tr_acc: dict = {}
    em_last: dict = {}
    tr_last: dict = {}
    step = 0
    rng = random.Random(seed)
    order = list(range(len(labeled)))

    def bump_em(key, delta):
        em_acc[key] = em_acc.get(key, 0.0) + \
            (step - em_last.get(key, 0)) * model.emission.get(key, 0.0)
        em_last[key] = step
        model.emission[key] = model.emission.get(key, 0.0) + delta

    def bump_tr(key, delta):
        tr_acc[key] = tr_acc.get(key, 0.0) + \
            (step - tr_last.get(key, 0)) * model.transition.get(key, 0.0)
        tr_last[key] = step
        model.transition[key] = model.transition.get(key, 0.0) + delta

    for _ in range(epochs):
        rng.shuffle(order)
        for idx in order:
            tokens, gold = labeled[idx]
            step += 1
            pred = tag_sequence(model, tokens)
            if pred == gold:
                continue
            for i in range(len(tokens)):
                if pred[i] == gold[i]:
                    continue
                for f in token_features(tokens, i):
                    bump_em((f, TAG_INDEX[gold[i]]), 1.0)
                    bump_em((f, TAG_INDEX[pred[i]]), -1.0)
            for i in range(1, len(tokens)):
                gk = (TAG_INDEX[gold[i - 1]], TAG_INDEX[gold[i]])
                pk = (TAG_INDEX[pred[i - 1]], TAG_INDEX[pred[i]])
                if gk != pk:
                    bump_tr(gk, 1.0)
                    bump_tr(pk, -1.0)

    total = max(step, 1)
    averaged = TaggerModel()
    for key, w in model.emission.items():
        acc = em_acc.get(key, 0.0) + (total - em_last.get(key, 0)) * w
        if acc:
            averaged.emission[key] = acc / total
    for key, w in model.transition.items():
        acc = tr_acc.get(key, 0.0) + (total - tr_last.get(key, 0)) * w
        if acc:
            averaged.transition[key] = acc / total
    return averaged


def load_conll(text: str) -> list[tuple[list[str], list[str]]]:
    """CoNLL-style token<TAB>tag lines, blank line between sentences."""
    sentences = []
    tokens: list[str] = []
    tags: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            if tokens:
                sentences.append((tokens, tags))
                tokens, tags = [], []
            continue
        tok, tag = line.rsplit("\t", 1)
        tokens.append(tok)
        tags.append(tag.strip())
    if tokens:
        sentences.append((tokens, tags))
    return sentences


def mentions_from_tags(tokens: list[str], tags: list[str],
                       sentence: int) -> list[EntityMention]:
    out = []
    i = 0
    while i < len(tags):
        if tags[i].startswith("B-"):
            base = tags[i][2:]
            j = i
            while j + 1 < len(tags) and tags[j + 1] == f"I-{base}":
                j += 1
            surface = " ".join(tokens[i:j + 1])
            cat = TAG_CATEGORY[base]
            from .model import canonical_name
            out.append(EntityMention(
                surface=surface, category=cat, sentence=sentence,
                start=i, end=j, normalized=canonical_name(cat, surface),
                confidence=1.0, source=MentionSource.TAGGER))
            i = j + 1
        else:
            i += 1
    return out


# ---------------------------------------------------------------------------
# Gazetteer

def load_gazetteer(paths_by_category: dict[EntityCategory, str]) -> dict[str, EntityCategory]:
    gaz: dict[str, EntityCategory] = {}
    for cat, path in paths_by_category.items():
        with open(path, encoding="utf-8") as f:
            for line in f:
                name = line.strip().lower()
                if name and not name.startswith("#"):
                    gaz[name] = cat
    return gaz


def default_gazetteer() -> dict[str, EntityCategory]:
    gaz: dict[str, EntityCategory] = {}
    base = resources.files("ctikg.data").joinpath("gazetteers")
    for entry in base.iterdir():
        if not entry.name.endswith(".txt"):
            continue
        cat = EntityCategory(entry.name[:-4].upper())
        for line in entry.read_text("utf-8").splitlines():
            name = line.strip().lower()
            if name and not name.startswith("#"):
                gaz[name] = cat
    return gaz


def gazetteer_match(tokens: list[str],
                    gazetteer: dict[str, EntityCategory],
                    sentence: int = 0) -> list[EntityMention]:
    """Longest-match, non-overlapping, case-insensitive phrase matching."""
    if not gazetteer:
        return []
    phrases = {tuple(name.split()): cat for name, cat in gazetteer.items()}
    max_len = max(len(p) for p in phrases)
    lower = [t.lower() for t in tokens]
    out = []
    i = 0
    while i < len(tokens):
        hit = None
        for L in range(min(max_len, len(tokens) - i), 0, -1):
            cat = phrases.get(tuple(lower[i:i + L]))
            if cat is not None:
                hit = (L, cat)
                break
        if hit:
            L, cat = hit
            surface = " ".join(tokens[i:i + L])
            from .model import canonical_name
            out.append(EntityMention(
                surface=surface, category=cat, sentence=sentence,
                start=i, end=i + L - 1,
                normalized=canonical_name(cat, surface),
                confidence=1.0, source=MentionSource.GAZETTEER))
            i += L
        else:
            i += 1
    return out


# ---------------------------------------------------------------------------
# Coreference

PRONOUNS = {"it", "this", "that", "they", "them", "its"}

CATEGORY_NOUNS = {
    "malware": (EntityCategory.MALWARE,),
    "trojan": (EntityCategory.MALWARE,),
    "ransomware": (EntityCategory.MALWARE,),
    "worm": (EntityCategory.MALWARE,),
    "backdoor": (EntityCategory.MALWARE,),
    "dropper": (EntityCategory.MALWARE, EntityCategory.FILENAME),
    "file": (EntityCategory.FILENAME, EntityCategory.FILEPATH),
    "actor": (EntityCategory.THREAT_ACTOR,),
    "group": (EntityCategory.THREAT_ACTOR,),
    "attacker": (EntityCategory.THREAT_ACTOR,),
    "tool": (EntityCategory.TOOL,),
    "technique": (EntityCategory.TECHNIQUE,),
    "vulnerability": (EntityCategory.VULNERABILITY,),
    "flaw": (EntityCategory.VULNERABILITY,),
    "software": (EntityCategory.SOFTWARE,),
    "application": (EntityCategory.SOFTWARE,),
}

_DETERMINERS = {"the", "this", "that"}

# categories a bare pronoun may refer to
_PRONOUN_CATS = frozenset(
    set(EntityCategory) - {EntityCategory.REPORT, EntityCategory.AUTHOR,
                           EntityCategory.VENDOR})

COREF_WINDOW = 2  # sentences


@dataclass(frozen=True)
class CorefLink:
    sentence: int
    start: int
    end: int
    surface: str
    antecedent: int  # index into doc.entities


def resolve_coreferences(doc: UtkrDocument) -> list[CorefLink]:
    """Link pronouns / determiner+category-noun phrases to the nearest
    preceding compatible entity mention within a 2-sentence window."""
    links = []
    occupied = {(e.sentence, i) for e in doc.entities
                for i in range(e.start, e.end + 1)}
    for si, sent in enumerate(doc.sentences):
        for ti, tok in enumerate(sent):
            if (si, ti) in occupied:
                continue
            lw = tok.lower()
            span_end = ti
            cats: Optional[tuple] = None
            surface = tok
            if lw in _DETERMINERS and ti + 1 < len(sent):
                noun = sent[ti + 1].lower()
                if noun in CATEGORY_NOUNS and (si, ti + 1) not in occupied:
                    cats = CATEGORY_NOUNS[noun]
                    span_end = ti + 1
                    surface = f"{tok} {sent[ti + 1]}"
            if cats is None and lw in PRONOUNS:
                cats = tuple(_PRONOUN_CATS)
            if cats is None:
                continue
            ante = _nearest_antecedent(doc, si, ti, cats)
            if ante is not None:
                links.append(CorefLink(si, ti, span_end, surface, ante))
    return links


def _nearest_antecedent(doc: UtkrDocument, si: int, ti: int,
                        cats: tuple) -> Optional[int]:
    best = None
    best_key = None
    for idx, e in enumerate(doc.entities):
        if e.category not in cats:
            continue
        if e.sentence > si or si - e.sentence > COREF_WINDOW:
            continue
        if e.sentence == si and e.end >= ti:
            continue
        key = (e.sentence, e.end)
        if best_key is None or key > best_key:
            best, best_key = idx, key
    return best


# ---------------------------------------------------------------------------
# Document-level wiring

def extract_document_entities(
        doc: UtkrDocument,
        rules: Optional[list[IocRule]] = None,
        gazetteer: Optional[dict[str, EntityCategory]] = None,
        tagger: Optional[TaggerModel] = None,
) -> tuple[tuple[tuple[str, ...], ...], tuple[EntityMention, ...]]:
    """Run the in-document entity pipeline: IOC regex -> segmentation ->
    placeholder substitution -> tagging/gazetteer -> restore.

    Returns (sentences, entities) with token-aligned spans; conflicts
    resolve IOC > gazetteer > tagger.
    """
    if rules is None:
        rules = default_ioc_rules()
    all_sentences: list[list[str]] = []
    ioc_mentions: list[EntityMention] = []

    for block in doc.text_blocks:
        char_iocs = extract_iocs(block, rules)
        spans = [(m.start, m.end) for m in char_iocs]
        sents = segment_sentences_offsets(block, spans)
        base = len(all_sentences)
        by_span = {(m.start, m.end): m for m in char_iocs}
        for si, sent in enumerate(sents):
            toks = [t for t, _, _ in sent]
            all_sentences.append(toks)
            for ti, (tok, a, b) in enumerate(sent):
                m = by_span.get((a, b))
                if m is not None:
                    ioc_mentions.append(EntityMention(
                        surface=m.surface, category=m.category,
                        sentence=base + si, start=ti, end=ti,
                        normalized=m.normalized, confidence=1.0,
                        source=MentionSource.IOC_RULE))

    masked, mapping = substitute_placeholders(all_sentences, ioc_mentions)

    entities: list[EntityMention] = list(ioc_mentions)
    occupied = {(e.sentence, i) for e in entities
                for i in range(e.start, e.end + 1)}

    def try_add(m: EntityMention):
        span = {(m.sentence, i) for i in range(m.start, m.end + 1)}
        if span & occupied:
            return
        occupied.update(span)
        entities.append(m)

    for si, toks in enumerate(all_sentences):
        for m in gazetteer_match(toks, gazetteer or {}, sentence=si):
            try_add(m)

    if tagger is not None:
        for si, toks in enumerate(masked):
            if not toks:
                continue
            tags = tag_sequence(tagger, toks)
            restored = all_sentences[si]
            for m in mentions_from_tags(restored, tags, si):
                try_add(m)

    entities.sort(key=lambda m: (m.sentence, m.start))
    return (tuple(tuple(s) for s in all_sentences), tuple(entities))
