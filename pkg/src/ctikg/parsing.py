"""Source-specific report parsing and IOC-protected sentence segmentation.

HTML handling is a tolerant tag-soup reader on top of ``html.parser``; the
selector language is a small descendant-path subset of CSS (``tag``,
``.class``, ``#id``, ``tag.class``), which covers the fixture sources.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Optional

from .model import Stage, UtkrDocument

log = logging.getLogger(__name__)

# Sentence-final abbreviations that never end a sentence.
ABBREVIATIONS = {"e.g.", "i.e.", "vs.", "mr.", "mrs.", "dr.", "st.", "etc.",
                 "no.", "fig.", "cf."}

_DETACH = set(".,;:!?\"'()[]{}<>")


class ParseError(Exception):
    def __init__(self, source_id: str, report_id: str, message: str):
        super().__init__(f"[{source_id}/{report_id}] {message}")
        self.source_id = source_id
        self.report_id = report_id


@dataclass(frozen=True)
class ParserSpec:
    source_id: str
    title_selector: str = ""
    body_selectors: tuple[str, ...] = ()
    field_selectors: dict = field(default_factory=dict)
    author_selector: Optional[str] = None
    date_selector: Optional[str] = None


# ---------------------------------------------------------------------------
# Tolerant HTML tree

_VOID_TAGS = {"br", "hr", "img", "meta", "link", "input", "area", "base",
              "col", "embed", "source", "track", "wbr"}
_DROP_TAGS = {"script", "style", "nav", "header", "footer", "noscript"}
BLOCK_TAGS = {"p", "div", "h1", "h2", "h3", "h4", "h5", "h6", "li", "tr",
              "section", "article", "blockquote", "pre", "table", "ul", "ol",
              "br", "body", "html", "main", "aside", "dd", "dt"}


class HtmlNode:
    __slots__ = ("tag", "attrs", "children", "text")

    def __init__(self, tag: str, attrs: dict):
        self.tag = tag
        self.attrs = attrs
        self.children: list = []  # HtmlNode | str
        self.text = ""

    def classes(self) -> set[str]:
        return set(self.attrs.get("class", "").split())

    def iter(self):
        yield self
        for c in self.children:
            if isinstance(c, HtmlNode):
                yield from c.iter()

    def inner_text(self) -> str:
        parts = []
        for c in self.children:
            if isinstance(c, str):
                parts.append(c)
            else:
                parts.append(c.inner_text())
        return "".join(parts)

    def text_blocks(self) -> list[str]:
        """Flatten to text blocks, breaking at block-level descendants."""
        blocks: list[str] = []
        buf: list[str] = []

        def flush():
            text = re.sub(r"\s+", " ", "".join(buf)).strip()
            if text:
                blocks.append(text)
            buf.clear()

        def walk(node: HtmlNode):
            for c in node.children:
                if isinstance(c, str):
                    buf.append(c)
                elif c.tag in BLOCK_TAGS:
                    flush()
                    walk(c)
                    flush()
                else:
                    walk(c)

        walk(self)
        flush()
        return blocks


class _TreeBuilder(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.root = HtmlNode("#root", {})
        self.stack = [self.root]
        self._dropping = 0

    def handle_starttag(self, tag, attrs):
        if tag in _DROP_TAGS:
            self._dropping += 1
            return
        if self._dropping:
            return
        node = HtmlNode(tag, dict(attrs))
        self.stack[-1].children.append(node)
        if tag not in _VOID_TAGS:
            self.stack.append(node)

    def handle_endtag(self, tag):
        if tag in _DROP_TAGS:
            self._dropping = max(0, self._dropping - 1)
            return
        if self._dropping:
            return
        # tolerant close: pop back to the nearest matching open tag
        for i in range(len(self.stack) - 1, 0, -1):
            if self.stack[i].tag == tag:
                del self.stack[i:]
                break

    def handle_data(self, data):
        if not self._dropping and data:
            self.stack[-1].children.append(data)


def parse_html(markup: str) -> HtmlNode:
    builder = _TreeBuilder()
    builder.feed(markup)
    return builder.root


def _match_simple(node: HtmlNode, sel: str) -> bool:
    tag, cls, ident = None, None, None
    m = re.fullmatch(r"([a-zA-Z][\w-]*)?(?:\.([\w-]+))?(?:#([\w-]+))?", sel)
    if not m:
        return False
    tag, cls, ident = m.groups()
    if tag and node.tag != tag:
        return False
    if cls and cls not in node.classes():
        return False
    if ident and node.attrs.get("id") != ident:
        return False
    return True


def select(root: HtmlNode, selector: str) -> list[HtmlNode]:
    """Descendant-path selection: each path step narrows to descendants."""
    parts = selector.split()
    current = [root]
    for part in parts:
        nxt = []
        for node in current:
            for cand in node.iter():
                if cand is not node and _match_simple(cand, part):
                    nxt.append(cand)
        current = nxt
    return current


# ---------------------------------------------------------------------------
# Parser registry

_REGISTRY: dict[str, ParserSpec] = {}


def register_parser(spec: ParserSpec) -> None:
    if spec.source_id in _REGISTRY:
        log.warning("replacing parser spec for source %s", spec.source_id)
    _REGISTRY[spec.source_id] = spec


def registered_parser(source_id: str) -> Optional[ParserSpec]:
    return _REGISTRY.get(source_id)


def clear_registry() -> None:
    _REGISTRY.clear()


def load_parser_spec(path) -> ParserSpec:
    """Load a spec from a parsers/<source_id>.toml file."""
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    return ParserSpec(
        source_id=data["source_id"],
        title_selector=data.get("title", ""),
        body_selectors=tuple(data.get("body", ())),
        field_selectors=dict(data.get("fields", {})),
        author_selector=data.get("author"),
        date_selector=data.get("date"),
    )


# ---------------------------------------------------------------------------
# Parsing raw documents

def parse_document(raw, spec: Optional[ParserSpec] = None) -> UtkrDocument:
    """Convert a RawDocument into a stage-PARSED UtkrDocument."""
    if spec is None:
        spec = registered_parser(raw.source_id)
    if raw.media_kind == "TEXT" or spec is None:
        if raw.media_kind != "TEXT" and spec is None:
            log.warning("no parser registered for source %s; using TEXT fallback",
                        raw.source_id)
        return _parse_text(raw)
    if spec.source_id != raw.source_id:
        raise ParseError(raw.source_id, raw.report_id,
                         f"spec is for source {spec.source_id!r}")
    return _parse_html(raw, spec)


def _decode(body) -> str:
    if isinstance(body, str):
        return body
    return body.decode("utf-8", errors="replace")


def _parse_text(raw) -> UtkrDocument:
    text = _decode(raw.body)
    lines = text.splitlines()
    title = ""
    rest_start = 0
    for i, line in enumerate(lines):
        if line.strip():
            title = line.strip()
            rest_start = i + 1
            break
    body = "\n".join(lines[rest_start:]).strip()
    blocks = (body,) if body else ()
    return UtkrDocument(
        report_id=raw.report_id, source_id=raw.source_id,
        title=title, url=getattr(raw, "url", "") or "",
        text_blocks=blocks, stage=Stage.PARSED)


def _parse_html(raw, spec: ParserSpec) -> UtkrDocument:
    root = parse_html(_decode(raw.body))

    title = ""
    if spec.title_selector:
        hits = select(root, spec.title_selector)
        if hits:
            title = re.sub(r"\s+", " ", hits[0].inner_text()).strip()
    if not title:
        for sel in ("title", "h1"):
            hits = select(root, sel)
            if hits:
                title = re.sub(r"\s+", " ", hits[0].inner_text()).strip()
                break

    blocks: list[str] = []
    for sel in spec.body_selectors:
        for node in select(root, sel):
            blocks.extend(node.text_blocks())
    if not blocks:
        raise ParseError(raw.source_id, raw.report_id, "no body content matched")

    fields: dict[str, str] = {}
    for name, sel in spec.field_selectors.items():
        hits = select(root, sel)
        if hits:
            fields[name] = re.sub(r"\s+", " ", hits[0].inner_text()).strip()

    authors: tuple[str, ...] = ()
    if spec.author_selector:
        authors = tuple(
            re.sub(r"\s+", " ", n.inner_text()).strip()
            for n in select(root, spec.author_selector))

    return UtkrDocument(
        report_id=raw.report_id, source_id=raw.source_id,
        title=title, url=getattr(raw, "url", "") or "",
        authors=authors, text_blocks=tuple(blocks),
        structured_fields=fields, stage=Stage.PARSED)


# ---------------------------------------------------------------------------
# Sentence segmentation / tokenization with IOC span protection


def _protected(pos: int, spans: list[tuple[int, int]]) -> Optional[tuple[int, int]]:
    for a, b in spans:
        if a <= pos < b:
            return (a, b)
    return None


def segment_sentences_offsets(
        block: str,
        ioc_spans: Optional[list[tuple[int, int]]] = None,
) -> list[list[tuple[str, int, int]]]:
    """Segment + tokenize; tokens carry (text, start, end) char offsets.

    Characters inside an IOC span never split: an IOC is exactly one token
    and never ends a sentence mid-span.
    """
    spans = sorted(ioc_spans or [])
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        if a2 < b1:
            raise ValueError("overlapping IOC spans")

    # 1. sentence boundary positions (index AFTER the final punctuation)
    boundaries = []
    n = len(block)
    for i, ch in enumerate(block):
        if ch not in ".!?":
            continue
        if _protected(i, spans):
            continue
        j = i + 1
        while j < n and block[j].isspace():
            j += 1
        if j == i + 1 and j < n:
            continue  # no whitespace after punctuation
        if j < n and not (block[j].isupper() or block[j].isdigit()):
            continue
        # abbreviation suppression: the word ending at i
        k = i
        while k > 0 and not block[k - 1].isspace():
            k -= 1
        word = block[k:i + 1].lower()
        if word in ABBREVIATIONS:
            continue
        boundaries.append(i + 1)
    boundaries.append(n)

    sentences: list[list[tuple[str, int, int]]] = []
    start = 0
    for b in boundaries:
        toks = _tokenize(block, start, b, spans)
        if toks:
            sentences.append(toks)
        start = b
    return sentences


def _tokenize(block: str, lo: int, hi: int,
              spans: list[tuple[int, int]]) -> list[tuple[str, int, int]]:
    toks: list[tuple[str, int, int]] = []
    i = lo
    while i < hi:
        if block[i].isspace():
            i += 1
            continue
        span = _protected(i, spans)
        if span:
            a, b = span
            toks.append((block[a:b], a, b))
            i = b
            continue
        # run until whitespace or protected span start
        j = i
        while j < hi and not block[j].isspace() and not _protected(j, spans):
            j += 1
        _detach_token(block, i, j, toks)
        i = j
    return toks


def _detach_token(block: str, a: int, b: int, out: list):
    # peel leading punctuation
    while a < b and block[a] in _DETACH:
        out.append((block[a], a, a + 1))
        a += 1
    # find trailing punctuation run
    t = b
    while t > a and block[t - 1] in _DETACH:
        t -= 1
    core = block[a:t]
    # keep dotted abbreviations intact ("e.g." keeps its final dot)
    if core and t < b and block[t] == "." and (core + ".").lower() in ABBREVIATIONS:
        t += 1
        core = block[a:t]
    if core:
        out.append((core, a, t))
    for k in range(t, b):
        out.append((block[k], k, k + 1))


def segment_sentences(block: str,
                      ioc_spans: Optional[list[tuple[int, int]]] = None,
                      ) -> list[list[str]]:
    return [[t for t, _, _ in sent]
            for sent in segment_sentences_offsets(block, ioc_spans)]
