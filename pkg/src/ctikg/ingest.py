"""Report collection: polite incremental HTTP listing crawls, local corpus
directories, multi-page aggregation, and a periodic supervisor.
"""
from __future__ import annotations

import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional
from urllib import robotparser
from urllib.parse import urljoin, urlsplit

import requests

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 4


class SourceError(Exception):
    """A whole-source failure; other sources are unaffected."""


@dataclass(frozen=True)
class FetchPolicy:
    min_delay_ms: int = 500
    max_retries: int = 2
    timeout_ms: int = 10000

    def __post_init__(self):
        if self.min_delay_ms < 0 or self.max_retries < 0:
            raise ValueError("fetch policy values must be non-negative")


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    kind: str                            # HTTP_LISTING | LOCAL_DIR
    location: str                        # listing URL or directory path
    item_selector: str = r'href="([^"]+)"'   # regex, group 1 = report link
    next_link: Optional[str] = None      # regex for the next listing page
    max_pages: int = 1
    policy: FetchPolicy = field(default_factory=FetchPolicy)
    schedule_period_s: float = 3600.0


@dataclass(frozen=True)
class RawDocument:
    report_id: str
    source_id: str
    url: str
    fetched_at: float
    media_kind: str                      # HTML | TEXT
    body: bytes
    page_index: Optional[int] = None

    def __post_init__(self):
        if not self.body:
            raise ValueError("raw document body is empty")


def canonical_report_id(url: str) -> str:
    """Stable id across re-crawls: lowercased scheme/host + path, no query."""
    parts = urlsplit(url)
    return f"{parts.netloc.lower()}{parts.path}".rstrip("/")


class SeenSet:
    """Thread-safe id set with atomic check-and-insert."""

    def __init__(self, ids=()):
        self._ids = set(ids)
        self._lock = threading.Lock()

    def check_and_insert(self, report_id: str) -> bool:
        """True when the id was new."""
        with self._lock:
            if report_id in self._ids:
                return False
            self._ids.add(report_id)
            return True

    def __contains__(self, report_id: str) -> bool:
        with self._lock:
            return report_id in self._ids

    def __len__(self):
        with self._lock:
            return len(self._ids)

    def snapshot(self) -> set:
        with self._lock:
            return set(self._ids)


class _HostThrottle:
    def __init__(self, min_delay_ms: int):
        self.min_delay = min_delay_ms / 1000.0
        self._last: dict[str, float] = {}

    def wait(self, host: str):
        last = self._last.get(host)
        if last is not None:
            remaining = self.min_delay - (time.monotonic() - last)
            if remaining > 0:
                time.sleep(remaining)
        self._last[host] = time.monotonic()


def _fetch_with_retries(session, url: str, policy: FetchPolicy,
                        throttle: _HostThrottle) -> requests.Response:
    host = urlsplit(url).netloc
    delay = 0.25
    last_exc = None
    for attempt in range(policy.max_retries + 1):
        throttle.wait(host)
        try:
            resp = session.get(url, timeout=policy.timeout_ms / 1000.0)
            if resp.status_code >= 500:
                raise requests.HTTPError(f"HTTP {resp.status_code}",
                                         response=resp)
            return resp
        except (requests.ConnectionError, requests.Timeout,
                requests.HTTPError) as e:
            last_exc = e
            if attempt < policy.max_retries:
                time.sleep(delay)
                delay *= 2
    raise last_exc


def _robots_for(session, base_url: str,
                cache: dict) -> Optional[robotparser.RobotFileParser]:
    parts = urlsplit(base_url)
    key = f"{parts.scheme}://{parts.netloc}"
    if key in cache:
        return cache[key]
    rp = robotparser.RobotFileParser()
    try:
        resp = session.get(f"{key}/robots.txt", timeout=5)
        if resp.status_code == 200:
            rp.parse(resp.text.splitlines())
        else:
            rp = None
    except requests.RequestException:
        rp = None
    cache[key] = rp
    return rp


def fetch_source(cfg: SourceConfig, seen: SeenSet,
                 session: Optional[requests.Session] = None,
                 ) -> list[RawDocument]:
    """Collect new documents for one source (incremental via `seen`)."""
    if cfg.kind == "LOCAL_DIR":
        docs = []
        for doc in load_corpus(cfg.location, cfg.source_id):
            if seen.check_and_insert(doc.report_id):
                docs.append(doc)
        return docs
    if cfg.kind != "HTTP_LISTING":
        raise SourceError(f"{cfg.source_id}: unknown source kind {cfg.kind}")

    own_session = session is None
    session = session or requests.Session()
    throttle = _HostThrottle(cfg.policy.min_delay_ms)
    robots_cache: dict = {}
    try:
        links: list[str] = []
        page_url = cfg.location
        pattern = re.compile(cfg.item_selector)
        for _ in range(max(cfg.max_pages, 1)):
            try:
                resp = _fetch_with_retries(session, page_url, cfg.policy,
                                           throttle)
            except requests.RequestException as e:
                raise SourceError(
                    f"{cfg.source_id}: listing {page_url} unreachable: {e}")
            markup = resp.text
            for m in pattern.finditer(markup):
                links.append(urljoin(page_url, m.group(1)))
            if not cfg.next_link:
                break
            nxt = re.search(cfg.next_link, markup)
            if not nxt:
                break
            page_url = urljoin(page_url, nxt.group(1))

        docs = []
        for link in links:
            report_id = canonical_report_id(link)
            if report_id in seen:
                continue
            rp = _robots_for(session, link, robots_cache)
            if rp is not None and not rp.can_fetch("*", link):
                log.warning("%s: robots.txt disallows %s", cfg.source_id, link)
                continue
            try:
                resp = _fetch_with_retries(session, link, cfg.policy, throttle)
            except requests.RequestException as e:
                log.warning("%s: skipping %s: %s", cfg.source_id, link, e)
                continue
            if resp.status_code != 200 or not resp.content:
                log.warning("%s: skipping %s: HTTP %s", cfg.source_id, link,
                            resp.status_code)
                continue
            ctype = resp.headers.get("content-type", "")
            media = "HTML" if "html" in ctype else "TEXT"
            seen.check_and_insert(report_id)
            docs.append(RawDocument(
                report_id=report_id, source_id=cfg.source_id, url=link,
                fetched_at=time.time(), media_kind=media, body=resp.content))
        return docs
    finally:
        if own_session:
            session.close()


def load_corpus(path, source_id: str) -> list[RawDocument]:
    """One RawDocument per readable .txt/.html file in a directory."""
    base = Path(path)
    if not base.is_dir():
        raise SourceError(f"{source_id}: corpus directory {path} missing")
    docs = []
    for entry in sorted(base.iterdir()):
        if not entry.is_file():
            continue
        kind = {"": None, ".txt": "TEXT", ".html": "HTML",
                ".htm": "HTML"}.get(entry.suffix.lower())
        if kind is None:
            continue
        try:
            body = entry.read_bytes()
        except OSError as e:
            log.warning("%s: unreadable file %s: %s", source_id, entry, e)
            continue
        if not body:
            log.warning("%s: empty file %s skipped", source_id, entry)
            continue
        docs.append(RawDocument(
            report_id=f"{source_id}/{entry.stem}", source_id=source_id,
            url=str(entry), fetched_at=time.time(), media_kind=kind,
            body=body))
    return docs


def aggregate_pages(pages: list[RawDocument]) -> RawDocument:
    """Concatenate the pages of one multi-page report by page_index."""
    if not pages:
        raise ValueError("no pages to aggregate")
    ids = {p.report_id for p in pages}
    if len(ids) != 1 or len({p.source_id for p in pages}) != 1:
        raise ValueError(f"mixed report ids in page set: {sorted(ids)}")
    indices = [p.page_index for p in pages]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate page_index values")
    ordered = sorted(pages, key=lambda p: (p.page_index is None,
                                           p.page_index))
    body = b"".join(p.body for p in ordered)
    first = ordered[0]
    return replace(first, body=body, page_index=None)


def save_raw(doc: RawDocument, root) -> Path:
    """Cache a fetched body under data/raw/<source_id>/<report_id>."""
    safe = re.sub(r"[^\w.\-]+", "_", doc.report_id)
    path = Path(root) / doc.source_id / safe
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(doc.body)
    return path


def fetch_all(configs: list[SourceConfig], seen: SeenSet,
              pool_size: int = DEFAULT_POOL_SIZE,
              session: Optional[requests.Session] = None,
              ) -> tuple[list[RawDocument], dict[str, str]]:
    """Fetch all sources concurrently; per-source failures are isolated."""
    docs: list[RawDocument] = []
    errors: dict[str, str] = {}
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        futures = {pool.submit(fetch_source, cfg, seen, session): cfg
                   for cfg in configs}
        for fut, cfg in futures.items():
            try:
                docs.extend(fut.result())
            except Exception as e:
                log.warning("source %s failed: %s", cfg.source_id, e)
                errors[cfg.source_id] = str(e)
    return docs, errors


class Supervisor:
    """Re-invokes each source every schedule period; a crashed source run is
    restarted at most once per period."""

    def __init__(self, configs: list[SourceConfig], seen: SeenSet,
                 pool_size: int = DEFAULT_POOL_SIZE):
        self.configs = configs
        self.seen = seen
        self.pool_size = pool_size

    def run_cycle(self) -> tuple[list[RawDocument], dict[str, str]]:
        docs, errors = fetch_all(self.configs, self.seen, self.pool_size)
        if errors:
            retry = [c for c in self.configs if c.source_id in errors]
            more, still = fetch_all(retry, self.seen, self.pool_size)
            docs.extend(more)
            errors = still
        return docs, errors

    def run(self, cycles: int = 1, sleep=time.sleep):
        all_docs = []
        for i in range(cycles):
            docs, _ = self.run_cycle()
            all_docs.extend(docs)
            if i + 1 < cycles:
                period = min(c.schedule_period_s for c in self.configs)
                sleep(period)
        return all_docs


def load_source_configs(path) -> list[SourceConfig]:
    """Sources file: TOML with one [[source]] block per source."""
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    configs = []
    ids = set()
    for row in data.get("source", []):
        sid = row["source_id"]
        if sid in ids:
            raise ValueError(f"duplicate source_id {sid!r}")
        ids.add(sid)
        policy = FetchPolicy(
            min_delay_ms=row.get("min_delay_ms", 500),
            max_retries=row.get("max_retries", 2),
            timeout_ms=row.get("timeout_ms", 10000))
        configs.append(SourceConfig(
            source_id=sid, kind=row["kind"], location=row["location"],
            item_selector=row.get("item_selector", r'href="([^"]+)"'),
            next_link=row.get("next_link"),
            max_pages=row.get("max_pages", 1),
            policy=policy,
            schedule_period_s=row.get("schedule_period_s", 3600.0)))
    return configs
