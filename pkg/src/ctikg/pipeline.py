"""Pipeline orchestration: crawl -> port -> parse -> check -> extract ->
upsert -> fuse, with on-disk UTKR hand-off between stages, per-stage
timings, and quarantine of failing documents.
"""
from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import entities, ingest, parsing, relations, relevance
from .kgraph import ThreatGraph, UpsertDelta
from .model import Stage, UtkrDocument, VerbLexicon, dump_utkr, load_utkr

log = logging.getLogger(__name__)

ALL_STAGES = ("crawl", "port", "parse", "check", "extract", "upsert", "fuse")

_KNOWN_KEYS = {
    "sources_file", "stages", "data_dir", "graph_path", "parsers_dir",
    "checker_model", "tagger_model", "relation_model", "keywords_file",
    "theta", "tau", "fuse_threshold", "window", "workers",
    "schedule_period_s",
}


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    graph_path: str = "data/graph.tkg"
    sources_file: Optional[str] = None
    parsers_dir: Optional[str] = None
    stages: tuple[str, ...] = ALL_STAGES
    checker_model: Optional[str] = None
    tagger_model: Optional[str] = None
    relation_model: Optional[str] = None
    keywords_file: Optional[str] = None
    theta: Optional[float] = None
    tau: Optional[float] = None
    fuse_threshold: float = 0.75
    window: int = relations.DEFAULT_WINDOW
    workers: int = 4
    schedule_period_s: float = 3600.0

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as f:
            data = tomllib.load(f)
        unknown = set(data) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: tuple(v) if k == "stages" else v
                     for k, v in data.items()})
        for key in ("sources_file", "parsers_dir", "checker_model",
                    "tagger_model", "relation_model", "keywords_file"):
            val = getattr(cfg, key)
            if val and not Path(val).exists():
                raise ConfigError(f"{key} refers to missing path {val!r}")
        bad = [s for s in cfg.stages if s not in ALL_STAGES]
        if bad:
            raise ConfigError(f"unknown stages: {bad}")
        return cfg


@dataclass
class RunStats:
    counts: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    quarantined: int = 0
    graph_delta: Optional[UpsertDelta] = None
    fusion: Optional[dict] = None

    def breakdown(self) -> dict[str, float]:
        total = sum(self.seconds.values()) or 1.0
        return {k: 100.0 * v / total for k, v in self.seconds.items()}

    def to_json(self) -> dict:
        return {
            "counts": self.counts,
            "seconds": self.seconds,
            "breakdown_percent": self.breakdown(),
            "quarantined": self.quarantined,
            "graph_delta": vars(self.graph_delta) if self.graph_delta else None,
            "fusion": ({"merged": len(self.fusion["merged"]),
                        "rejected": len(self.fusion["rejected"])}
                       if self.fusion else None),
        }


class Pipeline:
    """Holds loaded models/resources so repeated runs stay cheap."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.lexicon = VerbLexicon.default()
        self.rules = entities.default_ioc_rules()
        self.gazetteer = entities.default_gazetteer()
        self.keywords = relevance.load_keywords(config.keywords_file)
        self.checker = (relevance.CheckerModel.load(config.checker_model)
                        if config.checker_model else None)
        if self.checker and config.theta is not None:
            self.checker.theta = config.theta
        self.tagger = (entities.TaggerModel.load(config.tagger_model)
                       if config.tagger_model else None)
        self.relation_model = (
            relations.RelationModel.load(config.relation_model)
            if config.relation_model else None)
        if self.relation_model and config.tau is not None:
            self.relation_model.tau = config.tau
        if config.parsers_dir:
            for spec_file in sorted(Path(config.parsers_dir).glob("*.toml")):
                parsing.register_parser(parsing.load_parser_spec(spec_file))
        self.graph = (ThreatGraph.load(config.graph_path)
                      if Path(config.graph_path).exists() else ThreatGraph())

    # -- per-document stages ------------------------------------------------

    def parse(self, raw: ingest.RawDocument) -> UtkrDocument:
        return parsing.parse_document(raw)

    def check(self, doc: UtkrDocument) -> UtkrDocument:
        if self.checker is None:
            return doc.advance(Stage.CHECKED)
        verdict = relevance.predict_relevance(self.checker, doc,
                                              self.keywords, self.rules)
        return doc.advance(Stage.CHECKED, relevance=verdict)

    def extract(self, doc: UtkrDocument) -> UtkrDocument:
        sentences, ents = entities.extract_document_entities(
            doc, self.rules, self.gazetteer, self.tagger)
        staged = doc.advance(Stage.EXTRACTED, sentences=sentences,
                             entities=ents)
        coref = entities.resolve_coreferences(staged)
        triples = relations.extract_document_relations(
            staged, self.lexicon, coref, self.relation_model,
            self.config.window)
        return staged.advance(Stage.EXTRACTED, relations=triples)

    # -- full run -----------------------------------------------------------

    def run(self, raw_docs: Optional[list[ingest.RawDocument]] = None,
            seen: Optional[ingest.SeenSet] = None) -> RunStats:
        cfg = self.config
        stats = RunStats()
        data_dir = Path(cfg.data_dir)
        failed_dir = data_dir / "failed"
        utkr_dir = data_dir / "utkr"
        stages = set(cfg.stages)

        def timed(stage):
            class _T:
                def __enter__(innerself):
                    innerself.t0 = time.perf_counter()
                    return innerself

                def __exit__(innerself, *exc):
                    stats.seconds[stage] = stats.seconds.get(stage, 0.0) + \
                        time.perf_counter() - innerself.t0
            return _T()

        if raw_docs is None:
            raw_docs = []
            if "crawl" in stages and cfg.sources_file:
                with timed("crawl"):
                    configs = ingest.load_source_configs(cfg.sources_file)
                    if seen is None:
                        seen = ingest.SeenSet()
                    raw_docs, errors = ingest.fetch_all(configs, seen,
                                                        cfg.workers)
                    for doc in raw_docs:
                        ingest.save_raw(doc, data_dir / "raw")
                    stats.counts["crawl_errors"] = len(errors)
        stats.counts["crawl"] = len(raw_docs)

        with timed("port"):
            by_id: dict[str, list[ingest.RawDocument]] = {}
            for doc in raw_docs:
                by_id.setdefault(doc.report_id, []).append(doc)
            ported = []
            for report_id, pages in by_id.items():
                if len(pages) == 1 and pages[0].page_index is None:
                    ported.append(pages[0])
                else:
                    try:
                        ported.append(ingest.aggregate_pages(pages))
                    except ValueError as e:
                        self._quarantine(failed_dir, report_id, "port", e)
                        stats.quarantined += 1
        stats.counts["port"] = len(ported)

        parsed: list[UtkrDocument] = []
        if "parse" in stages:
            with timed("parse"):
                for raw in ported:
                    try:
                        doc = self.parse(raw)
                        parsed.append(doc)
                        self._write_utkr(utkr_dir / "parsed", doc)
                    except Exception as e:
                        self._quarantine(failed_dir, raw.report_id, "parse", e)
                        stats.quarantined += 1
        stats.counts["parse"] = len(parsed)

        checked: list[UtkrDocument] = []
        if "check" in stages:
            with timed("check"):
                for doc in parsed:
                    try:
                        out = self.check(doc)
                        checked.append(out)
                        self._write_utkr(utkr_dir / "checked", out)
                    except Exception as e:
                        self._quarantine(failed_dir, doc.report_id, "check", e)
                        stats.quarantined += 1
        else:
            checked = [d.advance(Stage.CHECKED) for d in parsed]
        stats.counts["check"] = len(checked)
        relevant = [d for d in checked
                    if d.relevance is None or d.relevance[1]]
        stats.counts["relevant"] = len(relevant)

        extracted: list[UtkrDocument] = []
        if "extract" in stages:
            with timed("extract"):
                for doc in relevant:
                    try:
                        out = self.extract(doc)
                        extracted.append(out)
                        self._write_utkr(utkr_dir / "extracted", out)
                    except Exception as e:
                        self._quarantine(failed_dir, doc.report_id,
                                         "extract", e)
                        stats.quarantined += 1
        stats.counts["extract"] = len(extracted)

        if "upsert" in stages:
            with timed("upsert"):
                total = UpsertDelta()
                for doc in extracted:
                    try:
                        delta = self.graph.upsert_from_utkr(doc)
                    except Exception as e:
                        self._quarantine(failed_dir, doc.report_id,
                                         "upsert", e)
                        stats.quarantined += 1
                        continue
                    total.nodes_added += delta.nodes_added
                    total.nodes_updated += delta.nodes_updated
                    total.edges_added += delta.edges_added
                    total.edges_updated += delta.edges_updated
                stats.graph_delta = total

        if "fuse" in stages:
            with timed("fuse"):
                stats.fusion = self.graph.fuse_entities(cfg.fuse_threshold)

        if "upsert" in stages or "fuse" in stages:
            Path(cfg.graph_path).parent.mkdir(parents=True, exist_ok=True)
            self.graph.save(cfg.graph_path)
        return stats

    @staticmethod
    def _write_utkr(directory: Path, doc: UtkrDocument):
        directory.mkdir(parents=True, exist_ok=True)
        safe = doc.report_id.replace("/", "_").replace("\\", "_")
        (directory / f"{safe}.json").write_text(dump_utkr(doc),
                                               encoding="utf-8")

    @staticmethod
    def _quarantine(failed_dir: Path, report_id: str, stage: str, exc):
        failed_dir.mkdir(parents=True, exist_ok=True)
        safe = report_id.replace("/", "_").replace("\\", "_")
        (failed_dir / f"{safe}.{stage}.json").write_text(json.dumps({
            "report_id": report_id,
            "stage": stage,
            "error": str(exc),
            "traceback": traceback.format_exc(),
        }), encoding="utf-8")
        log.warning("quarantined %s at stage %s: %s", report_id, stage, exc)


def run_pipeline(config: PipelineConfig, mode: str = "once",
                 cycles: int = 1, sleep=time.sleep) -> RunStats:
    """Run the whole pipeline once, or repeatedly per schedule period."""
    pipe = Pipeline(config)
    seen = ingest.SeenSet()
    if mode == "once":
        return pipe.run(seen=seen)
    stats = None
    for i in range(cycles):
        stats = pipe.run(seen=seen)
        if i + 1 < cycles:
            sleep(config.schedule_period_s)
    return stats


def load_stage_documents(data_dir, stage: str) -> list[UtkrDocument]:
    """Read the serialized UTKRs a previous run left for one stage."""
    directory = Path(data_dir) / "utkr" / stage
    docs = []
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            docs.append(load_utkr(path.read_text(encoding="utf-8")))
    return docs
