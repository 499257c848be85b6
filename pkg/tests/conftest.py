import random

import pytest

from ctikg.kgraph import ThreatGraph
from ctikg.model import (
    EntityCategory, Provenance, RelationClass, Stage, UtkrDocument,
    VerbLexicon,
)


@pytest.fixture(scope="session")
def lexicon():
    return VerbLexicon.default()


@pytest.fixture(autouse=True)
def _isolated_parser_registry():
    """Parser registration is process-global; keep tests independent."""
    from ctikg.parsing import clear_registry
    clear_registry()
    yield
    clear_registry()


def make_prov(report="r1", source="s1", origin="test", ts="2024-01-01"):
    return Provenance(report, source, origin, ts)


@pytest.fixture
def fixture_graph():
    """Small hand-built graph used by query/search/QA tests."""
    g = ThreatGraph()
    prov = make_prov()

    def node(cat, name, display=None):
        n, _ = g.get_or_create(cat, name, display or name)
        return n

    actor = node(EntityCategory.THREAT_ACTOR, "cozyduke", "CozyDuke")
    tool1 = node(EntityCategory.TOOL, "mimikatz", "Mimikatz")
    tool2 = node(EntityCategory.TOOL, "psexec", "PsExec")
    tech = node(EntityCategory.TECHNIQUE, "spearphishingattachment",
                "Spearphishing Attachment")
    malware = node(EntityCategory.MALWARE, "lockbit", "LockBit")
    malware.add_attribute("type", "ransomware", prov)
    malware.add_attribute("platform", "Windows", prov)
    g.add_edge(actor.node_id, tool1.node_id, RelationClass.USE, prov, 0.9)
    g.add_edge(actor.node_id, tool2.node_id, RelationClass.USE, prov, 0.7)
    g.add_edge(actor.node_id, tech.node_id, RelationClass.USE, prov, 0.8)
    g.add_edge(malware.node_id, tech.node_id, RelationClass.RELATE, prov, 0.6)
    return g


def random_words(rng: random.Random, n: int, alphabet="abcdefghij"):
    return [
        "".join(rng.choice(alphabet) for _ in range(rng.randint(3, 8)))
        for _ in range(n)
    ]


def make_doc(**kwargs):
    defaults = dict(report_id="r1", source_id="s1", title="t",
                    stage=Stage.PARSED)
    defaults.update(kwargs)
    return UtkrDocument(**defaults)
