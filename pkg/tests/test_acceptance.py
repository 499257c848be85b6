"""Acceptance suite: one test (and one printed PASS line) per contract.

Each oracle here is computed independently of the implementation under
test (exhaustive enumeration, generative models with known parameters,
hand-built fixtures).
"""
import itertools
import math
import random
import re
import time
import zlib

import numpy as np
import pytest

from ctikg import relevance, weaksup
from ctikg.entities import viterbi
from ctikg.ingest import RawDocument
from ctikg.kgraph import ThreatGraph
from ctikg.model import (
    EntityCategory, Provenance, RelationClass, Stage, UtkrDocument,
    VerbLexicon,
)
from ctikg.pipeline import Pipeline, PipelineConfig
from ctikg.qa import answer, default_intent_model, load_intents
from ctikg.relations import (
    CLASSES, CandidateMention, RelationCandidate, featurize_relation,
    train_relation_classifier,
)


def _report(name, detail):
    print(f"[ACCEPTANCE] {name}: PASS ({detail})", flush=True)


# ---------------------------------------------------------------------------
# 1. Viterbi oracle

def _path_score(path, emissions, transitions):
    s = emissions[0][path[0]]
    for i in range(1, len(path)):
        s += transitions[path[i - 1]][path[i]] + emissions[i][path[i]]
    return s


def _enumerate_best(emissions, transitions):
    n, T = len(emissions), len(emissions[0])
    best, best_path = -math.inf, None
    for path in itertools.product(range(T), repeat=n):
        s = _path_score(path, emissions, transitions)
        if s > best:
            best, best_path = s, list(path)
    return best_path, best


def test_viterbi_oracle_1000_instances():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    for _ in range(1000):
        n = rng.randint(1, 6)
        T = rng.randint(2, 5)
        emissions = [[rng.uniform(-3, 3) for _ in range(T)]
                     for _ in range(n)]
        transitions = [[rng.uniform(-3, 3) for _ in range(T)]
                       for _ in range(T)]
        got_path, got_score = viterbi(emissions, transitions,
                                      [0.0] * T)
        want_path, want_score = _enumerate_best(emissions, transitions)
        assert got_path == want_path
        # exact equality, rescoring both paths with the same accumulator
        assert _path_score(got_path, emissions, transitions) == want_score
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    _report("viterbi-oracle", f"1000/1000 exact in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. Label-model recovery

def _votes_from_known_alphas(n_rows, alphas, classes, rng):
    votes = []
    while len(votes) < n_rows:
        true = rng.choice(classes)
        row = []
        for a in alphas:
            if rng.random() < 0.2:
                row.append(None)
            elif rng.random() < a:
                row.append(true)
            else:
                row.append(rng.choice([c for c in classes if c is not true]))
        if any(v is not None for v in row):
            votes.append(row)
    return weaksup.LabelMatrix(
        votes=votes, candidates=[object()] * len(votes),
        lf_names=[f"lf{j}" for j in range(len(alphas))], dropped=0)


def test_label_model_recovery():
    classes = [RelationClass.USE, RelationClass.GET, RelationClass.INJECT,
               RelationClass.HIDE]
    configs = [
        ([0.9, 0.7, 0.55], 11),
        ([0.85, 0.8, 0.65, 0.6], 12),
        ([0.9, 0.8, 0.7, 0.6, 0.55], 13),
    ]
    t0 = time.perf_counter()
    worst = 0.0
    for true_alphas, seed in configs:
        rng = random.Random(seed)
        matrix = _votes_from_known_alphas(2000, true_alphas, classes, rng)
        model = weaksup.fit_label_model(matrix, iterations=100)
        err = float(np.abs(model.alphas - np.asarray(true_alphas)).max())
        worst = max(worst, err)
        assert err < 0.05, f"alphas {model.alphas} vs {true_alphas}"
        lls = model.log_likelihoods
        assert all(b >= a - 1e-8 for a, b in zip(lls, lls[1:])), \
            "log-likelihood decreased"
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.2f}s"
    _report("label-model-recovery",
            f"3 matrices, max |alpha error| {worst:.3f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 3. Data-programming direction

_FILLER = ["the", "system", "observed", "host", "network", "activity",
           "daily", "report", "during", "operation"]


def _verb_corpus(lexicon, n, rng, verbs_by_class, noise=0.0):
    """(candidate, gold) rows: 'SubjN <verb> ObjN filler...'."""
    classes = sorted(verbs_by_class, key=lambda c: c.value)
    rows = []
    for i in range(n):
        cls = classes[i % len(classes)]
        verb = rng.choice(verbs_by_class[cls])
        toks = [f"Subj{rng.randint(0, 9999)}", verb,
                f"Obj{rng.randint(0, 9999)}"]
        toks += [rng.choice(_FILLER) for _ in range(rng.randint(2, 5))]
        cand = RelationCandidate(
            sentence=tuple(toks),
            subject=CandidateMention(0, EntityCategory.MALWARE, 0, 0),
            object=CandidateMention(1, EntityCategory.TOOL, 2, 2))
        gold = cls
        if noise and rng.random() < noise:
            gold = rng.choice([c for c in classes if c is not cls])
        rows.append((cand, gold))
    return rows


def _macro_f1(golds, preds, classes):
    scores = []
    for c in classes:
        tp = sum(1 for g, p in zip(golds, preds) if g is c and p is c)
        fp = sum(1 for g, p in zip(golds, preds) if g is not c and p is c)
        fn = sum(1 for g, p in zip(golds, preds) if g is c and p is not c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return 100.0 * sum(scores) / len(scores)


def _noisy_lf(accuracy, classes):
    def fn(cand):
        h = zlib.crc32(" ".join(cand.sentence).encode())
        r = random.Random(h)
        true = None
        for t in cand.sentence:
            cls = VerbLexicon.default().class_of(t)
            if cls is not None:
                true = cls
                break
        if true is None:
            return None
        if r.random() < accuracy:
            return true
        return r.choice([c for c in classes if c is not true])
    return weaksup.LabelingFunction("noisy-verb", fn,
                                    weaksup.LfKind.KEYWORD)


def test_data_programming_direction():
    lexicon = VerbLexicon.default()
    all_verbs = {}
    for cls in RelationClass:
        vs = [v for v in lexicon.verbs_of(cls) if " " not in v]
        if vs:
            all_verbs[cls] = vs
    seed_verbs = {c: v[:1] for c, v in all_verbs.items()}  # narrow coverage
    classes = sorted(all_verbs, key=lambda c: c.value)

    t0 = time.perf_counter()
    gains = []
    for trial in range(5):
        rng = random.Random(100 + trial)
        seed_rows = _verb_corpus(lexicon, 500, rng, seed_verbs, noise=0.25)
        dev_rows = _verb_corpus(lexicon, 680, rng, all_verbs)
        pool = [c for c, _ in _verb_corpus(lexicon, 2000, rng, all_verbs)]

        lfs = [weaksup.verb_keyword_lf(lexicon), _noisy_lf(0.6, classes)]
        matrix = weaksup.apply_lfs(lfs, pool)
        lmodel = weaksup.fit_label_model(matrix, iterations=60)
        synth = weaksup.synthesize_training_set(matrix, lmodel)

        def featurized(rows, weights=None):
            feats = [(featurize_relation(c, lexicon), y) for c, y in rows]
            return feats

        seed_feats = featurized(seed_rows)
        base = train_relation_classifier(seed_feats, epochs=40, lr=1.0,
                                         seed=trial)
        aug_rows = seed_rows + [(c, y) for c, y, _ in synth]
        aug_w = [1.0] * len(seed_rows) + [w for _, _, w in synth]
        aug = train_relation_classifier(featurized(aug_rows),
                                        weights=aug_w, epochs=40, lr=1.0,
                                        seed=trial)

        def evaluate(model):
            preds = []
            for cand, _ in dev_rows:
                p = model.probabilities(featurize_relation(cand, lexicon))
                preds.append(CLASSES[int(np.argmax(p))])
            return _macro_f1([g for _, g in dev_rows], preds, classes)

        gains.append(evaluate(aug) - evaluate(base))
    mean_gain = sum(gains) / len(gains)
    elapsed = time.perf_counter() - t0
    assert mean_gain >= 2.0, f"gains {gains}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _report("data-programming-direction",
            f"mean macro-F1 gain +{mean_gain:.1f} pts over 5 seeds, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. Checker low-FNR contract

def test_checker_fnr_contract():
    from test_relevance import make_corpus
    t0 = time.perf_counter()
    keywords = relevance.load_keywords()
    docs, labels = make_corpus(n=200, seed=31)
    split = int(len(docs) * 0.75)
    train_docs, train_y = docs[:split], labels[:split]
    test_docs, test_y = docs[split:], labels[split:]
    idf = relevance.compute_idf(train_docs)
    feats = [relevance.featurize(d, keywords, idf) for d in train_docs]
    model = relevance.train_checker(list(zip(feats, train_y)),
                                    theta=0.3, idf=idf)
    assert model.theta == 0.3
    fn = pos = 0
    for d, y in zip(test_docs, test_y):
        if not y:
            continue
        pos += 1
        if not relevance.predict_relevance(model, d, keywords)[1]:
            fn += 1
    fnr = fn / pos
    elapsed = time.perf_counter() - t0
    assert fnr <= 0.05, f"FNR {fnr:.3f} ({fn}/{pos})"
    assert elapsed < 30.0
    _report("checker-low-fnr",
            f"held-out FNR {100 * fnr:.1f}% ({fn}/{pos} positives), "
            f"theta=0.3, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. Fusion fixtures

def _fusion_doc(report_id, malware_surface):
    from ctikg.model import EntityMention, MentionSource, RelationTriple, \
        TripleOrigin, canonical_name
    return UtkrDocument(
        report_id=report_id, source_id="s", title=f"{malware_surface} report",
        stage=Stage.EXTRACTED,
        sentences=((malware_surface, "uses", "Mimikatz", "."),),
        entities=(
            EntityMention(surface=malware_surface,
                          category=EntityCategory.MALWARE, sentence=0,
                          start=0, end=0,
                          normalized=canonical_name(EntityCategory.MALWARE,
                                                    malware_surface),
                          source=MentionSource.GAZETTEER),
            EntityMention(surface="Mimikatz", category=EntityCategory.TOOL,
                          sentence=0, start=2, end=2, normalized="mimikatz",
                          source=MentionSource.GAZETTEER),
        ),
        relations=(RelationTriple(0, 1, RelationClass.USE, verb="use",
                                  confidence=0.9, origin=TripleOrigin.SVO),),
        relevance=(0.9, True))


def test_fusion_fixtures():
    # ZQuest / Z-Quest: name canonicalization collapses the pair, and
    # fusion keeps the single node
    g = ThreatGraph()
    g.upsert_from_utkr(_fusion_doc("s/r1", "ZQuest"))
    g.upsert_from_utkr(_fusion_doc("s/r2", "Z-Quest"))
    zq = [n for n in g.nodes if n.category is EntityCategory.MALWARE]
    assert len(zq) == 1
    assert zq[0].display_names == {"ZQuest", "Z-Quest"}

    # Petya / NotPetya stay separate at the 0.75 threshold
    g.upsert_from_utkr(_fusion_doc("s/r3", "Petya"))
    g.upsert_from_utkr(_fusion_doc("s/r4", "NotPetya"))
    prov_before = sum(len(e.provenance) for e in g.edges)
    report1 = g.fuse_entities(threshold=0.75)
    malware = sorted(n.name for n in g.nodes
                     if n.category is EntityCategory.MALWARE)
    assert "petya" in malware and "notpetya" in malware
    assert ("petya", "notpetya") not in report1["merged"]
    assert ("notpetya", "petya") not in report1["merged"]

    # a genuinely similar pair does merge, conserving edge provenance
    prov = Provenance("s/r5", "s", "test", "")
    a, _ = g.get_or_create(EntityCategory.MALWARE, "downloaderslime",
                           "Downloader.Slime")
    b, _ = g.get_or_create(EntityCategory.MALWARE, "downloaderslim",
                           "Downloader.Slim")
    tool = g.find(EntityCategory.TOOL, "mimikatz")
    g.add_edge(a.node_id, tool.node_id, RelationClass.USE, prov, 0.9)
    g.add_edge(b.node_id, tool.node_id, RelationClass.USE,
               Provenance("s/r6", "s", "test", ""), 0.8)
    prov_before = sum(len(e.provenance) for e in g.edges)
    report2 = g.fuse_entities(threshold=0.75)
    assert ("downloaderslim", "downloaderslime") in report2["merged"]
    prov_after = sum(len(e.provenance) for e in g.edges)
    assert prov_after == prov_before, "edge provenance not conserved"

    # idempotent on the second run
    snapshot = {(n.node_id, n.name) for n in g.nodes}
    report3 = g.fuse_entities(threshold=0.75)
    assert report3["merged"] == []
    assert {(n.node_id, n.name) for n in g.nodes} == snapshot
    _report("fusion-fixtures",
            "zquest collapsed, petya/notpetya kept, provenance conserved, "
            "idempotent")


# ---------------------------------------------------------------------------
# 6. End-to-end document fixture

FIG_DOC = (
    "The CozyDuke APT\n"
    "\n"
    "CozyDuke uses Office Monkeys (Short Flash Movie).exe against victims. "
    "Office Monkeys (Short Flash Movie).exe launches player.exe on the "
    "infected host."
)


def test_end_to_end_fixture(tmp_path):
    cfg = PipelineConfig(data_dir=str(tmp_path / "data"),
                         graph_path=str(tmp_path / "data" / "graph.tkg"))
    pipe = Pipeline(cfg)
    raw = RawDocument(report_id="fix/monkeys", source_id="fix", url="u",
                      fetched_at=0.0, media_kind="TEXT",
                      body=FIG_DOC.encode())
    stats = pipe.run(raw_docs=[raw])
    assert stats.quarantined == 0

    g = pipe.graph
    dropper = g.find(EntityCategory.FILENAME,
                     "Office Monkeys (Short Flash Movie).exe")
    payload = g.find(EntityCategory.FILENAME, "player.exe")
    actor = g.find(EntityCategory.THREAT_ACTOR, "cozyduke")
    assert dropper is not None and payload is not None and actor is not None

    edges = {(e.src, e.dst, e.rel_class): e for e in g.edges}
    execute = edges.get((dropper.node_id, payload.node_id,
                         RelationClass.EXECUTE))
    assert execute is not None, "missing EXECUTE triple"
    assert execute.verb == "launch"
    assert (actor.node_id, dropper.node_id, RelationClass.USE) in edges
    report_node = [n for n in g.nodes
                   if n.category is EntityCategory.REPORT][0]
    for nid in (actor.node_id, dropper.node_id, payload.node_id):
        assert (nid, report_node.node_id, RelationClass.REPORTED_IN) in edges

    # re-running the pipeline on the same document changes nothing
    stats2 = pipe.run(raw_docs=[raw])
    assert stats2.graph_delta.is_zero(), vars(stats2.graph_delta)
    _report("end-to-end-fixture",
            "EXECUTE(launch) triple + USE/REPORTED_IN present, re-run "
            "delta 0")


# ---------------------------------------------------------------------------
# 7. QA fixtures

def test_qa_fixtures():
    g = ThreatGraph()
    prov = Provenance("fix/qa", "fix", "test", "")

    def node(cat, name, display):
        n, _ = g.get_or_create(cat, name, display)
        return n

    slime = node(EntityCategory.MALWARE, "downloaderslime",
                 "Downloader.Slime")
    slime.add_attribute("type", "trojan house", prov)
    eternal = node(EntityCategory.TECHNIQUE, "eternalblue", "EternalBlue")
    cve = node(EntityCategory.CVE, "CVE-2017-0144", "CVE-2017-0144")
    g.add_edge(eternal.node_id, cve.node_id, RelationClass.RELATE, prov, 0.9)
    vish = node(EntityCategory.THREAT_ACTOR, "darkvishnya", "DarkVishnya")
    chim = node(EntityCategory.THREAT_ACTOR, "chimera", "Chimera")
    shared = node(EntityCategory.TECHNIQUE, "validaccounts",
                  "Valid Accounts")
    extra_v = node(EntityCategory.TECHNIQUE, "hardwareadditions",
                   "Hardware Additions")
    extra_c = node(EntityCategory.TECHNIQUE, "passwordspraying",
                   "Password Spraying")
    for actor, techs in ((vish, (shared, extra_v)), (chim, (shared, extra_c))):
        for t in techs:
            g.add_edge(actor.node_id, t.node_id, RelationClass.USE, prov, 0.8)

    model = default_intent_model()
    intents = load_intents()

    rec = answer("Which CVE is exploited by EternalBlue?", g, model, intents)
    assert rec.failure is None and rec.values == ["CVE-2017-0144"], \
        rec.to_json()

    rec = answer("What type of malware is Downloader.Slime?", g, model,
                 intents)
    assert rec.failure is None and rec.values == ["trojan house"], \
        rec.to_json()

    rec = answer("What techniques do DarkVishnya and Chimera have in common?",
                 g, model, intents)
    assert rec.failure is None and rec.values == ["validaccounts"], \
        rec.to_json()
    _report("qa-fixtures", "all three reference questions answered exactly")


# ---------------------------------------------------------------------------
# 8. Throughput

_ACTORS = ["CozyDuke", "DarkVishnya", "Chimera", "LockBit"]
_IP_POOL = [f"10.{i // 16}.{i % 16}.{i % 250 + 1}" for i in range(120)]
_FILE_POOL = [f"tool{i}.exe" for i in range(60)]


def _synthetic_report(rng, i):
    words = []
    while len(words) < 800:
        r = rng.random()
        if r < 0.02:
            words.append(rng.choice(_ACTORS))
        elif r < 0.03:
            words.append(rng.choice(_IP_POOL))
        elif r < 0.04:
            words.append(rng.choice(_FILE_POOL))
        elif r < 0.06:
            words.append(rng.choice(["malware", "payload", "phishing",
                                     "campaign", "beacon"]))
        else:
            words.append(rng.choice(_FILLER))
        if rng.random() < 0.08:
            words[-1] += "."
    return (f"Synthetic Report {i}\n\n" + " ".join(words)).encode()


def test_throughput(tmp_path):
    rng = random.Random(77)
    raws = [RawDocument(report_id=f"synth/{i:04d}", source_id="synth",
                        url="u", fetched_at=0.0, media_kind="TEXT",
                        body=_synthetic_report(rng, i))
            for i in range(1000)]
    cfg = PipelineConfig(data_dir=str(tmp_path / "data"),
                         graph_path=str(tmp_path / "data" / "graph.tkg"))
    pipe = Pipeline(cfg)
    t0 = time.perf_counter()
    stats = pipe.run(raw_docs=raws)
    elapsed = time.perf_counter() - t0
    assert stats.counts["extract"] == 1000
    per_minute = 1000 / (elapsed / 60.0)
    assert per_minute >= 10.0, f"{per_minute:.1f} reports/min"
    total_pct = sum(stats.breakdown().values())
    assert abs(total_pct - 100.0) <= 0.5, total_pct
    _report("throughput",
            f"{per_minute:.0f} reports/min over 1000 ~800-word reports, "
            f"breakdown sums to {total_pct:.2f}%")


# ---------------------------------------------------------------------------
# 9. Persistence + Cypher oracle

_CATS = [EntityCategory.MALWARE, EntityCategory.TOOL,
         EntityCategory.THREAT_ACTOR, EntityCategory.TECHNIQUE,
         EntityCategory.DOMAIN, EntityCategory.IP]

_STRING_RE = re.compile(r'"((?:[^"\\]|\\.)*)"')


def _unescape(s):
    return s.replace('\\"', '"').replace("\\\\", "\\")


def test_persistence_and_cypher_oracle(tmp_path):
    rng = random.Random(55)
    g = ThreatGraph()
    nodes = []
    for i in range(1000):
        cat = rng.choice(_CATS)
        name = f"entity-{i}-" + "".join(
            rng.choice('abc"\\xyz') for _ in range(4))
        node, _ = g.get_or_create(cat, name, name.upper())
        if rng.random() < 0.3:
            node.add_attribute("note", f'v"{i}\\end',
                               Provenance(f"r{i}", "s", "test", ""))
        nodes.append(node)
    for _ in range(2000):
        a, b = rng.choice(nodes), rng.choice(nodes)
        if a.node_id == b.node_id:
            continue
        g.add_edge(a.node_id, b.node_id,
                   rng.choice([RelationClass.USE, RelationClass.RELATE]),
                   Provenance(f"r{rng.randint(0, 99)}", "s", "test", ""),
                   round(rng.random(), 3))

    path = tmp_path / "big.tkg"
    g.save(path)
    loaded = ThreatGraph.load(path)

    def structure(graph):
        return (
            {(n.node_id, n.category, n.name, frozenset(n.display_names),
              tuple(sorted((k, frozenset(v))
                           for k, v in n.attributes.items())))
             for n in graph.nodes},
            {(e.src, e.dst, e.rel_class, e.verb, e.step_order,
              frozenset(e.provenance)) for e in graph.edges},
        )

    assert structure(g) == structure(loaded)

    # escape-then-parse oracle: every quoted string in the export must
    # decode back to a value that exists in the graph
    names = {n.name for n in g.nodes}
    displays = {sorted(n.display_names)[0] for n in g.nodes}
    attrs = {v for n in g.nodes for vals in n.attributes.values()
             for v, _ in vals}
    verbs = {e.verb for e in g.edges if e.verb}
    known = names | displays | attrs | verbs
    statements = list(g.export_cypher())
    assert len(statements) == len(list(g.nodes)) + len(list(g.edges))
    checked = 0
    for stmt in statements:
        assert stmt.endswith(";")
        for raw in _STRING_RE.findall(stmt):
            decoded = _unescape(raw)
            assert decoded in known, f"unparseable string {raw!r}"
            checked += 1
    assert checked > 1000
    _report("persistence-cypher",
            f"1000-node graph round-trips; {checked} exported strings "
            "decode to graph values")
