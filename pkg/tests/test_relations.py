import math
import random

import numpy as np
import pytest

from ctikg.model import (
    EntityCategory, EntityMention, MentionSource, RelationClass, Stage,
    TripleOrigin, UtkrDocument,
)
from ctikg.relations import (
    CLASSES, CLASS_INDEX, CandidateMention, RelationCandidate, RelationModel,
    _loss_and_grad, candidate_pairs, classifier_triple, classify_relation,
    extract_document_relations, extract_svo, featurize_relation,
    labeled_relation_json, load_labeled_relations, mark_temporal_order,
    train_relation_classifier,
)


def _cand(tokens, s_span, o_span,
          s_cat=EntityCategory.THREAT_ACTOR, o_cat=EntityCategory.FILENAME):
    return RelationCandidate(
        sentence=tuple(tokens),
        subject=CandidateMention(0, s_cat, *s_span),
        object=CandidateMention(1, o_cat, *o_span))


class TestCandidatePairs:
    def test_pairs_within_window(self):
        sent = tuple("a b c d e".split())
        ms = [CandidateMention(0, EntityCategory.MALWARE, 0, 0),
              CandidateMention(1, EntityCategory.TOOL, 4, 4)]
        assert len(candidate_pairs(sent, ms, window=20)) == 2
        assert candidate_pairs(sent, ms, window=2) == []

    def test_same_identity_excluded(self):
        sent = tuple("a b c".split())
        ms = [CandidateMention(0, EntityCategory.MALWARE, 0, 0),
              CandidateMention(0, EntityCategory.MALWARE, 2, 2)]
        assert candidate_pairs(sent, ms) == []


class TestSvo:
    def test_active_voice(self, lexicon):
        cand = _cand("CozyDuke launches player.exe today".split(),
                     (0, 0), (2, 2))
        t = extract_svo(cand, lexicon)
        assert t is not None
        assert (t.subject, t.object) == (0, 1)
        assert t.rel_class is RelationClass.EXECUTE
        assert t.verb == "launch"
        assert t.origin is TripleOrigin.SVO
        assert t.confidence == pytest.approx(0.9)

    def test_passive_voice_swaps(self, lexicon):
        cand = _cand("player.exe was dropped by CozyDuke".split(),
                     (4, 4), (0, 0))
        t = extract_svo(cand, lexicon)
        assert t.rel_class is RelationClass.BREAK
        # CozyDuke (entity 0 here is the subject arg) acts on player.exe
        assert (t.subject, t.object) == (0, 1)

    def test_bigram_verb_phrase(self, lexicon):
        cand = _cand("RedFalcon carried out Wortex attacks".split(),
                     (0, 0), (3, 3),
                     o_cat=EntityCategory.MALWARE)
        t = extract_svo(cand, lexicon)
        assert t.rel_class is RelationClass.EXECUTE
        assert t.verb == "carry out"

    def test_no_lexicon_verb(self, lexicon):
        cand = _cand("CozyDuke greets player.exe warmly".split(),
                     (0, 0), (2, 2))
        assert extract_svo(cand, lexicon) is None

    def test_verb_outside_span_ignored(self, lexicon):
        cand = _cand("launch CozyDuke and player.exe".split(), (1, 1), (3, 3))
        assert extract_svo(cand, lexicon) is None


class TestTemporalOrder:
    def _triple(self):
        from ctikg.model import RelationTriple
        return RelationTriple(0, 1, RelationClass.EXECUTE, verb="launch",
                              origin=TripleOrigin.SVO, confidence=0.9)

    def test_no_markers_leaves_unset(self):
        out = mark_temporal_order(tuple("a runs b".split()),
                                  [self._triple()], [1])
        assert out[0].step_order is None

    def test_segments(self):
        sent = tuple("First it runs x then it drops y".split())
        out = mark_temporal_order(sent, [self._triple(), self._triple()],
                                  [2, 6])
        assert [t.step_order for t in out] == [1, 2]

    def test_marker_with_comma(self):
        sent = tuple("First, a uses b then, c uses d".split())
        out = mark_temporal_order(sent, [self._triple(), self._triple()],
                                  [2, 7])
        assert [t.step_order for t in out] == [1, 2]


class TestFeatures:
    def test_deterministic_and_bounded(self):
        cand = _cand("A uses B now".split(), (0, 0), (2, 2))
        f1 = featurize_relation(cand)
        f2 = featurize_relation(cand)
        assert f1 == f2
        assert all(0 <= k < (1 << 16) for k in f1)

    def test_direction_sensitive(self):
        toks = "A uses B".split()
        fwd = featurize_relation(_cand(toks, (0, 0), (2, 2)))
        rev = featurize_relation(_cand(toks, (2, 2), (0, 0),
                                       s_cat=EntityCategory.FILENAME,
                                       o_cat=EntityCategory.THREAT_ACTOR))
        assert fwd != rev

    def test_lexicon_verb_feature(self, lexicon):
        cand = _cand("A launches B".split(), (0, 0), (2, 2))
        with_lex = featurize_relation(cand, lexicon)
        without = featurize_relation(cand)
        assert len(with_lex) > len(without)


class TestGradient:
    def test_matches_finite_differences(self):
        """Analytic gradient against central differences on a tiny problem."""
        rng = random.Random(0)
        n_classes = len(CLASSES)
        W = np.random.default_rng(1).normal(0, 0.1, (n_classes, 1 << 16))
        X_idx = [np.array([rng.randrange(50) for _ in range(4)], dtype=np.int64)
                 for _ in range(6)]
        X_val = [np.array([rng.uniform(0.5, 2.0) for _ in range(4)])
                 for _ in range(6)]
        y = [rng.randrange(n_classes) for _ in range(6)]
        sw = np.array([rng.uniform(0.2, 1.5) for _ in range(6)])
        l2 = 1e-3
        _, grad = _loss_and_grad(W, X_idx, X_val, y, sw, l2)
        eps = 1e-6
        probes = [(rng.randrange(n_classes), rng.randrange(50))
                  for _ in range(12)]
        for r, c in probes:
            Wp, Wm = W.copy(), W.copy()
            Wp[r, c] += eps
            Wm[r, c] -= eps
            lp, _ = _loss_and_grad(Wp, X_idx, X_val, y, sw, l2)
            lm, _ = _loss_and_grad(Wm, X_idx, X_val, y, sw, l2)
            fd = (lp - lm) / (2 * eps)
            assert grad[r, c] == pytest.approx(fd, abs=1e-4)


def _toy_relation_data(n=80, seed=0):
    """Linearly separable: 'deploys' -> INJECT, 'mentions' -> OTHER."""
    rng = random.Random(seed)
    data = []
    for _ in range(n):
        if rng.random() < 0.5:
            toks = ["ActorX", "deploys", "tool.exe", "on", "hosts"]
            cls = RelationClass.INJECT
        else:
            toks = ["ActorX", "mentions", "tool.exe", "in", "passing"]
            cls = RelationClass.OTHER
        cand = _cand(toks, (0, 0), (2, 2))
        data.append((featurize_relation(cand), cls))
    return data


class TestClassifier:
    def test_learns_toy_problem(self):
        data = _toy_relation_data()
        model = train_relation_classifier(data, epochs=120, lr=1.0)
        correct = 0
        for feats, cls in data:
            p = model.probabilities(feats)
            correct += CLASSES[int(np.argmax(p))] is cls
        assert correct / len(data) >= 0.95

    def test_deterministic(self):
        data = _toy_relation_data(20)
        a = train_relation_classifier(data, epochs=10, seed=3)
        b = train_relation_classifier(data, epochs=10, seed=3)
        assert np.array_equal(a.weights, b.weights)

    def test_single_class_rejected(self):
        data = [(f, RelationClass.USE) for f, _ in _toy_relation_data(10)]
        with pytest.raises(ValueError):
            train_relation_classifier(data)

    def test_zero_weight_rows_dont_count_for_class_check(self):
        data = _toy_relation_data(10)
        weights = [0.0 if cls is RelationClass.OTHER else 1.0
                   for _, cls in data]
        with pytest.raises(ValueError):
            train_relation_classifier(data, weights=weights)

    def test_probabilities_sum_to_one(self):
        model = train_relation_classifier(_toy_relation_data(20), epochs=5)
        feats, _ = _toy_relation_data(1, seed=9)[0]
        assert float(model.probabilities(feats).sum()) == pytest.approx(1.0)

    def test_save_load_round_trip(self, tmp_path):
        model = train_relation_classifier(_toy_relation_data(20), epochs=5)
        p = tmp_path / "re.json"
        model.save(p)
        loaded = RelationModel.load(p)
        feats, _ = _toy_relation_data(1)[0]
        assert np.allclose(model.probabilities(feats),
                           loaded.probabilities(feats))

    def test_triple_thresholding(self):
        data = _toy_relation_data()
        model = train_relation_classifier(data, epochs=120, lr=1.0)
        inject = _cand("ActorX deploys tool.exe on hosts".split(),
                       (0, 0), (2, 2))
        other = _cand("ActorX mentions tool.exe in passing".split(),
                      (0, 0), (2, 2))
        t = classifier_triple(model, inject)
        assert t is not None and t.rel_class is RelationClass.INJECT
        assert t.origin is TripleOrigin.CLASSIFIER
        assert classifier_triple(model, other) is None  # OTHER suppressed
        assert classifier_triple(model, inject, tau=1.1) is None


class TestLabeledJsonl:
    def test_round_trip(self, tmp_path):
        import json
        cand = _cand("A deploys B".split(), (0, 0), (2, 2))
        row = labeled_relation_json(cand, RelationClass.INJECT, weight=0.8)
        p = tmp_path / "rels.jsonl"
        p.write_text(json.dumps(row) + "\n")
        [(loaded, cls, w)] = load_labeled_relations(p)
        assert loaded.sentence == cand.sentence
        assert (loaded.subject.start, loaded.subject.end) == (0, 0)
        assert cls is RelationClass.INJECT
        assert w == pytest.approx(0.8)

    def test_missing_class_rejected(self, tmp_path):
        import json
        cand = _cand("A deploys B".split(), (0, 0), (2, 2))
        p = tmp_path / "rels.jsonl"
        p.write_text(json.dumps(labeled_relation_json(cand, None)) + "\n")
        with pytest.raises(ValueError):
            load_labeled_relations(p)
        assert load_labeled_relations(p, require_class=False)


def _mention(surface, cat, sentence, start, end=None):
    from ctikg.model import canonical_name
    return EntityMention(surface=surface, category=cat, sentence=sentence,
                         start=start, end=end if end is not None else start,
                         normalized=canonical_name(cat, surface),
                         source=MentionSource.GAZETTEER)


class TestDocumentRelations:
    def test_svo_document(self, lexicon):
        doc = UtkrDocument(
            report_id="r", source_id="s", stage=Stage.CHECKED,
            sentences=(("CozyDuke", "launches", "player.exe", "."),),
            entities=(
                _mention("CozyDuke", EntityCategory.THREAT_ACTOR, 0, 0),
                _mention("player.exe", EntityCategory.FILENAME, 0, 2),
            ))
        triples = extract_document_relations(doc, lexicon)
        assert len(triples) == 1
        t = triples[0]
        assert (t.subject, t.object, t.rel_class, t.verb) == \
            (0, 1, RelationClass.EXECUTE, "launch")

    def test_one_triple_per_pair(self, lexicon):
        doc = UtkrDocument(
            report_id="r", source_id="s", stage=Stage.CHECKED,
            sentences=(("Wortex", "uses", "Mimikatz", "and",
                        "Wortex", "drops", "Mimikatz", "."),),
            entities=(
                _mention("Wortex", EntityCategory.MALWARE, 0, 0),
                _mention("Mimikatz", EntityCategory.TOOL, 0, 2),
                _mention("Wortex", EntityCategory.MALWARE, 0, 4),
                _mention("Mimikatz", EntityCategory.TOOL, 0, 6),
            ))
        triples = extract_document_relations(doc, lexicon)
        pairs = [frozenset((t.subject, t.object)) for t in triples]
        assert len(pairs) == len(set(pairs))

    def test_coref_standin(self, lexicon):
        from ctikg.entities import CorefLink
        doc = UtkrDocument(
            report_id="r", source_id="s", stage=Stage.CHECKED,
            sentences=(("Wortex", "arrived", "."),
                       ("It", "drops", "player.exe", ".")),
            entities=(
                _mention("Wortex", EntityCategory.MALWARE, 0, 0),
                _mention("player.exe", EntityCategory.FILENAME, 1, 2),
            ))
        coref = [CorefLink(1, 0, 0, "It", 0)]
        triples = extract_document_relations(doc, lexicon, coref=coref)
        assert len(triples) == 1
        assert (triples[0].subject, triples[0].object) == (0, 1)
        assert triples[0].rel_class is RelationClass.BREAK

    def test_deterministic(self, lexicon):
        doc = UtkrDocument(
            report_id="r", source_id="s", stage=Stage.CHECKED,
            sentences=(("CozyDuke", "launches", "player.exe", "."),),
            entities=(
                _mention("CozyDuke", EntityCategory.THREAT_ACTOR, 0, 0),
                _mention("player.exe", EntityCategory.FILENAME, 0, 2),
            ))
        assert extract_document_relations(doc, lexicon) == \
            extract_document_relations(doc, lexicon)
