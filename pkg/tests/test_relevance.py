import random

import numpy as np
import pytest

from ctikg.model import Stage, UtkrDocument
from ctikg.relevance import (
    CheckerModel, FeatureVector, compute_idf, featurize, keywords_hash,
    load_keywords, predict_relevance, train_checker,
)

THREAT_WORDS = ["malware", "ransomware", "payload", "exploit", "phishing",
                "backdoor", "persistence", "beacon", "campaign", "intrusion"]
BENIGN_WORDS = ["recipe", "flour", "garden", "holiday", "concert", "soccer",
                "painting", "novel", "weather", "museum"]
FILLER = ["the", "a", "of", "and", "in", "with", "to", "on", "for", "was"]


def make_corpus(n=120, seed=0, relevant_ratio=0.5):
    """Synthetic labeled corpus: threat reports vs. unrelated articles."""
    rng = random.Random(seed)
    docs, labels = [], []
    for i in range(n):
        relevant = rng.random() < relevant_ratio
        vocab = THREAT_WORDS if relevant else BENIGN_WORDS
        words = []
        for _ in range(rng.randint(60, 140)):
            words.append(rng.choice(vocab if rng.random() < 0.3 else FILLER))
        if relevant and rng.random() < 0.7:
            words.append(f"10.0.{rng.randint(0, 99)}.{rng.randint(1, 254)}")
        title_pool = vocab
        title = " ".join(rng.choice(title_pool) for _ in range(4))
        docs.append(UtkrDocument(
            report_id=f"synth/{i}", source_id="synth", title=title,
            text_blocks=(" ".join(words),), stage=Stage.PARSED))
        labels.append(relevant)
    return docs, labels


@pytest.fixture(scope="module")
def trained():
    keywords = load_keywords()
    docs, labels = make_corpus(n=120, seed=0)
    idf = compute_idf(docs)
    feats = [featurize(d, keywords, idf) for d in docs]
    model = train_checker(list(zip(feats, labels)), idf=idf,
                          lexicon_hash=keywords_hash(keywords))
    return model, keywords


class TestFeatures:
    def test_dense_families(self):
        keywords = load_keywords()
        doc = UtkrDocument(
            report_id="r", source_id="s", title="ransomware campaign",
            text_blocks=("The malware used phishing against 10.1.2.3 hosts.",),
            stage=Stage.PARSED)
        fv = featurize(doc, keywords, idf={})
        assert fv.kw_count_title == 2
        assert fv.kw_count_body >= 2
        assert fv.ioc_count == 1
        assert fv.length == len(doc.body_text().split())
        assert 0 < fv.kw_density_title <= 1

    def test_phrase_keyword(self):
        doc = UtkrDocument(
            report_id="r", source_id="s", title="t",
            text_blocks=("They saw command and control traffic.",),
            stage=Stage.PARSED)
        fv = featurize(doc, ["command and control"], idf={})
        assert fv.kw_count_body == 1

    def test_idf_downweights_common_tokens(self):
        docs, _ = make_corpus(40, seed=1)
        idf = compute_idf(docs)
        import zlib
        from ctikg.relevance import TFIDF_BUCKETS
        common = zlib.crc32(b"the") % TFIDF_BUCKETS
        rare = zlib.crc32(b"museum") % TFIDF_BUCKETS
        assert idf[common] < idf[rare]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            compute_idf([])


class TestChecker:
    def test_default_theta(self, trained):
        model, _ = trained
        assert model.theta == pytest.approx(0.3)

    def test_separates_corpus(self, trained):
        model, keywords = trained
        docs, labels = make_corpus(n=60, seed=99)
        preds = [predict_relevance(model, d, keywords)[1] for d in docs]
        acc = np.mean([p == y for p, y in zip(preds, labels)])
        assert acc >= 0.9

    def test_low_theta_favors_recall(self, trained):
        # at theta=0.3 the false-negative rate must stay small even where
        # overall accuracy would admit more misses
        model, keywords = trained
        docs, labels = make_corpus(n=200, seed=7)
        fn = pos = 0
        for d, y in zip(docs, labels):
            if not y:
                continue
            pos += 1
            if not predict_relevance(model, d, keywords)[1]:
                fn += 1
        assert fn / pos <= 0.05

    def test_empty_body_hard_irrelevant(self, trained):
        model, keywords = trained
        doc = UtkrDocument(report_id="r", source_id="s",
                           title="huge ransomware campaign",
                           text_blocks=("   ",), stage=Stage.PARSED)
        assert predict_relevance(model, doc, keywords) == (0.0, False)

    def test_single_class_rejected(self):
        keywords = load_keywords()
        docs, _ = make_corpus(10, seed=2)
        idf = compute_idf(docs)
        feats = [(featurize(d, keywords, idf), True) for d in docs]
        with pytest.raises(ValueError):
            train_checker(feats)

    def test_probability_in_range(self, trained):
        model, keywords = trained
        docs, _ = make_corpus(20, seed=5)
        for d in docs:
            p, _ = predict_relevance(model, d, keywords)
            assert 0.0 <= p <= 1.0

    def test_deterministic(self):
        keywords = load_keywords()
        docs, labels = make_corpus(30, seed=3)
        idf = compute_idf(docs)
        feats = [featurize(d, keywords, idf) for d in docs]
        a = train_checker(list(zip(feats, labels)), epochs=20, idf=idf)
        b = train_checker(list(zip(feats, labels)), epochs=20, idf=idf)
        assert np.array_equal(a.dense_weights, b.dense_weights)
        assert a.tfidf_weights == b.tfidf_weights

    def test_save_load_round_trip(self, trained, tmp_path):
        model, keywords = trained
        p = tmp_path / "checker.json"
        model.save(p)
        loaded = CheckerModel.load(p)
        doc, _ = make_corpus(1, seed=42)
        got = predict_relevance(loaded, doc[0], keywords)
        want = predict_relevance(model, doc[0], keywords)
        assert got == want
        assert loaded.lexicon_hash == model.lexicon_hash
