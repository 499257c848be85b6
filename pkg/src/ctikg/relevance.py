"""Report relevance checking: four engineered feature families (keyword
count/density, IOC count/density, length, TF-IDF) feeding a from-scratch
logistic classifier with a deliberately low decision threshold.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .model import UtkrDocument
from .entities import IocRule, default_ioc_rules, extract_iocs

TFIDF_BUCKETS = 1 << 18
DEFAULT_THETA = 0.3

DENSE_NAMES = ("kw_count_title", "kw_count_body", "kw_density_title",
               "kw_density_body", "ioc_count", "ioc_density", "length")

_TOKEN_RE = re.compile(r"[A-Za-z0-9_.\-]+")


def load_keywords(path=None) -> list[str]:
    if path is None:
        text = resources.files("ctikg.data").joinpath("keywords.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return [line.strip().lower() for line in text.splitlines()
            if line.strip() and not line.startswith("#")]


def keywords_hash(keywords: list[str]) -> str:
    return hashlib.sha256("\n".join(sorted(keywords)).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureVector:
    kw_count_title: int
    kw_count_body: int
    kw_density_title: float
    kw_density_body: float
    ioc_count: int
    ioc_density: float
    length: int
    tfidf: dict[int, float]
    bias: float = 1.0

    def dense(self) -> np.ndarray:
        return np.array([self.kw_count_title, self.kw_count_body,
                         self.kw_density_title, self.kw_density_body,
                         self.ioc_count, self.ioc_density, self.length],
                        dtype=np.float64)


def _tokens(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def _keyword_count(tokens: list[str], keywords: list[str]) -> int:
    """Whole-token / whole-phrase, case-insensitive."""
    count = 0
    single = {k for k in keywords if " " not in k}
    phrases = [k.split() for k in keywords if " " in k]
    for t in tokens:
        if t in single:
            count += 1
    for ph in phrases:
        L = len(ph)
        for i in range(len(tokens) - L + 1):
            if tokens[i:i + L] == ph:
                count += 1
    return count


def compute_idf(corpus: list[UtkrDocument]) -> dict[int, float]:
    """idf(t) = ln(N / df(t)) over hashed body tokens."""
    if not corpus:
        raise ValueError("idf requires a non-empty corpus")
    n = len(corpus)
    df: dict[int, int] = {}
    for doc in corpus:
        seen = {zlib.crc32(t.encode()) % TFIDF_BUCKETS
                for t in _tokens(doc.body_text())}
        for b in seen:
            df[b] = df.get(b, 0) + 1
    return {b: math.log(n / c) for b, c in df.items()}


def featurize(doc: UtkrDocument, keywords: list[str],
              idf: dict[int, float],
              rules: Optional[list[IocRule]] = None) -> FeatureVector:
    title_toks = _tokens(doc.title)
    body = doc.body_text()
    body_toks = _tokens(body)
    kw_t = _keyword_count(title_toks, keywords)
    kw_b = _keyword_count(body_toks, keywords)
    iocs = extract_iocs(body, rules or default_ioc_rules())
    n_body = len(body_toks)
    n_title = len(title_toks)

    counts: dict[int, int] = {}
    for t in body_toks:
        b = zlib.crc32(t.encode()) % TFIDF_BUCKETS
        counts[b] = counts.get(b, 0) + 1
    tfidf = {}
    for b, c in counts.items():
        w = idf.get(b, 0.0)  # unseen tokens drop out
        if w:
            tfidf[b] = (c / max(n_body, 1)) * w

    return FeatureVector(
        kw_count_title=kw_t, kw_count_body=kw_b,
        kw_density_title=kw_t / n_title if n_title else 0.0,
        kw_density_body=kw_b / n_body if n_body else 0.0,
        ioc_count=len(iocs),
        ioc_density=len(iocs) / n_body if n_body else 0.0,
        length=n_body,
        tfidf=tfidf)


@dataclass
class CheckerModel:
    dense_weights: np.ndarray            # len 7
    tfidf_weights: dict[int, float]
    intercept: float
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    theta: float = DEFAULT_THETA
    source_scope: str = "universal"
    epochs: int = 0
    learning_rate: float = 0.0
    idf: dict[int, float] = field(default_factory=dict)
    lexicon_hash: str = ""

    def probability(self, fv: FeatureVector) -> float:
        x = (fv.dense() - self.scaler_mean) / self.scaler_std
        z = float(x @ self.dense_weights) + self.intercept * fv.bias
        for b, v in fv.tfidf.items():
            w = self.tfidf_weights.get(b)
            if w:
                z += w * v
        return 1.0 / (1.0 + math.exp(-z))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({
                "version": 1,
                "dense_weights": self.dense_weights.tolist(),
                "tfidf_weights": [[b, w] for b, w in self.tfidf_weights.items()],
                "intercept": self.intercept,
                "scaler_mean": self.scaler_mean.tolist(),
                "scaler_std": self.scaler_std.tolist(),
                "theta": self.theta,
                "source_scope": self.source_scope,
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "idf": [[b, w] for b, w in self.idf.items()],
                "lexicon_hash": self.lexicon_hash,
            }, f)

    @classmethod
    def load(cls, path) -> "CheckerModel":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            dense_weights=np.asarray(d["dense_weights"]),
            tfidf_weights={int(b): w for b, w in d["tfidf_weights"]},
            intercept=d["intercept"],
            scaler_mean=np.asarray(d["scaler_mean"]),
            scaler_std=np.asarray(d["scaler_std"]),
            theta=d["theta"], source_scope=d["source_scope"],
            epochs=d["epochs"], learning_rate=d["learning_rate"],
            idf={int(b): w for b, w in d["idf"]},
            lexicon_hash=d.get("lexicon_hash", ""))


def train_checker(labeled: list[tuple[FeatureVector, bool]],
                  epochs: int = 200, lr: float = 0.5, l2: float = 1e-4,
                  theta: float = DEFAULT_THETA,
                  source_scope: str = "universal",
                  idf: Optional[dict[int, float]] = None,
                  lexicon_hash: str = "",
                  seed: int = 0) -> CheckerModel:
    """Full-batch gradient descent on log-loss + L2 over standardized dense
    features and raw hashed TF-IDF features."""
    labels = {y for _, y in labeled}
    if len(labels) < 2:
        raise ValueError("training data must contain both classes")

    dense = np.stack([fv.dense() for fv, _ in labeled])
    mean = dense.mean(axis=0)
    std = dense.std(axis=0)
    std[std == 0] = 1.0
    Xd = (dense - mean) / std
    y = np.array([1.0 if lab else 0.0 for _, lab in labeled])

    buckets = sorted({b for fv, _ in labeled for b in fv.tfidf})
    bindex = {b: i for i, b in enumerate(buckets)}
    Xs = np.zeros((len(labeled), len(buckets)))
    for i, (fv, _) in enumerate(labeled):
        for b, v in fv.tfidf.items():
            Xs[i, bindex[b]] = v

    rng = np.random.default_rng(seed)
    wd = rng.normal(0, 1e-6, Xd.shape[1])
    ws = rng.normal(0, 1e-6, Xs.shape[1]) if len(buckets) else np.zeros(0)
    b0 = 0.0
    n = len(labeled)
    for _ in range(epochs):
        z = Xd @ wd + (Xs @ ws if len(buckets) else 0.0) + b0
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y
        wd -= lr * ((Xd.T @ err) / n + l2 * wd)
        if len(buckets):
            ws -= lr * ((Xs.T @ err) / n + l2 * ws)
        b0 -= lr * float(err.mean())

    return CheckerModel(
        dense_weights=wd,
        tfidf_weights={b: float(ws[bindex[b]]) for b in buckets
                       if ws[bindex[b]] != 0.0},
        intercept=b0, scaler_mean=mean, scaler_std=std,
        theta=theta, source_scope=source_scope,
        epochs=epochs, learning_rate=lr,
        idf=dict(idf or {}), lexicon_hash=lexicon_hash)


def predict_relevance(model: CheckerModel, doc: UtkrDocument,
                      keywords: list[str],
                      rules: Optional[list[IocRule]] = None,
                      ) -> tuple[float, bool]:
    """(probability, is_relevant); empty bodies are irrelevant outright."""
    if not doc.body_text().strip():
        return (0.0, False)
    fv = featurize(doc, keywords, model.idf, rules)
    p = model.probability(fv)
    return (p, p >= model.theta)
