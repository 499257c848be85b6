"""Data programming: labeling functions over relation candidates, the vote
matrix, a majority-vote baseline, and a one-accuracy-per-LF label model fit
by EM that produces confidence-weighted training labels.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .model import RelationClass, canonical_name
from .relations import RelationCandidate, ALIAS_KEYWORDS

log = logging.getLogger(__name__)

ABSTAIN = None

ALPHA_MIN, ALPHA_MAX = 0.05, 0.95
ALPHA_INIT = 0.7


class LfKind(str, Enum):
    DISTANT_SUPERVISION = "DISTANT_SUPERVISION"
    KEYWORD = "KEYWORD"
    TYPE_RULE = "TYPE_RULE"


@dataclass(frozen=True)
class LabelingFunction:
    name: str
    fn: Callable[[RelationCandidate], Optional[RelationClass]]
    kind: LfKind

    def __call__(self, cand: RelationCandidate) -> Optional[RelationClass]:
        try:
            return self.fn(cand)
        except Exception:
            log.warning("labeling function %s failed; treating as abstain",
                        self.name, exc_info=True)
            return ABSTAIN


@dataclass
class LabelMatrix:
    votes: list[list[Optional[RelationClass]]]  # rows x LFs
    candidates: list                             # retained candidates
    lf_names: list[str]
    dropped: int                                 # all-abstain rows removed

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.votes), len(self.lf_names))

    def classes(self) -> list[RelationClass]:
        seen = {v for row in self.votes for v in row if v is not ABSTAIN}
        return sorted(seen, key=lambda c: c.value)


def apply_lfs(lfs: Sequence[LabelingFunction],
              candidates: Sequence) -> LabelMatrix:
    if not lfs:
        raise ValueError("at least one labeling function required")
    votes, kept, dropped = [], [], 0
    for cand in candidates:
        row = [lf(cand) for lf in lfs]
        if all(v is ABSTAIN for v in row):
            dropped += 1
            continue
        votes.append(row)
        kept.append(cand)
    return LabelMatrix(votes=votes, candidates=kept,
                       lf_names=[lf.name for lf in lfs], dropped=dropped)


def majority_vote(matrix: LabelMatrix) -> list[tuple[RelationClass, float]]:
    out = []
    for row in matrix.votes:
        cast = [v for v in row if v is not ABSTAIN]
        counts: dict[RelationClass, int] = {}
        for v in cast:
            counts[v] = counts.get(v, 0) + 1
        top = max(counts.values())
        winners = [c for c, n in counts.items() if n == top]
        if len(winners) != 1:
            out.append((RelationClass.OTHER, 0.0))
        else:
            out.append((winners[0], top / len(cast)))
    return out


@dataclass
class LabelModel:
    alphas: np.ndarray                  # per-LF accuracy estimates
    prior: np.ndarray                   # class prior
    classes: list[RelationClass]
    iterations: int = 0
    tolerance: float = 1e-4
    seed: int = 0
    log_likelihoods: list = field(default_factory=list)

    def posteriors(self, matrix: LabelMatrix) -> np.ndarray:
        return _posteriors(matrix, self.alphas, self.prior, self.classes)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({
                "alphas": self.alphas.tolist(),
                "prior": self.prior.tolist(),
                "classes": [c.value for c in self.classes],
                "iterations": self.iterations,
                "tolerance": self.tolerance,
            }, f)

    @classmethod
    def load(cls, path) -> "LabelModel":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(alphas=np.asarray(d["alphas"]), prior=np.asarray(d["prior"]),
                   classes=[RelationClass(c) for c in d["classes"]],
                   iterations=d.get("iterations", 0),
                   tolerance=d.get("tolerance", 1e-4))


def _posteriors(matrix: LabelMatrix, alphas, prior,
                classes: list[RelationClass]) -> np.ndarray:
    """Row posteriors under the conditionally-independent one-accuracy model:
    an LF votes the true class w.p. alpha, a uniform wrong class otherwise;
    abstentions carry no information."""
    k = len(classes)
    cidx = {c: i for i, c in enumerate(classes)}
    n = len(matrix.votes)
    post = np.zeros((n, k))
    for i, row in enumerate(matrix.votes):
        logp = np.log(np.maximum(prior, 1e-300)).copy()
        for j, v in enumerate(row):
            if v is ABSTAIN:
                continue
            a = alphas[j]
            wrong = (1.0 - a) / max(k - 1, 1)
            vi = cidx[v]
            for c in range(k):
                logp[c] += math.log(a if c == vi else max(wrong, 1e-300))
        m = logp.max()
        p = np.exp(logp - m)
        post[i] = p / p.sum()
    return post


def _log_likelihood(matrix: LabelMatrix, alphas, prior,
                    classes: list[RelationClass]) -> float:
    k = len(classes)
    cidx = {c: i for i, c in enumerate(classes)}
    total = 0.0
    for row in matrix.votes:
        logp = np.log(np.maximum(prior, 1e-300)).copy()
        for j, v in enumerate(row):
            if v is ABSTAIN:
                continue
            a = alphas[j]
            wrong = (1.0 - a) / max(k - 1, 1)
            vi = cidx[v]
            for c in range(k):
                logp[c] += math.log(a if c == vi else max(wrong, 1e-300))
        m = logp.max()
        total += m + math.log(float(np.exp(logp - m).sum()))
    return total


def fit_label_model(matrix: LabelMatrix, iterations: int = 100,
                    tolerance: float = 1e-4, seed: int = 0) -> LabelModel:
    """EM over per-LF accuracies and the class prior."""
    n, m = matrix.shape
    if m < 2:
        raise ValueError("label model requires at least 2 labeling functions")
    classes = matrix.classes()
    k = len(classes)
    cidx = {c: i for i, c in enumerate(classes)}
    alphas = np.full(m, ALPHA_INIT)
    prior = np.full(k, 1.0 / k)
    model = LabelModel(alphas=alphas, prior=prior, classes=classes,
                       tolerance=tolerance, seed=seed)
    if n < 2:
        log.warning("degenerate label matrix (%d row); returning init", n)
        return model

    lls = []
    it = 0
    for it in range(1, iterations + 1):
        post = _posteriors(matrix, alphas, prior, classes)
        lls.append(_log_likelihood(matrix, alphas, prior, classes))
        # M-step
        new_alphas = alphas.copy()
        for j in range(m):
            num = den = 0.0
            for i, row in enumerate(matrix.votes):
                v = row[j]
                if v is ABSTAIN:
                    continue
                num += post[i, cidx[v]]
                den += 1.0
            if den > 0:
                new_alphas[j] = min(ALPHA_MAX, max(ALPHA_MIN, num / den))
        new_prior = post.sum(axis=0)
        new_prior = new_prior / new_prior.sum()
        delta = float(np.abs(new_alphas - alphas).max())
        alphas, prior = new_alphas, new_prior
        if delta < tolerance:
            break
    model.alphas = alphas
    model.prior = prior
    model.iterations = it
    model.log_likelihoods = lls
    return model


def synthesize_training_set(matrix: LabelMatrix, model: LabelModel,
                            min_confidence: float = 0.0,
                            ) -> list[tuple[object, RelationClass, float]]:
    """(candidate, label, weight) rows; weight = posterior of the argmax
    label; rows below min_confidence dropped."""
    if not matrix.votes:
        return []
    post = model.posteriors(matrix)
    out = []
    for i, cand in enumerate(matrix.candidates):
        c = int(np.argmax(post[i]))
        w = float(post[i, c])
        if w < min_confidence:
            continue
        out.append((cand, model.classes[c], w))
    return out


# ---------------------------------------------------------------------------
# Concrete labeling functions

def _candidate_names(cand: RelationCandidate) -> tuple[str, str]:
    subj = " ".join(cand.sentence[cand.subject.start:cand.subject.end + 1])
    obj = " ".join(cand.sentence[cand.object.start:cand.object.end + 1])
    return subj, obj


def distant_supervision_lf(kb_path) -> LabelingFunction:
    """LF from a knowledge-base file: JSON list of
    {"subject": ..., "relation": ..., "object": ...} facts."""
    try:
        with open(kb_path, encoding="utf-8") as f:
            raw = json.load(f)
        facts = {}
        for row in raw:
            key = (_loose_name(row["subject"]), _loose_name(row["object"]))
            facts[key] = RelationClass(row["relation"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ValueError(f"unparseable knowledge base {kb_path}: {e}")

    def fn(cand: RelationCandidate):
        subj, obj = _candidate_names(cand)
        return facts.get((_loose_name(subj), _loose_name(obj)), ABSTAIN)

    return LabelingFunction(name=f"ds:{kb_path}", fn=fn,
                            kind=LfKind.DISTANT_SUPERVISION)


def _loose_name(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


def keyword_alias_lf() -> LabelingFunction:
    """Votes RELATE for same-category pairs with an alias keyword between."""

    def fn(cand: RelationCandidate):
        if cand.subject.category != cand.object.category:
            return ABSTAIN
        middle = [t.lower() for t in cand.middle]
        joined = " ".join(middle)
        if any(kw in middle for kw in ALIAS_KEYWORDS) or \
                "also known as" in joined:
            return RelationClass.RELATE
        return ABSTAIN

    return LabelingFunction(name="keyword:alias", fn=fn, kind=LfKind.KEYWORD)


def verb_keyword_lf(lexicon) -> LabelingFunction:
    """Votes the class of the nearest lexicon verb in the middle segment."""

    def fn(cand: RelationCandidate):
        for t in cand.middle:
            cls = lexicon.class_of(t)
            if cls is not None:
                return cls
        return ABSTAIN

    return LabelingFunction(name="keyword:verb", fn=fn, kind=LfKind.KEYWORD)
