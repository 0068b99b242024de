"""Geometry and language metrics: IoU, CIDEr-D, grounding accuracy, RL reward.

Tokenization for every text metric is lowercase whitespace splitting; the toy
vocabulary is closed, so anything fancier would only destabilize scores.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError

Expression = tuple[str, ...]

CIDER_MAX_N = 4
CIDER_SIGMA = 6.0

CORPUS_STATS_SCHEMA_VERSION = 1


def tokenize(text: str) -> Expression:
    return tuple(text.lower().split())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, origin top-left, x_max > x_min and y_max > y_min."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def to_json(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> "BBox":
        return cls(*map(float, data))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    if not isinstance(a, BBox) or not isinstance(b, BBox):
        raise ValueError("iou expects BBox arguments")
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _ngrams(tokens: Sequence[str], n: int) -> list[Expression]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies over reference sets, the IDF source for CIDEr.

    ``doc_freq`` maps each n-gram (n = 1..max_n) to the number of reference
    sets containing it; ``num_docs`` is the number of reference sets.
    Immutable after construction.
    """

    doc_freq: Mapping[Expression, int]
    num_docs: int
    max_n: int = CIDER_MAX_N

    def __post_init__(self) -> None:
        if self.num_docs < 1:
            raise ConfigurationError("corpus stats need at least one reference set")
        if any(v < 1 for v in self.doc_freq.values()):
            raise ConfigurationError("document frequencies must be >= 1")


def build_corpus_stats(reference_sets: Iterable[Sequence[Expression]], max_n: int = CIDER_MAX_N) -> CorpusStats:
    """df over reference sets; an n-gram counts once per set it appears in."""
    df: Counter[Expression] = Counter()
    num_docs = 0
    for refs in reference_sets:
        num_docs += 1
        seen: set[Expression] = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(_ngrams(ref, n))
        df.update(seen)
    if num_docs == 0:
        raise ConfigurationError("cannot build corpus stats from an empty corpus")
    return CorpusStats(doc_freq=dict(df), num_docs=num_docs, max_n=max_n)


def save_corpus_stats(stats: CorpusStats, path: Path | str) -> None:
    payload = {
        "schema_version": CORPUS_STATS_SCHEMA_VERSION,
        "kind": "corpus_stats",
        "num_docs": stats.num_docs,
        "max_n": stats.max_n,
        "doc_freq": sorted([list(gram), count] for gram, count in stats.doc_freq.items()),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_corpus_stats(path: Path | str) -> CorpusStats:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "corpus_stats" or payload.get("schema_version") != CORPUS_STATS_SCHEMA_VERSION:
        raise ConfigurationError(f"not a corpus stats file: {path}")
    doc_freq = {tuple(gram): int(count) for gram, count in payload["doc_freq"]}
    return CorpusStats(doc_freq=doc_freq, num_docs=int(payload["num_docs"]), max_n=int(payload["max_n"]))


def _tfidf(tokens: Sequence[str], n: int, stats: CorpusStats) -> tuple[dict[Expression, float], float]:
    log_docs = math.log(stats.num_docs)
    vec: dict[Expression, float] = {}
    for gram, count in Counter(_ngrams(tokens, n)).items():
        vec[gram] = count * (log_docs - math.log(max(1.0, stats.doc_freq.get(gram, 0))))
    norm = math.sqrt(sum(w * w for w in vec.values()))
    return vec, norm


def cider(candidate: Expression, references: Sequence[Expression], stats: CorpusStats) -> float:
    """CIDEr-D: clipped tf-idf cosine per order 1..4, Gaussian length penalty
    (sigma 6), averaged over references then orders, scaled by 10."""
    if stats is None or stats.num_docs < 1:
        raise ConfigurationError("cider requires corpus stats")
    if not references:
        raise ValueError("cider requires at least one reference")
    if not candidate:
        return 0.0
    score = 0.0
    for n in range(1, stats.max_n + 1):
        hyp_vec, hyp_norm = _tfidf(candidate, n, stats)
        acc = 0.0
        for ref in references:
            ref_vec, ref_norm = _tfidf(ref, n, stats)
            if hyp_norm == 0.0 or ref_norm == 0.0:
                sim = 0.0
            else:
                clipped = sum(min(w, ref_vec[g]) * ref_vec[g] for g, w in hyp_vec.items() if g in ref_vec)
                sim = clipped / (hyp_norm * ref_norm)
            delta = float(len(candidate) - len(ref))
            acc += sim * math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
        score += acc / len(references)
    return 10.0 * score / stats.max_n


@dataclass(frozen=True)
class RewardBreakdown:
    """Combined RL reward: grounding IoU plus beta-weighted CIDEr."""

    rec_reward: float
    cider: float
    beta: float
    total: float

    @classmethod
    def combine(cls, rec_reward: float, cider_score: float, beta: float) -> "RewardBreakdown":
        return cls(rec_reward=rec_reward, cider=cider_score, beta=beta, total=rec_reward + beta * cider_score)


def combined_reward(
    gt: BBox,
    pred: BBox,
    gt_text: Expression,
    gen_text: Expression,
    beta: float,
    stats: CorpusStats,
) -> RewardBreakdown:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    rec = iou(gt, pred)
    cid = cider(gen_text, [gt_text], stats)
    return RewardBreakdown.combine(rec, cid, beta)


def rec_accuracy(pairs: Sequence[tuple[BBox, BBox]], threshold: float = 0.5) -> float:
    """Fraction of pairs grounded with IoU strictly above threshold."""
    if not pairs:
        raise ValueError("rec_accuracy needs a nonempty pair list")
    hits = sum(1 for gt, pred in pairs if iou(gt, pred) > threshold)
    return hits / len(pairs)


def human_eval_accuracy(judgments: Sequence[bool]) -> float:
    """Proportion of sessions judged correct."""
    if not judgments:
        raise ValueError("human_eval_accuracy needs a nonempty judgment list")
    return sum(1 for j in judgments if j) / len(judgments)
