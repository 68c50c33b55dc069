"""In-memory inverted index with Okapi BM25 scoring.

Stands in for the Lucene-backed search service the retrieval protocol assumes.
Scoring:

    idf(t)      = max(0, ln((N - df + 0.5) / (df + 0.5)))
    score(q, d) = sum over distinct query terms t present in d of
                  idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avg_len))

Query terms are treated as a set (duplicates collapsed); the idf floor keeps
scores non-negative. A document "matches" a query iff its score is positive;
`search` returns only matches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import Fact
from .errors import DuplicateIdError, UnknownFactError

SNAPSHOT_FORMAT = "hopqa-index"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Hit:
    fact_id: str
    score: float


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avg_len: float
    N: int
    params: BM25Params = field(default_factory=BM25Params)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return max(0.0, math.log((self.N - df + 0.5) / (df + 0.5)))


def build_index(facts: Sequence[Fact], params: BM25Params | None = None) -> InvertedIndex:
    """Index facts; rebuilding from the same input is bit-identical.

    Facts are processed in id order so postings, lengths, and avg_len do not
    depend on insertion order.
    """
    params = params or BM25Params()
    ordered = sorted(facts, key=lambda f: f.id)
    for a, b in zip(ordered, ordered[1:]):
        if a.id == b.id:
            raise DuplicateIdError(f"duplicate fact id {a.id!r}")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_len: dict[str, int] = {}
    for fact in ordered:
        doc_len[fact.id] = len(fact.tokens)
        counts: dict[str, int] = {}
        for tok in fact.tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term in sorted(counts):
            postings.setdefault(term, []).append((fact.id, counts[term]))
    n = len(ordered)
    avg_len = sum(doc_len[fid] for fid in sorted(doc_len)) / n if n else 0.0
    return InvertedIndex(postings=postings, doc_len=doc_len, avg_len=avg_len, N=n, params=params)


def _tf_part(tf: int, dl: int, avg_len: float, params: BM25Params) -> float:
    denom = tf + params.k1 * (1.0 - params.b + params.b * dl / avg_len)
    return tf * (params.k1 + 1.0) / denom


def bm25_score(index: InvertedIndex, query: Sequence[str], fact_id: str) -> float:
    """Score one indexed document against a query (set semantics)."""
    if fact_id not in index.doc_len:
        raise UnknownFactError(f"fact id {fact_id!r} not indexed")
    score = 0.0
    dl = index.doc_len[fact_id]
    for term in sorted(set(query)):
        idf = index.idf(term)
        if idf == 0.0:
            continue
        for fid, tf in index.postings.get(term, ()):
            if fid == fact_id:
                score += idf * _tf_part(tf, dl, index.avg_len, index.params)
                break
    return score


def search(index: InvertedIndex, query: Sequence[str], k: int) -> list[Hit]:
    """Top-k matching documents, score descending, ties by ascending fact id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[str, float] = {}
    for term in sorted(set(query)):
        idf = index.idf(term)
        if idf == 0.0:
            continue
        for fid, tf in index.postings.get(term, ()):
            scores[fid] = scores.get(fid, 0.0) + idf * _tf_part(
                tf, index.doc_len[fid], index.avg_len, index.params)
    ranked = sorted(((fid, s) for fid, s in scores.items() if s > 0.0),
                    key=lambda item: (-item[1], item[0]))
    return [Hit(fact_id=fid, score=s) for fid, s in ranked[:k]]


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Write a deterministic JSON snapshot with a version header."""
    payload = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "params": {"k1": index.params.k1, "b": index.params.b},
        "N": index.N,
        "avg_len": index.avg_len,
        "doc_len": {fid: index.doc_len[fid] for fid in sorted(index.doc_len)},
        "postings": {term: index.postings[term] for term in sorted(index.postings)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"{path}: not an index snapshot")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {payload.get('version')}")
    postings = {term: [(fid, int(tf)) for fid, tf in rows]
                for term, rows in payload["postings"].items()}
    return InvertedIndex(
        postings=postings,
        doc_len={fid: int(v) for fid, v in payload["doc_len"].items()},
        avg_len=float(payload["avg_len"]),
        N=int(payload["N"]),
        params=BM25Params(k1=float(payload["params"]["k1"]), b=float(payload["params"]["b"])),
    )
