"""Training-set construction for the knowledge ranking classifier.

Positive rows come from gold annotations (question gold facts, entailed
SciTail premises). Negative rows are mined from facts retrieved with wrong
answer options, keeping only facts dissimilar to every gold fact (max
similarity below a threshold) and never a verbatim gold sentence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Question, tokenize
from .errors import DatasetDegenerateError, ParseError
from .retrieval import RetrievalTrace

log = logging.getLogger(__name__)

LABEL_RELEVANT = "relevant"
LABEL_IRRELEVANT = "irrelevant"

RELEVANT_PROVENANCES = frozenset({"qasc_gold", "obqa_gold", "scitail_entails"})
IRRELEVANT_PROVENANCES = frozenset({"scitail_neutral", "mined_wrong_answer"})

DEFAULT_SIM_THRESHOLD = 0.70

SimilarityFn = Callable[[str, str], float]


@dataclass(frozen=True)
class RankExample:
    question_text: str
    answer_text: str
    fact_text: str
    label: str
    provenance: str

    def __post_init__(self):
        expected = LABEL_RELEVANT if self.provenance in RELEVANT_PROVENANCES else LABEL_IRRELEVANT
        if self.provenance not in RELEVANT_PROVENANCES | IRRELEVANT_PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.label != expected:
            raise ValueError(f"label {self.label!r} inconsistent with provenance {self.provenance!r}")


@dataclass
class WordVectors:
    vectors: dict[str, np.ndarray]
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("vector dimension must be >= 1")
        for tok, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise ValueError(f"vector for {tok!r} has dim {vec.shape}, expected ({self.dim},)")


def load_word_vectors(path: str | Path) -> WordVectors:
    """Read "token v1 ... vd" lines into a WordVectors table."""
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad vector component: {exc}") from exc
            if vec.size == 0:
                raise ParseError(path, line_no, "token without vector components")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(path, line_no, f"dimension {vec.size} != {dim}")
            vectors[parts[0].lower()] = vec
    if dim is None:
        raise ParseError(path, 0, "empty word-vector file")
    return WordVectors(vectors=vectors, dim=dim)


def _jaccard(a_tokens: Sequence[str], b_tokens: Sequence[str]) -> float:
    sa, sb = set(a_tokens), set(b_tokens)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def doc_similarity(a: str, b: str, wv: WordVectors) -> float:
    """Cosine of mean in-vocabulary token vectors; token Jaccard when a side
    has no vectors at all."""
    a_tokens, b_tokens = tokenize(a), tokenize(b)
    a_vecs = [wv.vectors[t] for t in a_tokens if t in wv.vectors]
    b_vecs = [wv.vectors[t] for t in b_tokens if t in wv.vectors]
    if not a_vecs or not b_vecs:
        return _jaccard(a_tokens, b_tokens)
    va = np.mean(a_vecs, axis=0)
    vb = np.mean(b_vecs, axis=0)
    norm = np.linalg.norm(va) * np.linalg.norm(vb)
    if norm == 0.0:
        return _jaccard(a_tokens, b_tokens)
    return float(np.clip(va @ vb / norm, -1.0, 1.0))


class TfidfSimilarity:
    """Hermetic fallback when no word-vector file is configured: cosine over
    tf-idf weighted token counts, Jaccard when a text has no weight."""

    def __init__(self, texts: Iterable[str]):
        self.df: dict[str, int] = {}
        self.n_docs = 0
        for text in texts:
            self.n_docs += 1
            for tok in set(tokenize(text)):
                self.df[tok] = self.df.get(tok, 0) + 1

    def _idf(self, token: str) -> float:
        return np.log((1 + self.n_docs) / (1 + self.df.get(token, 0))) + 1.0

    def _weights(self, text: str) -> dict[str, float]:
        counts: dict[str, int] = {}
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
        return {tok: tf * self._idf(tok) for tok, tf in counts.items()}

    def __call__(self, a: str, b: str) -> float:
        wa, wb = self._weights(a), self._weights(b)
        dot = sum(wa[t] * wb.get(t, 0.0) for t in wa)
        na = np.sqrt(sum(w * w for w in wa.values()))
        nb = np.sqrt(sum(w * w for w in wb.values()))
        if na == 0.0 or nb == 0.0:
            return _jaccard(tokenize(a), tokenize(b))
        return float(np.clip(dot / (na * nb), -1.0, 1.0))


def similarity_from(wv: WordVectors | None, corpus_texts: Iterable[str] = ()) -> SimilarityFn:
    if wv is not None:
        return lambda a, b: doc_similarity(a, b, wv)
    return TfidfSimilarity(corpus_texts)


def positives_from_annotations(questions: Sequence[Question],
                               provenance: str | None = None) -> list[RankExample]:
    """Gold facts paired with the correct answer, labeled relevant.

    Provenance defaults to qasc_gold for two-fact annotations and to
    obqa_gold for single-fact ones; rows without annotations are skipped
    with a warning.
    """
    out: list[RankExample] = []
    for q in questions:
        if q.answer_key is None or not q.gold_facts:
            log.warning("question %s skipped: missing answer key or gold facts", q.id)
            continue
        prov = provenance or ("qasc_gold" if len(q.gold_facts) >= 2 else "obqa_gold")
        answer = q.option_text(q.answer_key)
        for fact in q.gold_facts:
            out.append(RankExample(q.stem, answer, fact, LABEL_RELEVANT, prov))
    return out


def load_scitail(path: str | Path) -> list[tuple[str, str, str, str]]:
    """Rows of (premise, hypothesis question, hypothesis answer, label) from
    tab-separated or JSON-lines files."""
    path = Path(path)
    rows: list[tuple[str, str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                try:
                    obj = json.loads(line)
                    row = (str(obj["premise"]), str(obj["question"]),
                           str(obj["answer"]), str(obj["label"]))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ParseError(path, line_no, f"bad scitail row: {exc}") from exc
            else:
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise ParseError(path, line_no, f"expected 4 tab-separated fields, got {len(parts)}")
                row = (parts[0], parts[1], parts[2], parts[3])
            if row[3] not in ("entails", "neutral"):
                raise ParseError(path, line_no, f"unknown label {row[3]!r}")
            rows.append(row)
    return rows


def from_scitail(rows: Iterable[tuple[str, str, str, str]]) -> list[RankExample]:
    """entails -> relevant, neutral -> irrelevant."""
    out = []
    for premise, question, answer, label in rows:
        if label == "entails":
            out.append(RankExample(question, answer, premise, LABEL_RELEVANT, "scitail_entails"))
        else:
            out.append(RankExample(question, answer, premise, LABEL_IRRELEVANT, "scitail_neutral"))
    return out


def mine_negatives(question: Question, gold_facts: Sequence[str],
                   wrong_answer_hits: Sequence[tuple[str, Sequence[str]]],
                   threshold: float, sim: SimilarityFn) -> list[RankExample]:
    """Facts retrieved with wrong answers become negatives when dissimilar to
    every gold fact; verbatim gold sentences are always excluded.

    Output is sorted by (answer, fact) so it is invariant under permutation
    of the incoming hit lists.
    """
    if not gold_facts:
        raise ValueError(f"question {question.id}: mine_negatives requires gold facts")
    gold_set = {g.strip() for g in gold_facts}
    emitted: set[tuple[str, str]] = set()
    for answer_text, fact_texts in wrong_answer_hits:
        for fact_text in fact_texts:
            key = (answer_text, fact_text)
            if key in emitted or fact_text.strip() in gold_set:
                continue
            if max(sim(fact_text, gold) for gold in gold_facts) < threshold:
                emitted.add(key)
    return [RankExample(question.stem, ans, fact, LABEL_IRRELEVANT, "mined_wrong_answer")
            for ans, fact in sorted(emitted)]


def dedup_examples(examples: Sequence[RankExample]) -> list[RankExample]:
    """Collapse duplicate (question, answer, fact) rows; relevant wins."""
    best: dict[tuple[str, str, str], RankExample] = {}
    order: list[tuple[str, str, str]] = []
    for ex in examples:
        key = (ex.question_text, ex.answer_text, ex.fact_text)
        if key not in best:
            best[key] = ex
            order.append(key)
        elif best[key].label == LABEL_IRRELEVANT and ex.label == LABEL_RELEVANT:
            best[key] = ex
    return [best[k] for k in order]


def build_dataset(questions: Sequence[Question], traces: Mapping[str, RetrievalTrace],
                  facts: Mapping[str, object], *, threshold: float = DEFAULT_SIM_THRESHOLD,
                  sim: SimilarityFn | None = None,
                  scitail_rows: Iterable[tuple[str, str, str, str]] = ()) -> list[RankExample]:
    """Assemble positives, mined negatives, and SciTail rows, deduplicated."""
    if sim is None:
        texts = [f.text for f in facts.values()]
        texts += [g for q in questions for g in q.gold_facts]
        sim = TfidfSimilarity(texts)
    examples = positives_from_annotations(questions)
    for q in questions:
        if q.answer_key is None or not q.gold_facts or q.id not in traces:
            continue
        wrong_hits = []
        for opt in traces[q.id].options:
            if opt.label == q.answer_key:
                continue
            wrong_hits.append((opt.option_text, [facts[h.fact_id].text for h in opt.f1
                                                 if h.fact_id in facts]))
        examples.extend(mine_negatives(q, q.gold_facts, wrong_hits, threshold, sim))
    examples.extend(from_scitail(scitail_rows))
    return dedup_examples(examples)


def _balance(examples: list[RankExample], rng: np.random.Generator) -> list[RankExample]:
    rel_idx = [i for i, ex in enumerate(examples) if ex.label == LABEL_RELEVANT]
    irr_idx = [i for i, ex in enumerate(examples) if ex.label == LABEL_IRRELEVANT]
    target = min(len(rel_idx), len(irr_idx))
    keep = set()
    for idx_list in (rel_idx, irr_idx):
        if len(idx_list) > target:
            chosen = rng.choice(len(idx_list), size=target, replace=False)
            keep.update(idx_list[i] for i in sorted(chosen))
        else:
            keep.update(idx_list)
    return [ex for i, ex in enumerate(examples) if i in keep]


def balance_and_split(examples: Sequence[RankExample], seed: int,
                      val_fraction: float = 0.1) -> tuple[list[RankExample], list[RankExample]]:
    """Question-disjoint train/validation split with each side exactly
    balanced by uniform down-sampling of its majority class."""
    labels = {ex.label for ex in examples}
    if LABEL_RELEVANT not in labels or LABEL_IRRELEVANT not in labels:
        raise DatasetDegenerateError("both classes must be present before balancing")
    rng = np.random.default_rng(seed)
    keys: list[str] = []
    seen: set[str] = set()
    for ex in examples:
        if ex.question_text not in seen:
            seen.add(ex.question_text)
            keys.append(ex.question_text)
    order = rng.permutation(len(keys))
    n_val = int(round(len(keys) * val_fraction)) if len(keys) > 1 else 0
    val_keys = {keys[i] for i in order[:n_val]}
    train = [ex for ex in examples if ex.question_text not in val_keys]
    val = [ex for ex in examples if ex.question_text in val_keys]
    return _balance(train, rng), _balance(val, rng)


def count_gold_leaks(examples: Sequence[RankExample], questions: Sequence[Question]) -> int:
    """Number of irrelevant rows whose fact text is a gold fact of the row's
    question (must be zero for a well-built dataset)."""
    golds = {q.stem: {g.strip() for g in q.gold_facts} for q in questions}
    return sum(1 for ex in examples
               if ex.label == LABEL_IRRELEVANT
               and ex.fact_text.strip() in golds.get(ex.question_text, ()))


def write_examples(examples: Iterable[RankExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "question": ex.question_text, "answer": ex.answer_text,
                "fact": ex.fact_text, "label": ex.label, "provenance": ex.provenance,
            }, sort_keys=True) + "\n")


def read_examples(path: str | Path) -> list[RankExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(RankExample(row["question"], row["answer"], row["fact"],
                                       row["label"], row["provenance"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(path, line_no, f"bad example row: {exc}") from exc
    return out
