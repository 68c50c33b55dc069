"""Two-step query generation and per-option retrieval orchestration.

Step 1 queries concatenate question and answer-option tokens, minus
stopwords, order intact. Step 2 takes the symmetric difference between the
question+option token set and a retrieved fact's token set so the query
keeps only the uncovered words from each side; the resulting set is rendered
in first-appearance order over (question, option, fact).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .corpus import Fact, Question, remove_stopwords, tokenize
from .errors import EmptyQueryError, RetrievalFailedError
from .index import Hit, InvertedIndex, search


class HitReranker(Protocol):
    """Anything that can reorder hits for a (question, answer) pair."""

    def rerank_hits(self, question_text: str, answer_text: str,
                    hits: Sequence[Hit], facts: Mapping[str, Fact]) -> list[Hit]: ...


@dataclass
class OptionTrace:
    label: str
    option_text: str
    step1_query: tuple[str, ...]
    f1: list[Hit] = field(default_factory=list)
    step2_queries: list[tuple[str, ...]] = field(default_factory=list)
    f2: list[Hit] = field(default_factory=list)


@dataclass
class RetrievalTrace:
    question_id: str
    options: list[OptionTrace]

    def option(self, label: str) -> OptionTrace:
        for opt in self.options:
            if opt.label == label:
                return opt
        raise KeyError(label)


def make_step1_query(stem: str, option_text: str, stopwords: Iterable[str]) -> list[str]:
    """tokenize(stem) ++ tokenize(option), stopwords removed, order intact."""
    query = remove_stopwords(tokenize(stem) + tokenize(option_text), stopwords)
    if not query:
        raise EmptyQueryError("step-1 query empty after stopword removal")
    return query


def make_step2_query(stem: str, option_text: str, fact: Fact | str,
                     stopwords: Iterable[str]) -> list[str]:
    """Symmetric difference of the question+option and fact token sets.

    Rendered in first-appearance order over the concatenation
    (question, option, fact). Raises EmptyQueryError when the sets coincide.
    """
    qa_tokens = remove_stopwords(tokenize(stem) + tokenize(option_text), stopwords)
    fact_tokens = list(fact.tokens) if isinstance(fact, Fact) else tokenize(fact)
    fact_tokens = remove_stopwords(fact_tokens, stopwords)
    qa_set, fact_set = set(qa_tokens), set(fact_tokens)
    keep = (qa_set | fact_set) - (qa_set & fact_set)
    if not keep:
        raise EmptyQueryError("step-2 query empty: fact covers the question tokens exactly")
    query, seen = [], set()
    for tok in qa_tokens + fact_tokens:
        if tok in keep and tok not in seen:
            query.append(tok)
            seen.add(tok)
    return query


def _merge_max_score(hit_lists: Iterable[Sequence[Hit]]) -> list[Hit]:
    best: dict[str, float] = {}
    for hits in hit_lists:
        for hit in hits:
            if hit.fact_id not in best or hit.score > best[hit.fact_id]:
                best[hit.fact_id] = hit.score
    ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))
    return [Hit(fact_id=fid, score=s) for fid, s in ranked]


def merged_step2_list(option: OptionTrace) -> list[Hit]:
    """The option's final step-2 list: F1 and F2 merged, max score wins."""
    return _merge_max_score([option.f1, option.f2])


def retrieve(index: InvertedIndex, question: Question, facts: Mapping[str, Fact],
             stopwords: Iterable[str], *, ranker: HitReranker | None = None,
             steps: int = 2, k1: int = 50, top_m: int = 10, k2: int = 50) -> RetrievalTrace:
    """Run step-1 (and optionally step-2) retrieval for every answer option.

    Step 1 searches the top k1 per option and, when a ranker is given,
    re-ranks them. Step 2 builds one query per top_m ranked step-1 fact
    (facts whose query collapses are skipped without replacement), merges the
    per-query results with max-score dedup, and re-ranks the merged list.
    """
    if steps not in (1, 2):
        raise ValueError("steps must be 1 or 2")
    options: list[OptionTrace] = []
    any_query = False
    for label, text in question.options:
        try:
            q1 = make_step1_query(question.stem, text, stopwords)
        except EmptyQueryError:
            options.append(OptionTrace(label=label, option_text=text, step1_query=()))
            continue
        any_query = True
        f1 = search(index, q1, k1)
        if ranker is not None and f1:
            f1 = ranker.rerank_hits(question.stem, text, f1, facts)
        trace = OptionTrace(label=label, option_text=text, step1_query=tuple(q1), f1=f1)
        if steps == 2:
            per_fact_hits: list[list[Hit]] = []
            for hit in f1[:top_m]:
                try:
                    q2 = make_step2_query(question.stem, text, facts[hit.fact_id], stopwords)
                except EmptyQueryError:
                    continue
                trace.step2_queries.append(tuple(q2))
                per_fact_hits.append(search(index, q2, k2))
            f2 = _merge_max_score(per_fact_hits)
            if ranker is not None and f2:
                f2 = ranker.rerank_hits(question.stem, text, f2, facts)
            trace.f2 = f2
        options.append(trace)
    if not any_query:
        raise RetrievalFailedError(f"question {question.id}: every option query was empty")
    return RetrievalTrace(question_id=question.id, options=options)


def write_traces(traces: Iterable[RetrievalTrace], path: str | Path) -> None:
    """One JSON line per (question, option) with queries, fact ids, scores."""
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for opt in trace.options:
                row = {
                    "question_id": trace.question_id,
                    "option_label": opt.label,
                    "option_text": opt.option_text,
                    "step1_query": list(opt.step1_query),
                    "f1": [{"fact_id": h.fact_id, "score": h.score} for h in opt.f1],
                    "step2_queries": [list(q) for q in opt.step2_queries],
                    "f2": [{"fact_id": h.fact_id, "score": h.score} for h in opt.f2],
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_traces(path: str | Path) -> dict[str, RetrievalTrace]:
    traces: dict[str, RetrievalTrace] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            qid = row["question_id"]
            opt = OptionTrace(
                label=row["option_label"],
                option_text=row.get("option_text", ""),
                step1_query=tuple(row["step1_query"]),
                f1=[Hit(h["fact_id"], h["score"]) for h in row["f1"]],
                step2_queries=[tuple(q) for q in row["step2_queries"]],
                f2=[Hit(h["fact_id"], h["score"]) for h in row["f2"]],
            )
            traces.setdefault(qid, RetrievalTrace(question_id=qid, options=[])).options.append(opt)
    return traces
