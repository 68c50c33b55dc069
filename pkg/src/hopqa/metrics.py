"""Evaluation metrics: Recall@N over gold facts, QA accuracy, and the
prediction-confidence histogram split by correctness."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_HISTOGRAM_BINS = 20


def recall_at_n(ranked_ids: Sequence[str], gold_id: str, n: int) -> int:
    """1 iff the gold fact id appears within the first n ranked ids."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return int(gold_id in ranked_ids[:n])


def both_in_top_k(ranked_ids: Sequence[str], gold_a: str, gold_b: str, k: int = 10) -> int:
    head = set(ranked_ids[:k])
    return int(gold_a in head and gold_b in head)


@dataclass
class RecallSummary:
    """Mean recall over questions that carry the needed annotation."""

    value: float | None
    n_scored: int
    n_skipped: int


def aggregate_recall(rank_lists: Mapping[str, Sequence[str]],
                     golds: Mapping[str, str | None], n: int) -> RecallSummary:
    """Mean of recall_at_n over questions; unresolved golds are skipped and
    counted in the coverage note."""
    scored, skipped, total = 0, 0, 0.0
    for qid, ranked in rank_lists.items():
        gold = golds.get(qid)
        if gold is None:
            skipped += 1
            continue
        total += recall_at_n(ranked, gold, n)
        scored += 1
    return RecallSummary(value=total / scored if scored else None,
                         n_scored=scored, n_skipped=skipped)


def aggregate_both_in_top10(rank_lists: Mapping[str, Sequence[str]],
                            gold_pairs: Mapping[str, tuple[str | None, str | None]]) -> RecallSummary:
    scored, skipped, total = 0, 0, 0.0
    for qid, ranked in rank_lists.items():
        pair = gold_pairs.get(qid, (None, None))
        if pair[0] is None or pair[1] is None:
            skipped += 1
            continue
        total += both_in_top_k(ranked, pair[0], pair[1], 10)
        scored += 1
    return RecallSummary(value=total / scored if scored else None,
                         n_scored=scored, n_skipped=skipped)


def qa_accuracy(predictions: Mapping[str, str], keys: Mapping[str, str]) -> float:
    """Fraction of argmax predictions matching the answer key."""
    if set(predictions) != set(keys):
        missing = set(predictions) ^ set(keys)
        raise ValueError(f"prediction/key id mismatch: {sorted(missing)[:5]}")
    if not keys:
        raise ValueError("no predictions to score")
    return sum(predictions[qid] == keys[qid] for qid in keys) / len(keys)


@dataclass
class ConfidenceHistogram:
    """Counts of prediction confidence (max option probability) over uniform
    bins of [0, 1], partitioned by answer correctness."""

    edges: list[float]
    correct_counts: list[int]
    incorrect_counts: list[int]

    @property
    def total(self) -> int:
        return sum(self.correct_counts) + sum(self.incorrect_counts)


def confidence_histogram(predictions: Mapping[str, tuple[dict[str, float], str]],
                         keys: Mapping[str, str],
                         bins: int = DEFAULT_HISTOGRAM_BINS) -> ConfidenceHistogram:
    """predictions: qid -> (per-option probabilities, predicted label)."""
    if set(predictions) != set(keys):
        missing = set(predictions) ^ set(keys)
        raise ValueError(f"prediction/key id mismatch: {sorted(missing)[:5]}")
    edges = np.linspace(0.0, 1.0, bins + 1)
    correct, incorrect = [], []
    for qid, (probs, label) in predictions.items():
        confidence = max(probs.values())
        (correct if label == keys[qid] else incorrect).append(confidence)
    c_counts, _ = np.histogram(correct, bins=edges)
    i_counts, _ = np.histogram(incorrect, bins=edges)
    return ConfidenceHistogram(edges=[float(e) for e in edges],
                               correct_counts=[int(c) for c in c_counts],
                               incorrect_counts=[int(c) for c in i_counts])


def write_histogram_csv(hist: ConfidenceHistogram, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "correct_count", "incorrect_count"])
        for i in range(len(hist.correct_counts)):
            writer.writerow([f"{hist.edges[i]:.6f}", f"{hist.edges[i + 1]:.6f}",
                             hist.correct_counts[i], hist.incorrect_counts[i]])


@dataclass
class StepRecalls:
    r5_f1: RecallSummary
    r10_f1: RecallSummary
    r5_f2: RecallSummary
    r10_f2: RecallSummary
    both_r10: RecallSummary


@dataclass
class EvalReport:
    step1: StepRecalls | None = None
    step2: StepRecalls | None = None
    ranker_accuracy: float | None = None
    qa_accuracy: float | None = None
    histogram: ConfidenceHistogram | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _fmt(summary: RecallSummary | None) -> str:
    if summary is None or summary.value is None:
        return "   N/A"
    return f"{100 * summary.value:6.2f}"


def format_report_table(report: EvalReport) -> str:
    """Aligned-text summary of the recall grid and accuracies."""
    lines = ["step    F1:R@5  F1:R@10  F2:R@5  F2:R@10  both:R@10"]
    for name, step in (("step-1", report.step1), ("step-2", report.step2)):
        if step is None:
            continue
        lines.append(f"{name}  {_fmt(step.r5_f1)}   {_fmt(step.r10_f1)}  {_fmt(step.r5_f2)}"
                     f"   {_fmt(step.r10_f2)}     {_fmt(step.both_r10)}")
    if report.ranker_accuracy is not None:
        lines.append(f"ranker accuracy: {100 * report.ranker_accuracy:.2f}")
    if report.qa_accuracy is not None:
        lines.append(f"qa accuracy:     {100 * report.qa_accuracy:.2f}")
    if report.histogram is not None:
        lines.append(f"histogram: {report.histogram.total} predictions over "
                     f"{len(report.histogram.correct_counts)} bins")
    return "\n".join(lines)
