"""End-to-end orchestration: wiring corpus, index, retrieval, ranking, and
fusion together for evaluation, ablation grids, and the facts-count sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig, TrainingSettings
from .corpus import (
    Fact,
    Question,
    fact_lookup,
    load_corpus,
    load_questions,
    load_stopwords,
    resolve_gold_ids,
)
from .encoder import EncoderConfig
from .fusion import FusionModel, KnowledgeSplit, predict, split_common_unique, train_qa
from .index import InvertedIndex, build_index
from .metrics import (
    ConfidenceHistogram,
    EvalReport,
    StepRecalls,
    aggregate_both_in_top10,
    aggregate_recall,
    confidence_histogram,
    qa_accuracy,
)
from .rankdata import balance_and_split, build_dataset, load_scitail, load_word_vectors, similarity_from
from .ranker import RankerModel, train_ranker
from .retrieval import RetrievalTrace, merged_step2_list, retrieve
from .training import FitConfig

log = logging.getLogger(__name__)


@dataclass
class PipelineData:
    facts: dict[str, Fact]
    index: InvertedIndex
    stopwords: frozenset[str]
    train_questions: list[Question]
    dev_questions: list[Question]


def load_pipeline_data(config: PipelineConfig) -> PipelineData:
    if not config.corpus:
        raise ValueError("config.corpus must list at least one fact file")
    facts = []
    for entry in config.corpus:
        facts.extend(load_corpus(entry["path"], entry.get("source", "other")))
    table = fact_lookup(facts)
    return PipelineData(
        facts=table,
        index=build_index(list(table.values())),
        stopwords=load_stopwords(config.stopwords),
        train_questions=load_questions(config.questions["train"]) if config.questions.get("train") else [],
        dev_questions=load_questions(config.questions["dev"]) if config.questions.get("dev") else [],
    )


def run_retrieval(config: PipelineConfig, data: PipelineData, questions: Sequence[Question],
                  *, ranker: RankerModel | None = None,
                  steps: int | None = None) -> dict[str, RetrievalTrace]:
    r = config.retrieval
    return {q.id: retrieve(data.index, q, data.facts, data.stopwords, ranker=ranker,
                           steps=steps if steps is not None else r.steps,
                           k1=r.k1, top_m=r.top_m, k2=r.k2)
            for q in questions}


def step_list(trace: RetrievalTrace, label: str, step: int):
    """The option's final ranked hit list for a retrieval step."""
    opt = trace.option(label)
    return list(opt.f1) if step == 1 else merged_step2_list(opt)


def splits_from_traces(traces: Mapping[str, RetrievalTrace], questions: Sequence[Question],
                       step: int) -> dict[str, KnowledgeSplit]:
    splits = {}
    for q in questions:
        trace = traces[q.id]
        lists = [[(h.fact_id, h.score) for h in step_list(trace, label, step)]
                 for label, _ in q.options]
        splits[q.id] = split_common_unique(lists)
    return splits


def _fit(settings: TrainingSettings, seed: int) -> FitConfig:
    return FitConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                     peak_lr=settings.peak_lr, warmup_steps=settings.warmup_steps,
                     weight_decay=settings.weight_decay, seed=seed)


def _encoder_config(config: PipelineConfig, vocab_size: int) -> EncoderConfig:
    e = config.encoder
    return EncoderConfig(d_model=e.d_model, n_heads=e.n_heads, n_layers=e.n_layers,
                         d_ff=e.d_ff, max_len=e.max_len, vocab_size=vocab_size,
                         seed=config.seed)


def build_rank_dataset_from_config(config: PipelineConfig, data: PipelineData,
                                   traces: Mapping[str, RetrievalTrace]):
    """Positives from annotations, negatives mined off wrong-option step-1
    hits, optional SciTail rows; then a balanced question-disjoint split."""
    annotated = [q for q in data.train_questions if q.answer_key and q.gold_facts]
    wv = load_word_vectors(config.word_vectors) if config.word_vectors else None
    sim = similarity_from(wv, (f.text for f in data.facts.values())) if wv else None
    scitail = load_scitail(config.scitail) if config.scitail else ()
    examples = build_dataset(annotated, traces, data.facts,
                             threshold=config.negatives_threshold, sim=sim,
                             scitail_rows=scitail)
    return balance_and_split(examples, config.seed, config.ranker_training.val_fraction)


def train_ranker_from_config(config: PipelineConfig, data: PipelineData,
                             train_rows, vocab=None) -> RankerModel:
    from .corpus import tokenize
    from .encoder import Vocab

    if vocab is None:
        seqs = [list(f.tokens) for f in data.facts.values()]
        seqs += [tokenize(f"{ex.question_text} {ex.answer_text}") for ex in train_rows]
        vocab = Vocab.build(seqs)
    return train_ranker(train_rows, _fit(config.ranker_training, config.seed),
                        _encoder_config(config, len(vocab)), vocab)


def train_fusion_from_config(config: PipelineConfig, data: PipelineData,
                             questions: Sequence[Question],
                             splits: Mapping[str, KnowledgeSplit], *,
                             use_common: bool = True,
                             facts_per_input: int | None = None) -> FusionModel:
    from .corpus import tokenize
    from .encoder import Vocab

    seqs = [list(f.tokens) for f in data.facts.values()]
    seqs += [tokenize(q.stem) for q in questions]
    seqs += [tokenize(text) for q in questions for _, text in q.options]
    vocab = Vocab.build(seqs)
    cap = config.facts_per_input if facts_per_input is None else facts_per_input
    return train_qa(questions, splits, data.facts, _fit(config.fusion_training, config.seed),
                    _encoder_config(config, len(vocab)), vocab,
                    facts_per_input=cap, use_common=use_common)


def evaluate_qa(model: FusionModel, questions: Sequence[Question],
                splits: Mapping[str, KnowledgeSplit], facts: Mapping[str, Fact], *,
                facts_per_input: int | None = None, use_common: bool | None = None,
                bins: int = 20) -> tuple[float, dict, ConfidenceHistogram]:
    from .fusion import score_options

    predictions, keyed = {}, {}
    for q in questions:
        probs = score_options(model, q, splits[q.id], facts,
                              facts_per_input=facts_per_input, use_common=use_common)
        labels = [lab for lab, _ in q.options]
        predicted = labels[int(np.argmax(probs))]
        predictions[q.id] = ({lab: float(p) for lab, p in zip(labels, probs)}, predicted)
        keyed[q.id] = q.answer_key
    accuracy = qa_accuracy({qid: p[1] for qid, p in predictions.items()}, keyed)
    hist = confidence_histogram(predictions, keyed, bins=bins)
    return accuracy, predictions, hist


def evaluate_retrieval_step(traces: Mapping[str, RetrievalTrace],
                            questions: Sequence[Question], facts: Mapping[str, Fact],
                            step: int) -> StepRecalls:
    """Recall of the gold facts within the correct option's ranked list."""
    rank_lists, gold1, gold2, pairs = {}, {}, {}, {}
    for q in questions:
        if q.answer_key is None or q.id not in traces:
            continue
        ids = [h.fact_id for h in step_list(traces[q.id], q.answer_key, step)]
        rank_lists[q.id] = ids
        resolved = resolve_gold_ids(q, facts)
        gold1[q.id] = resolved[0] if len(resolved) > 0 else None
        gold2[q.id] = resolved[1] if len(resolved) > 1 else None
        pairs[q.id] = (gold1[q.id], gold2[q.id])
    return StepRecalls(
        r5_f1=aggregate_recall(rank_lists, gold1, 5),
        r10_f1=aggregate_recall(rank_lists, gold1, 10),
        r5_f2=aggregate_recall(rank_lists, gold2, 5),
        r10_f2=aggregate_recall(rank_lists, gold2, 10),
        both_r10=aggregate_both_in_top10(rank_lists, pairs),
    )


def facts_sweep(model: FusionModel, questions: Sequence[Question],
                splits: Mapping[str, KnowledgeSplit], facts: Mapping[str, Fact],
                counts: Sequence[int]) -> list[tuple[int, float]]:
    """Accuracy with the top-k facts per input, for each k in counts.

    k = 0 is by construction the same code path as a no-knowledge
    evaluation, so it matches that configuration exactly.
    """
    out = []
    for k in counts:
        accuracy, _, _ = evaluate_qa(model, questions, splits, facts, facts_per_input=k)
        out.append((int(k), accuracy))
    return out


ABLATION_GRID = (
    ("no_knowledge", dict(use_step2=False, use_skr=False, use_kf=False, facts=0)),
    ("step1", dict(use_step2=False, use_skr=False, use_kf=False, facts=None)),
    ("step1_skr", dict(use_step2=False, use_skr=True, use_kf=False, facts=None)),
    ("step1_kf", dict(use_step2=False, use_skr=False, use_kf=True, facts=None)),
    ("step1_kf_skr", dict(use_step2=False, use_skr=True, use_kf=True, facts=None)),
    ("step2", dict(use_step2=True, use_skr=False, use_kf=False, facts=None)),
    ("step2_skr", dict(use_step2=True, use_skr=True, use_kf=False, facts=None)),
    ("step2_kf", dict(use_step2=True, use_skr=False, use_kf=True, facts=None)),
    ("step2_kf_skr", dict(use_step2=True, use_skr=True, use_kf=True, facts=None)),
)


@dataclass
class AblationRow:
    name: str
    use_step2: bool
    use_skr: bool
    use_kf: bool
    facts_per_input: int | None
    accuracy: float


def write_ablation_csv(rows: Iterable[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "use_step2", "use_skr", "use_kf", "facts_per_input", "accuracy"])
        for r in rows:
            writer.writerow([r.name, int(r.use_step2), int(r.use_skr), int(r.use_kf),
                             "" if r.facts_per_input is None else r.facts_per_input,
                             f"{r.accuracy:.6f}"])


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'leg':<14} {'step2':>5} {'skr':>4} {'kf':>3} {'facts':>5} {'acc %':>7}"]
    for r in rows:
        facts = "all" if r.facts_per_input is None else str(r.facts_per_input)
        lines.append(f"{r.name:<14} {int(r.use_step2):>5} {int(r.use_skr):>4} "
                     f"{int(r.use_kf):>3} {facts:>5} {100 * r.accuracy:>7.2f}")
    return "\n".join(lines)


def run_ablation(config: PipelineConfig, data: PipelineData,
                 grid: Sequence[tuple[str, dict]] = ABLATION_GRID,
                 partial_path: str | Path | None = None) -> list[AblationRow]:
    """Train and evaluate one fusion leg per flag combination.

    The ranker (when any leg uses it) is trained once from step-1 mining.
    A failing leg aborts the grid after flushing the completed rows to
    partial_path.
    """
    rows: list[AblationRow] = []
    try:
        raw_step1 = run_retrieval(config, data, list(data.train_questions) + list(data.dev_questions),
                                  steps=1)
        ranker = None
        if any(flags["use_skr"] for _, flags in grid):
            train_rows, _ = build_rank_dataset_from_config(config, data, raw_step1)
            ranker = train_ranker_from_config(config, data, train_rows)
        trace_cache: dict[tuple[int, bool], dict[str, RetrievalTrace]] = {}
        for name, flags in grid:
            steps = 2 if flags["use_step2"] else 1
            key = (steps, flags["use_skr"])
            if key not in trace_cache:
                trace_cache[key] = (
                    raw_step1 if key == (1, False) else
                    run_retrieval(config, data, list(data.train_questions) + list(data.dev_questions),
                                  ranker=ranker if flags["use_skr"] else None, steps=steps))
            traces = trace_cache[key]
            cap = flags["facts"] if flags["facts"] is not None else config.facts_per_input
            train_splits = splits_from_traces(traces, data.train_questions, steps)
            dev_splits = splits_from_traces(traces, data.dev_questions, steps)
            model = train_fusion_from_config(config, data, data.train_questions, train_splits,
                                             use_common=flags["use_kf"], facts_per_input=cap)
            accuracy, _, _ = evaluate_qa(model, data.dev_questions, dev_splits, data.facts,
                                         facts_per_input=cap, bins=config.histogram_bins)
            rows.append(AblationRow(name=name, use_step2=flags["use_step2"],
                                    use_skr=flags["use_skr"], use_kf=flags["use_kf"],
                                    facts_per_input=cap, accuracy=accuracy))
            log.info("ablation leg %s: accuracy %.4f", name, accuracy)
    except Exception:
        if partial_path is not None and rows:
            write_ablation_csv(rows, partial_path)
            log.error("ablation aborted; %d completed rows saved to %s", len(rows), partial_path)
        raise
    return rows
