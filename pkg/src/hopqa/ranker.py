"""Sentence-pair relevance classifier used to re-rank retrieved facts.

Input layout: [CLS] question+answer tokens [SEP] fact tokens [SEP], with the
fact tail truncated first on overflow so the query side stays intact. The
[CLS] vector feeds a (d_model x 2) classifier; facts are ranked by the
probability of the relevant class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Fact, tokenize
from .encoder import (
    EncoderConfig,
    EncoderParams,
    Vocab,
    encode_graph,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .index import Hit
from .rankdata import LABEL_RELEVANT, RankExample
from .training import AdamState, FitConfig, TrainSchedule, train_step

log = logging.getLogger(__name__)

IRRELEVANT_CLASS, RELEVANT_CLASS = 0, 1

HEAD_W, HEAD_B = "head.cls.W", "head.cls.b"

DEFAULT_ENCODER = dict(d_model=32, n_heads=2, n_layers=1, d_ff=64, max_len=64)


@dataclass
class RankerModel:
    params: EncoderParams
    vocab: Vocab
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def config(self) -> EncoderConfig:
        return self.params.config

    def rerank_hits(self, question_text: str, answer_text: str,
                    hits: Sequence[Hit], facts: Mapping[str, Fact]) -> list[Hit]:
        return rerank(self, question_text, answer_text, hits, facts)


def new_ranker(vocab: Vocab, config: EncoderConfig | None = None, seed: int = 0) -> RankerModel:
    """Fresh model: random encoder, zero classifier (scores exactly 0.5)."""
    if config is None:
        config = EncoderConfig(vocab_size=len(vocab), seed=seed, **DEFAULT_ENCODER)
    params = init_params(config)
    d = config.d_model
    params.arrays[HEAD_W] = np.zeros((d, 2))
    params.arrays[HEAD_B] = np.zeros(2)
    return RankerModel(params=params, vocab=vocab)


def build_rank_input(question_text: str, answer_text: str, fact_text: str,
                     vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and mask for one (question, answer, fact) pair."""
    sa = tokenize(question_text) + tokenize(answer_text)
    sb = tokenize(fact_text)
    budget = max_len - 3
    if len(sa) + len(sb) > budget:
        sb = sb[:max(0, budget - len(sa))]
    if len(sa) > budget:
        sa = sa[:budget]
    ids = [vocab.cls_id] + vocab.encode(sa) + [vocab.sep_id] + vocab.encode(sb) + [vocab.sep_id]
    return np.array(ids, dtype=np.int64), np.ones(len(ids), dtype=np.int64)


def _pad_batch(rows: Sequence[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
        mask[i, :len(row)] = 1
    return ids, mask


def _logits(model: RankerModel, pairs: Sequence[tuple[str, str, str]]) -> np.ndarray:
    rows = [build_rank_input(q, a, f, model.vocab, model.config.max_len)[0] for q, a, f in pairs]
    ids, mask = _pad_batch(rows, model.vocab.pad_id)
    tensors = {name: ad.tensor(arr) for name, arr in model.params.arrays.items()}
    hidden = encode_graph(tensors, model.config, ids, mask)
    cls = ad.take(hidden, 0, axis=1)
    logits = ad.add(ad.matmul(cls, tensors[HEAD_W]), tensors[HEAD_B])
    return logits.data


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rel_score(model: RankerModel, question_text: str, answer_text: str,
              fact_text: str) -> float:
    """P(relevant) for one pair; the two class probabilities sum to one."""
    probs = _softmax_rows(_logits(model, [(question_text, answer_text, fact_text)]))
    return float(probs[0, RELEVANT_CLASS])


def rel_scores(model: RankerModel, question_text: str, answer_text: str,
               fact_texts: Sequence[str]) -> np.ndarray:
    if len(fact_texts) == 0:
        return np.zeros(0)
    probs = _softmax_rows(_logits(model, [(question_text, answer_text, f) for f in fact_texts]))
    return probs[:, RELEVANT_CLASS]


def rerank(model: RankerModel, question_text: str, answer_text: str,
           hits: Sequence[Hit], facts: Mapping[str, Fact]) -> list[Hit]:
    """Reorder hits by descending P(relevant); stable for tied scores."""
    if not hits:
        return []
    probs = rel_scores(model, question_text, answer_text,
                       [facts[h.fact_id].text for h in hits])
    order = sorted(range(len(hits)), key=lambda i: (-probs[i], i, hits[i].fact_id))
    return [Hit(fact_id=hits[i].fact_id, score=float(probs[i])) for i in order]


def _ranker_loss(tensors, batch):
    ids, mask, labels, config = batch
    hidden = encode_graph(tensors, config, ids, mask)
    cls = ad.take(hidden, 0, axis=1)
    logits = ad.add(ad.matmul(cls, tensors[HEAD_W]), tensors[HEAD_B])
    return ad.cross_entropy_logits(logits, labels, "mean")


def train_ranker(examples: Sequence[RankExample], fit: FitConfig | None = None,
                 config: EncoderConfig | None = None,
                 vocab: Vocab | None = None) -> RankerModel:
    """Cross-entropy training over the two-class head.

    Batches are grouped by input length for padding efficiency; batch order
    is reshuffled each epoch from the fit seed, so runs are deterministic.
    """
    if not examples:
        raise ValueError("train_ranker requires a non-empty dataset")
    fit = fit or FitConfig()
    if vocab is None:
        vocab = Vocab.build([tokenize(f"{ex.question_text} {ex.answer_text} {ex.fact_text}")
                             for ex in examples])
    model = new_ranker(vocab, config, seed=fit.seed)
    cfg = model.config

    rows = [build_rank_input(ex.question_text, ex.answer_text, ex.fact_text, vocab, cfg.max_len)[0]
            for ex in examples]
    labels = np.array([RELEVANT_CLASS if ex.label == LABEL_RELEVANT else IRRELEVANT_CLASS
                       for ex in examples], dtype=np.int64)
    order = sorted(range(len(rows)), key=lambda i: (len(rows[i]), i))
    batches = []
    for start in range(0, len(order), fit.batch_size):
        chunk = order[start:start + fit.batch_size]
        ids, mask = _pad_batch([rows[i] for i in chunk], vocab.pad_id)
        batches.append((ids, mask, labels[chunk], cfg))

    total = fit.epochs * len(batches)
    schedule = TrainSchedule(peak_lr=fit.peak_lr,
                             warmup_steps=min(fit.warmup_steps, max(0, total - 1)),
                             total_steps=total, weight_decay=fit.weight_decay)
    state = AdamState()
    rng = np.random.default_rng(fit.seed)
    for epoch in range(fit.epochs):
        epoch_loss = 0.0
        for b in rng.permutation(len(batches)):
            epoch_loss += train_step(model.params, _ranker_loss, batches[b], state, schedule)
        model.history.append(epoch_loss / len(batches))
    return model


def eval_ranker(model: RankerModel, examples: Sequence[RankExample]) -> float:
    """Classification accuracy at the argmax threshold."""
    if not examples:
        raise ValueError("eval_ranker requires a non-empty dataset")
    logits = _logits(model, [(ex.question_text, ex.answer_text, ex.fact_text) for ex in examples])
    preds = logits.argmax(axis=-1)
    labels = np.array([RELEVANT_CLASS if ex.label == LABEL_RELEVANT else IRRELEVANT_CLASS
                       for ex in examples])
    return float((preds == labels).mean())


def save_ranker(model: RankerModel, path: str | Path) -> None:
    save_checkpoint(path, "ranker", model.config, model.vocab, model.params.arrays)


def load_ranker(path: str | Path) -> RankerModel:
    model_type, config, vocab, arrays, _ = load_checkpoint(path)
    if model_type != "ranker":
        raise ValueError(f"{path}: checkpoint is a {model_type!r} model, expected ranker")
    return RankerModel(params=EncoderParams(config=config, arrays=arrays), vocab=vocab)


def score_pairs_file(model: RankerModel, in_path: str | Path, out_path: str | Path) -> int:
    """Score JSON-lines rows {"question","answer","fact"}, appending
    "p_relevant" to each row; returns the number scored."""
    count = 0
    with open(in_path, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            row["p_relevant"] = rel_score(model, row["question"], row["answer"], row["fact"])
            dst.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count
