"""Knowledge-fusion answer scoring.

Retrieved facts are split into a common pool C (facts surfacing for two or
more answer options, scored count x max rank score) and per-option unique
lists U_i. Each option gets a per-answer encoding of (U_i, question, option);
one shared encoding covers (question, all options, C). The concatenated
[CLS] pair feeds FF2(LayerNorm(GeLU(FF1(.)))) to produce one logit per
option, softmaxed across options.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Fact, Question, tokenize
from .encoder import (
    EncoderConfig,
    EncoderParams,
    Vocab,
    encode,
    encode_graph,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .errors import InputTooLongError
from .index import Hit
from .training import AdamState, FitConfig, TrainSchedule, train_step

FF1_W, FF1_B = "head.ff1.W", "head.ff1.b"
LN_G, LN_B = "head.ln.g", "head.ln.b"
FF2_W, FF2_B = "head.ff2.W", "head.ff2.b"

DEFAULT_ENCODER = dict(d_model=32, n_heads=2, n_layers=1, d_ff=64, max_len=96)


@dataclass
class KnowledgeSplit:
    """Common facts with their fused scores, plus per-option unique lists."""

    common: list[tuple[str, float]]
    unique: list[list[str]]

    def capped(self, facts_per_input: int | None) -> "KnowledgeSplit":
        if facts_per_input is None:
            return self
        return KnowledgeSplit(common=self.common[:facts_per_input],
                              unique=[u[:facts_per_input] for u in self.unique])


def split_common_unique(option_hits: Sequence[Sequence[Hit | tuple[str, float]]]) -> KnowledgeSplit:
    """Facts in >= 2 option lists go to C scored (appearance count x max
    score), sorted descending with id tie-breaks; singletons keep their
    option's rank order."""
    if len(option_hits) < 2:
        raise ValueError("split_common_unique needs at least two option lists")
    normalized: list[list[tuple[str, float]]] = []
    for hits in option_hits:
        rows = [(h.fact_id, h.score) if isinstance(h, Hit) else (h[0], float(h[1])) for h in hits]
        ids = [fid for fid, _ in rows]
        if len(ids) != len(set(ids)):
            raise ValueError("option hit lists must be individually deduplicated")
        normalized.append(rows)
    count: dict[str, int] = {}
    best: dict[str, float] = {}
    for rows in normalized:
        for fid, score in rows:
            count[fid] = count.get(fid, 0) + 1
            best[fid] = max(best.get(fid, float("-inf")), score)
    common = sorted(((fid, count[fid] * best[fid]) for fid in count if count[fid] >= 2),
                    key=lambda item: (-item[1], item[0]))
    unique = [[fid for fid, _ in rows if count[fid] == 1] for rows in normalized]
    return KnowledgeSplit(common=common, unique=unique)


def _greedy_fact_tokens(fact_texts: Sequence[str], budget: int) -> list[str]:
    """Whole facts in order while they fit; the boundary fact loses its tail."""
    out: list[str] = []
    for text in fact_texts:
        if budget <= 0:
            break
        toks = tokenize(text)
        take = toks if len(toks) <= budget else toks[:budget]
        out.extend(take)
        budget -= len(take)
    return out


def build_per_answer_input(u_fact_texts: Sequence[str], stem: str, answer_text: str,
                           vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] unique-knowledge question [SEP] answer [SEP].

    Knowledge is dropped lowest-ranked-first on overflow; the question and
    answer are never truncated, and InputTooLongError fires if they alone
    exceed max_len.
    """
    q_toks, a_toks = tokenize(stem), tokenize(answer_text)
    base = 3 + len(q_toks) + len(a_toks)
    if base > max_len:
        raise InputTooLongError(f"question+answer need {base} tokens, max_len={max_len}")
    knowledge = _greedy_fact_tokens(u_fact_texts, max_len - base)
    ids = ([vocab.cls_id] + vocab.encode(knowledge) + vocab.encode(q_toks)
           + [vocab.sep_id] + vocab.encode(a_toks) + [vocab.sep_id])
    return np.array(ids, dtype=np.int64), np.ones(len(ids), dtype=np.int64)


def build_common_input(stem: str, options: Sequence[tuple[str, str]],
                       c_fact_texts: Sequence[str], vocab: Vocab,
                       max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] question [SEP] option_1 [SEP] ... option_n [SEP] common-knowledge [SEP].

    Option segments are laid out in label order so the encoding does not
    depend on how the option list happens to be ordered; common facts are
    dropped lowest-scored-first on overflow.
    """
    ordered = sorted(options, key=lambda item: item[0])
    q_toks = tokenize(stem)
    opt_toks = [tokenize(text) for _, text in ordered]
    base = len(ordered) + 3 + len(q_toks) + sum(len(t) for t in opt_toks)
    if base > max_len:
        raise InputTooLongError(f"question+options need {base} tokens, max_len={max_len}")
    knowledge = _greedy_fact_tokens(c_fact_texts, max_len - base)
    ids = [vocab.cls_id] + vocab.encode(q_toks) + [vocab.sep_id]
    for toks in opt_toks:
        ids += vocab.encode(toks) + [vocab.sep_id]
    ids += vocab.encode(knowledge) + [vocab.sep_id]
    return np.array(ids, dtype=np.int64), np.ones(len(ids), dtype=np.int64)


@dataclass
class FusionModel:
    params: EncoderParams
    vocab: Vocab
    use_common: bool = True
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def config(self) -> EncoderConfig:
        return self.params.config


def new_fusion(vocab: Vocab, config: EncoderConfig | None = None, seed: int = 0,
               use_common: bool = True) -> FusionModel:
    """Fresh model: random encoder/FF1, zero FF2 (uniform initial scores)."""
    if config is None:
        config = EncoderConfig(vocab_size=len(vocab), seed=seed, **DEFAULT_ENCODER)
    params = init_params(config)
    d = config.d_model
    rng = np.random.default_rng(config.seed + 1)
    params.arrays[FF1_W] = rng.normal(0.0, 0.05, size=(2 * d, d))
    params.arrays[FF1_B] = np.zeros(d)
    params.arrays[LN_G] = np.ones(d)
    params.arrays[LN_B] = np.zeros(d)
    params.arrays[FF2_W] = np.zeros((d, 1))
    params.arrays[FF2_B] = np.zeros(1)
    return FusionModel(params=params, vocab=vocab, use_common=use_common)


def _head_logits(tensors, cls_a, cls_c):
    v = ad.concat([cls_a, cls_c], axis=-1)
    h = ad.gelu(ad.add(ad.matmul(v, tensors[FF1_W]), tensors[FF1_B]))
    h = ad.layer_norm(h, tensors[LN_G], tensors[LN_B])
    return ad.add(ad.matmul(h, tensors[FF2_W]), tensors[FF2_B])


def score_options(model: FusionModel, question: Question, split: KnowledgeSplit,
                  facts: Mapping[str, Fact], *, facts_per_input: int | None = None,
                  use_common: bool | None = None) -> np.ndarray:
    """Probability per answer option, in the question's option order.

    Runs one encoder pass per option plus one for the shared common input
    (n+1 total); with use_common off, the common half of the fused vector is
    zeroed and its encoder pass is skipped.
    """
    use_common = model.use_common if use_common is None else use_common
    cfg, vocab = model.config, model.vocab
    split = split.capped(facts_per_input)
    if len(split.unique) != len(question.options):
        raise ValueError("split has a different option count than the question")

    def texts(fids: Iterable[str]) -> list[str]:
        return [facts[f].text for f in fids if f in facts]

    cls_rows = []
    for (label, option_text), u_fids in zip(question.options, split.unique):
        ids, mask = build_per_answer_input(texts(u_fids), question.stem, option_text,
                                           vocab, cfg.max_len)
        cls_rows.append(encode(model.params, ids, mask).cls)
    if use_common:
        c_ids, c_mask = build_common_input(question.stem, question.options,
                                           texts(fid for fid, _ in split.common),
                                           vocab, cfg.max_len)
        cls_c = encode(model.params, c_ids, c_mask).cls
    else:
        cls_c = np.zeros(cfg.d_model)
    tensors = {name: ad.tensor(arr) for name, arr in model.params.arrays.items()}
    logits = _head_logits(tensors, ad.tensor(np.stack(cls_rows)),
                          ad.tensor(np.tile(cls_c, (len(cls_rows), 1)))).data[:, 0]
    z = np.exp(logits - logits.max())
    return z / z.sum()


def predict(model: FusionModel, question: Question, split: KnowledgeSplit,
            facts: Mapping[str, Fact], *, facts_per_input: int | None = None,
            use_common: bool | None = None) -> tuple[str, float]:
    """Argmax option label and its probability; ties go to the earlier option."""
    probs = score_options(model, question, split, facts,
                          facts_per_input=facts_per_input, use_common=use_common)
    idx = int(np.argmax(probs))
    return question.options[idx][0], float(probs[idx])


def _fusion_loss(tensors, batch):
    (pa_ids, pa_mask, c_ids, c_mask, row_to_question, targets, n_options,
     config, use_common) = batch
    hidden = encode_graph(tensors, config, pa_ids, pa_mask)
    cls_a = ad.take(hidden, 0, axis=1)
    if use_common:
        cls_c = ad.take(encode_graph(tensors, config, c_ids, c_mask), 0, axis=1)
        cls_c_rows = ad.gather(cls_c, row_to_question)
    else:
        cls_c_rows = ad.tensor(np.zeros((pa_ids.shape[0], config.d_model)))
    logits = ad.reshape(_head_logits(tensors, cls_a, cls_c_rows), (-1, n_options))
    return ad.cross_entropy_logits(logits, targets, "mean")


def _pad_rows(rows: Sequence[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
        mask[i, :len(row)] = 1
    return ids, mask


def _question_batch(model: FusionModel, questions: Sequence[Question],
                    splits: Mapping[str, KnowledgeSplit], facts: Mapping[str, Fact],
                    facts_per_input: int | None, use_common: bool):
    cfg, vocab = model.config, model.vocab
    n = len(questions[0].options)
    pa_rows, c_rows, row_to_question, targets = [], [], [], []
    for qi, q in enumerate(questions):
        split = splits[q.id].capped(facts_per_input)
        labels = [lab for lab, _ in q.options]
        targets.append(labels.index(q.answer_key))
        for (label, option_text), u_fids in zip(q.options, split.unique):
            texts = [facts[f].text for f in u_fids if f in facts]
            ids, _ = build_per_answer_input(texts, q.stem, option_text, vocab, cfg.max_len)
            pa_rows.append(ids)
            row_to_question.append(qi)
        c_texts = [facts[f].text for f, _ in split.common if f in facts]
        c_ids, _ = build_common_input(q.stem, q.options, c_texts, vocab, cfg.max_len)
        c_rows.append(c_ids)
    pa_ids, pa_mask = _pad_rows(pa_rows, vocab.pad_id)
    c_ids, c_mask = _pad_rows(c_rows, vocab.pad_id)
    return (pa_ids, pa_mask, c_ids, c_mask, np.array(row_to_question),
            np.array(targets), n, cfg, use_common)


def train_qa(questions: Sequence[Question], splits: Mapping[str, KnowledgeSplit],
             facts: Mapping[str, Fact], fit: FitConfig | None = None,
             config: EncoderConfig | None = None, vocab: Vocab | None = None,
             *, facts_per_input: int | None = None,
             use_common: bool = True) -> FusionModel:
    """Cross-entropy training over the option softmax.

    Gradients flow through the shared common encoding once per option use.
    Questions are batched by option arity; batch order reshuffles each epoch
    from the fit seed.
    """
    fit = fit or FitConfig()
    missing = [q.id for q in questions if q.answer_key is None]
    if missing:
        raise ValueError(f"questions without answer keys: {missing[:5]}")
    if not questions:
        raise ValueError("train_qa requires questions")
    if vocab is None:
        seqs = [tokenize(q.stem) for q in questions]
        seqs += [tokenize(text) for q in questions for _, text in q.options]
        seqs += [list(f.tokens) for f in facts.values()]
        vocab = Vocab.build(seqs)
    model = new_fusion(vocab, config, seed=fit.seed, use_common=use_common)

    by_arity: dict[int, list[Question]] = {}
    for q in questions:
        by_arity.setdefault(len(q.options), []).append(q)
    batches = []
    for arity in sorted(by_arity):
        group = by_arity[arity]
        for start in range(0, len(group), fit.batch_size):
            batches.append(_question_batch(model, group[start:start + fit.batch_size],
                                           splits, facts, facts_per_input, use_common))
    total = fit.epochs * len(batches)
    schedule = TrainSchedule(peak_lr=fit.peak_lr,
                             warmup_steps=min(fit.warmup_steps, max(0, total - 1)),
                             total_steps=total, weight_decay=fit.weight_decay)
    state = AdamState()
    rng = np.random.default_rng(fit.seed)
    for _ in range(fit.epochs):
        epoch_loss = 0.0
        for b in rng.permutation(len(batches)):
            epoch_loss += train_step(model.params, _fusion_loss, batches[b], state, schedule)
        model.history.append(epoch_loss / len(batches))
    return model


def qa_train_accuracy(model: FusionModel, questions: Sequence[Question],
                      splits: Mapping[str, KnowledgeSplit], facts: Mapping[str, Fact],
                      *, facts_per_input: int | None = None,
                      use_common: bool | None = None) -> float:
    hits = 0
    for q in questions:
        label, _ = predict(model, q, splits[q.id], facts,
                           facts_per_input=facts_per_input, use_common=use_common)
        hits += label == q.answer_key
    return hits / len(questions)


def save_fusion(model: FusionModel, path: str | Path) -> None:
    save_checkpoint(path, "fusion", model.config, model.vocab, model.params.arrays,
                    extra={"use_common": model.use_common})


def load_fusion(path: str | Path) -> FusionModel:
    model_type, config, vocab, arrays, extra = load_checkpoint(path)
    if model_type != "fusion":
        raise ValueError(f"{path}: checkpoint is a {model_type!r} model, expected fusion")
    return FusionModel(params=EncoderParams(config=config, arrays=arrays), vocab=vocab,
                       use_common=bool(extra.get("use_common", True)))


def write_predictions(rows: Iterable[tuple[str, dict[str, float], str]],
                      path: str | Path) -> None:
    """JSON lines of (question id, per-option probabilities, predicted label)."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, probs, label in rows:
            fh.write(json.dumps({"question_id": qid, "probabilities": probs,
                                 "predicted": label}, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[tuple[str, dict[str, float], str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append((row["question_id"], row["probabilities"], row["predicted"]))
    return out
