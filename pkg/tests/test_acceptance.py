"""Acceptance suite: one test per release criterion, each at its stated
tolerance, printing one pass/fail line per criterion (run with -s to see
them inline)."""

import math
import time
from collections import Counter
from contextlib import contextmanager

import numpy as np
import pytest

from hopqa import autodiff as ad
from hopqa.corpus import Question, fact_lookup, load_stopwords
from hopqa.encoder import EncoderConfig, Vocab
from hopqa.errors import EmptyQueryError
from hopqa.fusion import (
    KnowledgeSplit,
    new_fusion,
    qa_train_accuracy,
    split_common_unique,
    train_qa,
)
from hopqa.fusion import _question_batch, _fusion_loss
from hopqa.index import build_index, search
from hopqa.metrics import confidence_histogram, qa_accuracy, recall_at_n
from hopqa.pipeline import evaluate_retrieval_step, facts_sweep, splits_from_traces
from hopqa.rankdata import (
    LABEL_IRRELEVANT,
    LABEL_RELEVANT,
    RankExample,
    TfidfSimilarity,
    balance_and_split,
    count_gold_leaks,
    mine_negatives,
    positives_from_annotations,
)
from hopqa.ranker import _pad_batch, _ranker_loss, build_rank_input, eval_ranker, new_ranker, rel_score, train_ranker
from hopqa.retrieval import make_step2_query, retrieve
from hopqa.training import FitConfig, loss_and_grads

from synth import flag_world, injected_flag_splits, make_fact, parity_world

STOP = load_stopwords()


@contextmanager
def criterion(num, description):
    try:
        yield
    except Exception:
        print(f"[FAIL] criterion {num:>2}: {description}")
        raise
    print(f"[PASS] criterion {num:>2}: {description}")


# -----------------------------------------------------------------------
# 1. BM25 search equals a brute-force scoring oracle
# -----------------------------------------------------------------------

def bm25_oracle(docs, query, k, k1=1.2, b=0.75):
    """Score every document from raw token lists, filter positives, sort."""
    n = len(docs)
    avg = sum(len(t) for t in docs.values()) / n
    df = Counter(term for toks in docs.values() for term in set(toks))
    ranked = []
    for fid, toks in docs.items():
        tf = Counter(toks)
        score = 0.0
        for term in set(query):
            if term in tf:
                idf = max(0.0, math.log((n - df[term] + 0.5) / (df[term] + 0.5)))
                score += idf * tf[term] * (k1 + 1) / (
                    tf[term] + k1 * (1 - b + b * len(toks) / avg))
        if score > 0.0:
            ranked.append((fid, score))
    ranked.sort(key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def test_criterion_1_bm25_oracle_equivalence():
    with criterion(1, "search matches brute-force BM25 on 50 random corpora (tol 1e-12, <5 s)"):
        rng = np.random.default_rng(1001)
        vocab = [f"t{i:02d}" for i in range(40)]
        start = time.monotonic()
        for trial in range(50):
            n_docs = int(rng.integers(2, 101))
            docs = {}
            for d in range(n_docs):
                length = int(rng.integers(1, 12))
                docs[f"d{d:03d}"] = tuple(rng.choice(vocab, size=length))
            facts = [make_fact(fid, " ".join(toks)) for fid, toks in docs.items()]
            index = build_index(facts)
            query = list(rng.choice(vocab, size=int(rng.integers(1, 6))))
            k = int(rng.integers(1, n_docs + 5))
            got = search(index, query, k)
            want = bm25_oracle(docs, query, k)
            assert [h.fact_id for h in got] == [fid for fid, _ in want]
            for hit, (_, score) in zip(got, want):
                assert abs(hit.score - score) <= 1e-12
        elapsed = time.monotonic() - start
        assert elapsed < 5.0, f"runtime {elapsed:.2f}s"


# -----------------------------------------------------------------------
# 2. Step-2 query equals the symmetric difference of its operand sets
# -----------------------------------------------------------------------

def test_criterion_2_step2_query_algebra():
    with criterion(2, "make_step2_query = symmetric difference over 1,000 random cases"):
        rng = np.random.default_rng(2002)
        vocab = [f"v{i:02d}" for i in range(14)]
        checked_empty = 0
        for _ in range(1000):
            qa = list(rng.choice(vocab, size=int(rng.integers(1, 8)), replace=False))
            if rng.random() < 0.08:
                fact = list(qa)
                rng.shuffle(fact)
            else:
                fact = list(rng.choice(vocab, size=int(rng.integers(1, 8)), replace=False))
            expected = (set(qa) | set(fact)) - (set(qa) & set(fact))
            if not expected:
                with pytest.raises(EmptyQueryError):
                    make_step2_query(" ".join(qa), "", " ".join(fact), STOP)
                checked_empty += 1
                continue
            got = make_step2_query(" ".join(qa), "", " ".join(fact), STOP)
            assert set(got) == expected
            assert len(got) == len(set(got))
        assert checked_empty > 0  # the identical-sets branch was exercised


# -----------------------------------------------------------------------
# 3. Two-hop retrieval reaches the gold fact that step 1 cannot
# -----------------------------------------------------------------------

def bridge_world(n_questions=4):
    facts, questions = [], []
    for i in range(n_questions):
        qa, qb, opt_a, opt_b = f"qq{i}", f"rr{i}", f"aa{i}", f"bb{i}"
        bridge, fact1 = f"lk{i}", f"qq{i} aa{i} lk{i}"
        fact2 = f"lk{i} zz{i} yy{i}"
        facts += [fact1, fact2, f"bb{i} mm{i}", f"nn{i} oo{i}"]
        questions.append(Question(
            id=f"b{i}", stem=f"{qa} {qb}",
            options=(("A", opt_a), ("B", opt_b)), answer_key="A",
            gold_facts=(fact1, fact2)))
    fact_objs = [make_fact(f"f{j:02d}", text) for j, text in enumerate(facts)]
    return questions, fact_lookup(fact_objs)


def test_criterion_3_two_hop_closes_the_gap():
    with criterion(3, "gold F2 unreachable at step 1 (R@10 = 0) and found at step 2 (R@10 = 1)"):
        questions, facts = bridge_world()
        index = build_index(list(facts.values()))
        traces = {q.id: retrieve(index, q, facts, STOP, steps=2, k1=10, top_m=10, k2=10)
                  for q in questions}
        step1 = evaluate_retrieval_step(traces, questions, facts, 1)
        step2 = evaluate_retrieval_step(traces, questions, facts, 2)
        assert step1.r10_f2.n_skipped == 0
        assert step1.r10_f2.value == 0.0
        assert step2.r10_f2.value == 1.0


# -----------------------------------------------------------------------
# 4. Analytic gradients match central finite differences everywhere
# -----------------------------------------------------------------------

def _max_rel_error(params, loss_builder, batch, h=1e-5):
    _, grads = loss_and_grads(params, loss_builder, batch)

    def loss_at(arrays):
        tensors = {name: ad.tensor(arr) for name, arr in arrays.items()}
        return float(loss_builder(tensors, batch).data)

    worst = 0.0
    for name in sorted(params.arrays):
        flat = params.arrays[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at(params.arrays)
            flat[i] = orig - h
            down = loss_at(params.arrays)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(gflat[i]))
            if scale < 1e-5:
                assert abs(fd - gflat[i]) < 1e-8, f"{name}[{i}]"
            else:
                worst = max(worst, abs(fd - gflat[i]) / scale)
    return worst


def test_criterion_4_gradient_fidelity():
    with criterion(4, "full ranker and fusion gradients vs finite differences, rel err < 1e-4"):
        start = time.monotonic()
        vocab = Vocab([f"v{i}" for i in range(10)])
        for seed in (0, 1, 2):
            cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=12,
                                max_len=16, vocab_size=len(vocab), seed=seed)
            rng = np.random.default_rng(100 + seed)

            ranker = new_ranker(vocab, cfg, seed=seed)
            ranker.params.arrays["head.cls.W"] += rng.normal(0, 0.3, size=(8, 2))
            rows = [build_rank_input("v0 v1 v2", "v3", "v4 v5 v1", vocab, 16)[0],
                    build_rank_input("v6 v7", "v8", "v9 v0", vocab, 16)[0]]
            ids, mask = _pad_batch(rows, vocab.pad_id)
            batch = (ids, mask, np.array([1, 0]), cfg)
            worst = _max_rel_error(ranker.params, _ranker_loss, batch)
            assert worst < 1e-4, f"ranker seed {seed}: {worst:.2e}"

            fusion = new_fusion(vocab, cfg, seed=seed)
            fusion.params.arrays["head.ff2.W"] += rng.normal(0, 0.3, size=(8, 1))
            questions = [Question(id="g0", stem="v0 v1",
                                  options=(("A", "v2"), ("B", "v3"), ("C", "v4")),
                                  answer_key="B")]
            facts = {f"k{i}": make_fact(f"k{i}", f"v{i} v{(i + 1) % 10}") for i in range(6)}
            splits = {"g0": KnowledgeSplit(common=[("k0", 1.0), ("k1", 0.5)],
                                           unique=[["k2"], ["k3", "k4"], ["k5"]])}
            fbatch = _question_batch(fusion, questions, splits, facts, None, True)
            worst = _max_rel_error(fusion.params, _fusion_loss, fbatch)
            assert worst < 1e-4, f"fusion seed {seed}: {worst:.2e}"
        elapsed = time.monotonic() - start
        assert elapsed < 120.0, f"runtime {elapsed:.1f}s"


# -----------------------------------------------------------------------
# 5. Ranker overfits a keyword-separable set; zero head scores 0.5 exactly
# -----------------------------------------------------------------------

def test_criterion_5_ranker_overfit():
    with criterion(5, "20-pair ranking set reaches accuracy 1.0 within 100 epochs (<1 min)"):
        examples = []
        for i in range(10):
            examples.append(RankExample("does the widget spark", "yes",
                                        f"widget kind{i} sparks brightly",
                                        LABEL_RELEVANT, "qasc_gold"))
            examples.append(RankExample("does the widget spark", "yes",
                                        f"widget kind{i} hums quietly",
                                        LABEL_IRRELEVANT, "mined_wrong_answer"))
        start = time.monotonic()
        model = train_ranker(examples, FitConfig(epochs=100, batch_size=10,
                                                 peak_lr=5e-3, warmup_steps=5, seed=0))
        elapsed = time.monotonic() - start
        assert eval_ranker(model, examples) == 1.0
        assert elapsed < 60.0, f"runtime {elapsed:.1f}s"
        untrained = new_ranker(model.vocab, seed=0)
        assert rel_score(untrained, "does the widget spark", "yes", "anything") == 0.5


# -----------------------------------------------------------------------
# 6. Fusion overfits 50 synthetic questions; untrained model is at chance
# -----------------------------------------------------------------------

def test_criterion_6_fusion_overfit():
    with criterion(6, "50-question fusion set reaches accuracy 1.0 within 200 epochs (<5 min)"):
        questions, facts, _ = flag_world(50, seed=0)
        splits = injected_flag_splits(questions, facts)
        vocab = Vocab.build([f.tokens for f in facts.values()]
                            + [tuple(q.stem.split()) for q in questions])
        cfg = EncoderConfig(d_model=32, n_heads=2, n_layers=1, d_ff=64,
                            max_len=64, vocab_size=len(vocab), seed=0)
        untrained = qa_train_accuracy(new_fusion(vocab, cfg), questions, splits, facts)
        sigma = math.sqrt(0.25 * 0.75 / 50)
        assert abs(untrained - 0.25) <= 3 * sigma, f"untrained {untrained:.3f}"
        start = time.monotonic()
        model = train_qa(questions, splits, facts,
                         FitConfig(epochs=200, batch_size=50, peak_lr=5e-3, seed=0),
                         cfg, vocab)
        elapsed = time.monotonic() - start
        assert qa_train_accuracy(model, questions, splits, facts) == 1.0
        assert elapsed < 300.0, f"runtime {elapsed:.1f}s"


# -----------------------------------------------------------------------
# 7. Retrieved knowledge is worth >= 20 accuracy points on a task built
#    to require it; sweep(k=0) equals the no-knowledge run exactly
# -----------------------------------------------------------------------

def test_criterion_7_knowledge_matters():
    with criterion(7, "eval accuracy(10 facts) - accuracy(0 facts) >= 20 points; sweep(0) = no-knowledge"):
        questions, facts, _ = flag_world(40, seed=1)
        train_q, eval_q = questions[:24], questions[24:]
        index = build_index(list(facts.values()))
        traces = {q.id: retrieve(index, q, facts, STOP, steps=1, k1=10) for q in questions}
        splits = splits_from_traces(traces, questions, 1)
        vocab = Vocab.build([f.tokens for f in facts.values()]
                            + [tuple(q.stem.split()) for q in questions])
        cfg = EncoderConfig(d_model=32, n_heads=2, n_layers=1, d_ff=64,
                            max_len=64, vocab_size=len(vocab), seed=0)
        model = train_qa(train_q, splits, facts,
                         FitConfig(epochs=100, batch_size=24, peak_lr=5e-3, seed=0),
                         cfg, vocab, facts_per_input=10)
        pairs = facts_sweep(model, eval_q, splits, facts, [0, 10])
        acc_none, acc_full = pairs[0][1], pairs[1][1]
        assert acc_full - acc_none >= 0.20, f"gap {acc_full - acc_none:.3f}"
        from hopqa.pipeline import evaluate_qa
        no_knowledge, _, _ = evaluate_qa(model, eval_q, splits, facts, facts_per_input=0)
        assert pairs[0][1] == no_knowledge


# -----------------------------------------------------------------------
# 8. The common-input half is worth >= 15 points on comparative questions
# -----------------------------------------------------------------------

def test_criterion_8_fusion_beats_entailment_only_on_comparatives():
    with criterion(8, "comparative questions: fusion >= ablated (CLS_C zeroed) + 15 points"):
        questions, splits, facts = parity_world(108, seed=7)
        train_q, eval_q = questions[:72], questions[72:]
        vocab = Vocab.build([f.tokens for f in facts.values()]
                            + [tuple(q.stem.split()) for q in questions])
        cfg = EncoderConfig(d_model=24, n_heads=2, n_layers=1, d_ff=48,
                            max_len=64, vocab_size=len(vocab), seed=0)
        fit = FitConfig(epochs=120, batch_size=24, peak_lr=6e-3, warmup_steps=10, seed=0)
        fused = train_qa(train_q, splits, facts, fit, cfg, vocab, use_common=True)
        ablated = train_qa(train_q, splits, facts, fit, cfg, vocab, use_common=False)
        acc_fused = qa_train_accuracy(fused, eval_q, splits, facts)
        acc_ablated = qa_train_accuracy(ablated, eval_q, splits, facts)
        assert acc_fused - acc_ablated >= 0.15, f"{acc_fused:.3f} vs {acc_ablated:.3f}"


# -----------------------------------------------------------------------
# 9. Dataset builder: no gold leaks, exact balance, seed determinism
# -----------------------------------------------------------------------

def test_criterion_9_dataset_builder_safety():
    with criterion(9, "randomized mining never leaks gold facts; splits balanced and deterministic"):
        rng = np.random.default_rng(9009)
        for world in range(30):
            n_questions = int(rng.integers(3, 8))
            questions, all_examples = [], []
            pool = [f"noise {world} {j} t{rng.integers(100)}" for j in range(20)]
            for i in range(n_questions):
                gold = (f"gold {world} {i} alpha", f"gold {world} {i} beta")
                q = Question(id=f"q{i}", stem=f"stem {world} {i}",
                             options=(("A", "right"), ("B", "wrong"), ("C", "worse")),
                             answer_key="A", gold_facts=gold)
                questions.append(q)
                sim = TfidfSimilarity(pool + list(gold))
                hits = []
                for label in ("B", "C"):
                    texts = list(rng.choice(pool, size=int(rng.integers(1, 6))))
                    if rng.random() < 0.5:
                        texts.append(gold[int(rng.integers(2))])  # adversarial gold injection
                    hits.append((label, texts))
                all_examples += mine_negatives(q, list(gold), hits, 0.7, sim)
            all_examples += positives_from_annotations(questions)
            assert count_gold_leaks(all_examples, questions) == 0
            seed = int(rng.integers(10_000))
            train_a, val_a = balance_and_split(all_examples, seed)
            train_b, val_b = balance_and_split(all_examples, seed)
            assert (train_a, val_a) == (train_b, val_b)
            for split in (train_a, val_a):
                rel = sum(1 for ex in split if ex.label == LABEL_RELEVANT)
                assert rel * 2 == len(split)


# -----------------------------------------------------------------------
# 10. split_common_unique matches brute-force enumeration; conservation
# -----------------------------------------------------------------------

def test_criterion_10_split_oracle():
    with criterion(10, "split_common_unique matches enumeration on 1,000 random configurations"):
        rng = np.random.default_rng(1010)
        pool = [f"f{i:02d}" for i in range(15)]
        for _ in range(1000):
            n_options = int(rng.integers(2, 7))
            lists = []
            for _ in range(n_options):
                size = int(rng.integers(0, 8))
                ids = list(rng.choice(pool, size=size, replace=False))
                lists.append([(fid, float(rng.uniform(-1, 3))) for fid in ids])
            split = split_common_unique(lists)
            count, best = Counter(), {}
            for rows in lists:
                for fid, score in rows:
                    count[fid] += 1
                    best[fid] = max(best.get(fid, -np.inf), score)
            want_common = sorted(((fid, count[fid] * best[fid]) for fid in count
                                  if count[fid] >= 2), key=lambda x: (-x[1], x[0]))
            want_unique = [[fid for fid, _ in rows if count[fid] == 1] for rows in lists]
            assert [fid for fid, _ in split.common] == [fid for fid, _ in want_common]
            np.testing.assert_allclose([s for _, s in split.common],
                                       [s for _, s in want_common], atol=1e-12)
            assert split.unique == want_unique
            # conservation: every incoming fact is in exactly one bucket
            common_ids = {fid for fid, _ in split.common}
            unique_ids = {fid for u in split.unique for fid in u}
            assert common_ids.isdisjoint(unique_ids)
            assert common_ids | unique_ids == set(count)


# -----------------------------------------------------------------------
# 11. Metric fixtures and the n+1 encoder-input invariant
# -----------------------------------------------------------------------

def test_criterion_11_metrics_and_input_counts(monkeypatch):
    with criterion(11, "metrics match hand-computed fixtures; inputs per question = n+1"):
        assert recall_at_n(["a", "b", "gold"], "gold", 5) == 1
        assert recall_at_n(["a", "b", "gold"], "gold", 2) == 0
        assert qa_accuracy({"q1": "A", "q2": "B", "q3": "A"},
                           {"q1": "A", "q2": "B", "q3": "B"}) == pytest.approx(2 / 3)
        hist = confidence_histogram(
            {"q1": ({"A": 0.92, "B": 0.08}, "A"),
             "q2": ({"A": 0.56, "B": 0.44}, "A"),
             "q3": ({"A": 0.29, "B": 0.71}, "B")},
            {"q1": "A", "q2": "B", "q3": "B"}, bins=20)
        assert hist.correct_counts[18] == 1 and hist.correct_counts[14] == 1
        assert hist.incorrect_counts[11] == 1
        assert hist.total == 3

        import hopqa.fusion as fusion_mod
        from hopqa.fusion import score_options

        vocab = Vocab([f"v{i}" for i in range(30)])
        facts = {}
        for n_options, want in ((4, 5), (8, 9)):
            labels = "ABCDEFGH"[:n_options]
            q = Question(id="c", stem="v0 v1",
                         options=tuple((lab, f"v{i + 2}") for i, lab in enumerate(labels)),
                         answer_key="A")
            split = KnowledgeSplit(common=[], unique=[[] for _ in range(n_options)])
            model = new_fusion(vocab, seed=0)
            calls = []
            real = fusion_mod.encode
            monkeypatch.setattr(fusion_mod, "encode",
                                lambda *a, real=real, **kw: calls.append(1) or real(*a, **kw))
            score_options(model, q, split, facts)
            monkeypatch.undo()
            assert len(calls) == want, f"n={n_options}: {len(calls)} encoder inputs"
