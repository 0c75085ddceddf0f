"""Acceptance gate: seven verification criteria, one verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines
as they print. Criteria 4 and 5 share one 300-step pretraining run on the
cipher corpus (a few minutes); everything else is fast.

Criterion 6 is split: 6a covers the metric oracles and passes; 6b asks
the mean-of-ratios aggregate to reproduce a +8% figure its own row values
do not support (they give +6.6%, while the companion row's +10% *does*
reproduce, validating the formula). 6b therefore fails honestly and is
marked strict-xfail so the defect stays visible without failing the gate.
"""

import itertools
import math
import time

import numpy as np
import pytest
import scipy.stats

import miniclir.autodiff as ad
from miniclir.checkpoint import load_checkpoint, save_checkpoint
from miniclir.corpus import build_batch, generate_cipher_corpus
from miniclir.encoder import EncoderConfig, encode, init_params, strip_condenser
from miniclir.gradcheck import run_gradcheck
from miniclir.kernels import maxsim_matrix
from miniclir.losses import LossConfig, batch_loss, contrastive_loss, per_span_cross_entropy
from miniclir.metrics import ndcg_at_k, paired_t_test, relative_improvement
from miniclir.retrieval import (RankedList, read_qrels, read_run, write_qrels,
                                write_run)
from miniclir.rng import derive_rng
from miniclir.trainer import (RunConfig, finetune_colbert, finetune_dpr,
                              make_triples, pretrain, pretrain_step_cached,
                              pretrain_step_direct)
from miniclir.vocab import Vocabulary, attention_mask_for, build_vocab
from miniclir.vocab import encode as encode_text

FINETUNE_STEPS = 10


def verdict(criterion, ok, detail) -> None:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'} — {detail}")


class _NoUpdate:
    def step(self, params):
        pass


def copy_params(params):
    return {name: ad.Parameter(name, p.data.copy()) for name, p in params.items()}


def score_matrix(params, enc_cfg, vocab, queries, docs, scorer="maxsim"):
    """(len(queries), len(docs)) score matrix from a single encoding pass."""
    q_ids = np.stack([encode_text(t, vocab, enc_cfg.max_len) for t in queries])
    d_ids = np.stack([encode_text(t, vocab, enc_cfg.max_len) for t in docs])
    q_att, d_att = attention_mask_for(q_ids), attention_mask_for(d_ids)
    with ad.no_grad():
        q_out = encode(params, enc_cfg, q_ids, q_att)
        d_out = encode(params, enc_cfg, d_ids, d_att)
    if scorer == "cls":
        return q_out.cls.data @ d_out.cls.data.T
    scores, _ = maxsim_matrix(q_out.sim_tokens.data, q_att, d_out.sim_tokens.data, d_att)
    return np.asarray(scores, dtype=np.float64)


# ---------------------------------------------------------------------------
# shared corpus and the single 300-step pretraining run (criteria 4 and 5)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def corpus_bundle():
    records, _ = generate_cipher_corpus(num_pairs=500, vocab_size=200,
                                        doc_len_range=(40, 120), seed=20260816)
    pairs = [pair for pair, _ in records]
    train, held = pairs[:450], pairs[450:]
    vocab = build_vocab([t for p in train for t in (p.text_s, p.text_t)], max_size=500)
    enc_cfg = EncoderConfig(vocab_size=vocab.size)
    run_cfg = RunConfig(encoder=enc_cfg, seed=0, steps=300, learning_rate=1e-3,
                        batch_pairs=16, chunk_pairs=16, window=48, temperature=0.1)
    return {"train": train, "held": held, "vocab": vocab,
            "enc": enc_cfg, "cfg": run_cfg}


@pytest.fixture(scope="session")
def alignment_run(corpus_bundle):
    cfg = corpus_bundle["cfg"]
    untrained = init_params(corpus_bundle["enc"], derive_rng(cfg.seed, "init"),
                            dtype=cfg.dtype)
    start = time.perf_counter()
    params, history = pretrain(corpus_bundle["train"], corpus_bundle["vocab"], cfg)
    elapsed = time.perf_counter() - start
    return {"params": params, "untrained": untrained, "history": history,
            "seconds": elapsed, **corpus_bundle}


# ---------------------------------------------------------------------------
# criterion 1 — gradient correctness
# ---------------------------------------------------------------------------

class TestCriterion1:
    def test_finite_difference_agreement(self):
        start = time.perf_counter()
        rows = run_gradcheck(seed=0)
        elapsed = time.perf_counter() - start
        components = {row.component for row in rows}
        required = {"contrastive/maxsim", "contrastive/cls", "mlm", "cdmlm", "total"}
        worst = max(row.max_rel_err for row in rows)
        ok = (required <= components
              and all(row.max_rel_err < 1e-4 for row in rows)
              and elapsed < 120.0)
        verdict(1, ok, f"worst finite-difference rel err {worst:.3e} over "
                       f"{sorted(components)} in {elapsed:.1f}s (limits 1e-4, 120s)")
        assert required <= components
        for row in rows:
            assert row.max_rel_err < 1e-4, row
        assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criterion 2 — chunked gradient cache equals the direct large batch
# ---------------------------------------------------------------------------

class TestCriterion2:
    def test_cached_gradients_match_direct(self, corpus_bundle):
        worst_overall = 0.0
        for batch_pairs, chunk_pairs in ((8, 2), (16, 4)):
            cfg = RunConfig(encoder=corpus_bundle["enc"], seed=3, steps=1,
                            batch_pairs=batch_pairs, chunk_pairs=chunk_pairs,
                            window=48, temperature=0.1, precision="float64")
            batch = build_batch(corpus_bundle["train"][:batch_pairs],
                                corpus_bundle["vocab"], cfg.window,
                                cfg.encoder.max_len, cfg.mask_rate,
                                derive_rng(cfg.seed, "batch", 0))
            grads = {}
            for label, step_fn in (("direct", pretrain_step_direct),
                                   ("cached", pretrain_step_cached)):
                params = init_params(cfg.encoder, derive_rng(cfg.seed, "init"),
                                     dtype=cfg.dtype)
                step_fn(batch, params, cfg, _NoUpdate(), step=0)
                grads[label] = {name: p.grad.copy() for name, p in params.items()}
            worst = 0.0
            for name in grads["direct"]:
                a = grads["direct"][name].ravel()
                b = grads["cached"][name].ravel()
                rel = np.abs(a - b) / np.maximum(1e-8, np.abs(a))
                worst = max(worst, float(rel.max()))
            worst_overall = max(worst_overall, worst)
            assert worst < 1e-8, (batch_pairs, chunk_pairs, worst)
        verdict(2, worst_overall < 1e-8,
                f"cached-vs-direct gradient rel gap {worst_overall:.3e} "
                f"for batch 8/chunk 2 and batch 16/chunk 4 (limit 1e-8)")


# ---------------------------------------------------------------------------
# criterion 3 — closed-form loss values and exact term deletion
# ---------------------------------------------------------------------------

class TestCriterion3:
    def test_closed_forms_and_term_deletion(self, corpus_bundle):
        one_pair = contrastive_loss(ad.Tensor(np.full((2, 2), 0.7)), temperature=1.0)
        assert abs(float(one_pair.data)) <= 1e-12
        two_pair = contrastive_loss(ad.Tensor(np.full((4, 4), 0.7)), temperature=1.0)
        assert abs(float(two_pair.data) - math.log(3.0)) <= 1e-9
        vocab_size = 101
        logits = ad.Tensor(np.zeros((1, 6, vocab_size)))
        labels = np.array([[3, 7, -1, 0, 99, -1]])
        mlm = per_span_cross_entropy(logits, labels)
        assert abs(float(np.mean(mlm.data)) - math.log(vocab_size)) <= 1e-9

        enc_cfg = EncoderConfig(vocab_size=corpus_bundle["vocab"].size,
                                hidden_dim=32, num_layers=2, num_heads=2,
                                ff_dim=48, max_len=16, condenser_layers=1)
        params = init_params(enc_cfg, derive_rng(11, "init"), dtype=np.float64)
        batch = build_batch(corpus_bundle["train"][:4], corpus_bundle["vocab"],
                            12, enc_cfg.max_len, 0.15, derive_rng(11, "batch"))
        out = encode(params, enc_cfg, batch.input_ids, batch.attention_mask)

        def breakdown(similarity, condenser):
            return batch_loss(out, batch.mlm_labels,
                              LossConfig(similarity=similarity, condenser=condenser,
                                         temperature=1.0),
                              params, enc_cfg)

        full = breakdown("maxsim", True)
        no_sim = breakdown("none", True)
        no_cond = breakdown("maxsim", False)
        bare = breakdown("none", False)
        deletions_exact = (
            no_sim.contrastive == 0.0
            and no_sim.total == no_sim.mlm + no_sim.cdmlm
            and no_cond.cdmlm == 0.0
            and no_cond.total == no_cond.contrastive + no_cond.mlm
            and bare.total == bare.mlm
            and no_sim.mlm == full.mlm and no_cond.contrastive == full.contrastive
        )
        assert deletions_exact
        verdict(3, True, "one-pair contrastive 0, two-pair uniform ln 3, uniform-"
                         "logit masked loss ln V, and term deletion is exact")


# ---------------------------------------------------------------------------
# criterion 4 — synthetic cross-language alignment after pretraining
# ---------------------------------------------------------------------------

class TestCriterion4:
    def test_heldout_alignment_and_retrieval(self, alignment_run):
        held = alignment_run["held"]
        queries = [p.text_s for p in held]
        docs = [p.text_t for p in held]
        start = time.perf_counter()
        trained = score_matrix(alignment_run["params"], alignment_run["enc"],
                               alignment_run["vocab"], queries, docs)
        untrained = score_matrix(alignment_run["untrained"], alignment_run["enc"],
                                 alignment_run["vocab"], queries, docs)
        elapsed = alignment_run["seconds"] + (time.perf_counter() - start)

        aligned = float(np.mean(np.diag(trained)))
        off = trained.copy()
        np.fill_diagonal(off, np.nan)
        mismatched = float(np.nanmean(off))
        hits = np.argmax(trained, axis=1) == np.arange(len(held))
        accuracy = float(np.mean(hits))
        baseline = float(np.mean(np.argmax(untrained, axis=1) == np.arange(len(held))))

        ok = (aligned > mismatched and accuracy >= 0.6 and accuracy > baseline
              and elapsed < 600.0)
        verdict(4, ok, f"aligned mean {aligned:.3f} vs mismatched {mismatched:.3f}; "
                       f"accuracy@1 {accuracy:.3f} (untrained {baseline:.3f}, "
                       f"floor 0.6) in {elapsed:.0f}s (limit 600s)")
        assert aligned > mismatched
        assert accuracy >= 0.6
        assert accuracy > baseline
        assert elapsed < 600.0


# ---------------------------------------------------------------------------
# criterion 5 — pretraining helps fine-tuned rerankers
# ---------------------------------------------------------------------------

class TestCriterion5:
    def test_pretrained_init_beats_random_init(self, alignment_run):
        held = alignment_run["held"]
        queries = [p.text_s for p in held]
        docs = [p.text_t for p in held]
        doc_ids = [f"d{i}" for i in range(len(held))]
        qrels = {(f"q{i}", f"d{i}"): 1 for i in range(len(held))}

        def mean_ndcg10(params, scorer):
            matrix = score_matrix(params, alignment_run["enc"], alignment_run["vocab"],
                                  queries, docs, scorer)
            total = 0.0
            for i in range(len(held)):
                order = sorted(range(len(docs)), key=lambda j: -matrix[i, j])
                ranked = RankedList(f"q{i}", [(doc_ids[j], float(matrix[i, j]))
                                              for j in order])
                total += ndcg_at_k(ranked, qrels, k=10)
            return total / len(held)

        objectives = (("late-interaction", finetune_colbert, "maxsim"),
                      ("bi-encoder", finetune_dpr, "cls"))
        means = {}
        details = []
        overall_ok = True
        for name, objective, scorer in objectives:
            scores = {"pretrained": [], "random": []}
            for seed in (1, 2, 3):
                triples = make_triples(alignment_run["train"], derive_rng(seed, "triples"))
                ft_cfg = RunConfig(encoder=alignment_run["enc"], seed=seed,
                                   steps=FINETUNE_STEPS, learning_rate=1e-3,
                                   batch_pairs=8, chunk_pairs=8, window=48)
                inits = {"pretrained": copy_params(alignment_run["params"]),
                         "random": init_params(alignment_run["enc"],
                                               derive_rng(seed, "ft-init"),
                                               dtype=ft_cfg.dtype)}
                for init_name, init in inits.items():
                    tuned, _ = objective(triples, init, ft_cfg, alignment_run["vocab"])
                    scores[init_name].append(mean_ndcg10(tuned, scorer))
            means[name] = {k: float(np.mean(v)) for k, v in scores.items()}
            delta = relative_improvement([(means[name]["random"],
                                           means[name]["pretrained"])])
            ok = means[name]["pretrained"] >= means[name]["random"]
            overall_ok = overall_ok and ok
            details.append(f"{name} nDCG@10 {means[name]['pretrained']:.3f} vs "
                           f"{means[name]['random']:.3f} from random (Δ {delta:+.1%})")
        verdict(5, overall_ok, "; ".join(details) + " over 3 seeds")
        for name, _, _ in objectives:
            assert means[name]["pretrained"] >= means[name]["random"], means


# ---------------------------------------------------------------------------
# criterion 6 — metric oracles (6a) and the unreproducible row figure (6b)
# ---------------------------------------------------------------------------

def brute_force_ndcg(doc_ids_in_rank_order, gains, k):
    dcg = 0.0
    for rank, doc_id in enumerate(doc_ids_in_rank_order[:k], start=1):
        dcg += (2.0 ** gains.get(doc_id, 0) - 1.0) / math.log2(rank + 1)
    judged = [d for d, g in gains.items() if g > 0]
    if not judged:
        return 0.0
    best = 0.0
    for perm in itertools.permutations(judged):
        total = 0.0
        for rank, doc_id in enumerate(perm[:k], start=1):
            total += (2.0 ** gains[doc_id] - 1.0) / math.log2(rank + 1)
        best = max(best, total)
    return dcg / best


# The six-collection score row whose summary column prints +8%, and the
# companion row whose +10% does reproduce (validating the formula).
IMPROVEMENT_ROW = [(0.352, 0.444), (0.385, 0.391), (0.249, 0.278),
                   (0.283, 0.286), (0.510, 0.521), (0.590, 0.574)]
COMPANION_ROW = [(0.330, 0.395), (0.319, 0.341), (0.218, 0.255),
                 (0.259, 0.266), (0.467, 0.503), (0.531, 0.562)]


class TestCriterion6:
    def test_metric_oracles(self):
        rng = np.random.default_rng(123)
        worst_gap = 0.0
        for _ in range(100):
            num_docs = int(rng.integers(1, 7))
            doc_ids = [f"d{i}" for i in range(num_docs)]
            gains = {d: int(rng.integers(0, 4)) for d in doc_ids}
            ranked_ids = [d for d in doc_ids if rng.random() < 0.8]
            rng.shuffle(ranked_ids)
            k = int(rng.integers(1, 7))
            ranked = RankedList("q", [(d, float(len(ranked_ids) - i))
                                      for i, d in enumerate(ranked_ids)])
            got = ndcg_at_k(ranked, {("q", d): g for d, g in gains.items()}, k)
            worst_gap = max(worst_gap, abs(got - brute_force_ndcg(ranked_ids, gains, k)))
        assert worst_gap < 1e-12

        ranked = RankedList("q1", [("d-a", 3.0), ("d-b", 2.0), ("d-c", 1.0)])
        worked = ndcg_at_k(ranked, {("q1", "d-b"): 3, ("q1", "d-c"): 2}, k=3)
        assert abs(worked - 0.6653152460429406) < 1e-12

        worst_p_gap = 0.0
        for trial in range(30):
            trial_rng = np.random.default_rng(trial)
            n = int(trial_rng.integers(2, 30))
            a = trial_rng.normal(0.4, 0.2, size=n)
            b = a + trial_rng.normal(0.05, 0.1, size=n)
            ours = paired_t_test(a, b)
            ref = scipy.stats.ttest_rel(a, b)
            worst_p_gap = max(worst_p_gap, abs(ours.p_value - ref.pvalue))
        assert worst_p_gap < 1e-6
        identical = paired_t_test([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
        assert identical.p_value == 1.0

        companion = relative_improvement(COMPANION_ROW)
        assert round(100.0 * companion) == 10
        verdict("6a", True, f"permutation-oracle gap {worst_gap:.1e}, reference "
                            f"t-test gap {worst_p_gap:.1e}, identical-input p=1.0, "
                            f"companion row Δ {companion:+.1%} reproduces its +10%")

    @pytest.mark.xfail(strict=True, reason="the row's advertised +8% is not the "
                       "mean of its per-collection relative changes, which give "
                       "+6.6%; the companion row's +10% does reproduce, so the "
                       "formula is sound and the advertised figure is the defect")
    def test_row_reproduces_advertised_delta(self):
        delta = relative_improvement(IMPROVEMENT_ROW)
        verdict("6b", round(100.0 * delta) == 8,
                f"row mean-of-ratios gives {delta:+.2%}, advertised +8%")
        assert round(100.0 * delta) == 8


# ---------------------------------------------------------------------------
# criterion 7 — determinism and file formats
# ---------------------------------------------------------------------------

class TestCriterion7:
    def test_determinism_and_round_trips(self, corpus_bundle, tmp_path):
        enc_cfg = EncoderConfig(vocab_size=corpus_bundle["vocab"].size,
                                hidden_dim=32, num_layers=2, num_heads=2,
                                ff_dim=48, max_len=16, condenser_layers=1)
        cfg = RunConfig(encoder=enc_cfg, seed=7, steps=3, batch_pairs=4,
                        chunk_pairs=2, window=12)
        outputs = []
        for name in ("first", "second"):
            log_path = tmp_path / f"{name}.log"
            params, _ = pretrain(corpus_bundle["train"][:8], corpus_bundle["vocab"],
                                 cfg, log_path=log_path)
            outputs.append((log_path.read_bytes(),
                            {k: p.data.tobytes() for k, p in params.items()}))
        logs_identical = outputs[0][0] == outputs[1][0]
        params_identical = outputs[0][1] == outputs[1][1]
        assert logs_identical and params_identical

        params, _ = pretrain(corpus_bundle["train"][:8], corpus_bundle["vocab"], cfg)
        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(params, enc_cfg, ckpt)
        loaded, loaded_cfg = load_checkpoint(ckpt)
        checkpoint_exact = (loaded_cfg == enc_cfg
                            and set(loaded) == set(params)
                            and all(loaded[k].data.tobytes() == params[k].data.tobytes()
                                    for k in params))
        assert checkpoint_exact

        batch = build_batch(corpus_bundle["train"][:4], corpus_bundle["vocab"],
                            12, enc_cfg.max_len, 0.15, derive_rng(1, "batch"))
        before = encode(params, enc_cfg, batch.input_ids, batch.attention_mask)
        stripped = strip_condenser(params)
        assert not any(name.startswith("cond.") for name in stripped)
        after = encode(stripped, enc_cfg, batch.input_ids, batch.attention_mask)
        encode_unchanged = (
            before.last_tokens.data.tobytes() == after.last_tokens.data.tobytes()
            and before.sim_tokens.data.tobytes() == after.sim_tokens.data.tobytes()
            and before.cls.data.tobytes() == after.cls.data.tobytes())
        assert encode_unchanged

        run_path = tmp_path / "run.txt"
        lists = [RankedList("q1", [("d3", 1.5), ("d1", 0.1 + 0.2), ("d9", -2.0)]),
                 RankedList("q2", [("d2", 1e-17)])]
        write_run(run_path, lists, tag="gate")
        back = read_run(run_path)
        run_exact = (set(back) == {"q1", "q2"}
                     and back["q1"].entries == lists[0].entries
                     and back["q2"].entries == lists[1].entries)
        qrels_path = tmp_path / "qrels.txt"
        qrels = {("q1", "d3"): 2, ("q1", "d1"): 0, ("q2", "d2"): 1}
        write_qrels(qrels_path, qrels)
        qrels_exact = read_qrels(qrels_path) == qrels
        assert run_exact and qrels_exact

        verdict(7, True, "byte-identical rerun logs and parameters, bit-exact "
                         "checkpoint round trip, auxiliary-head removal leaves "
                         "encode() unchanged, run/qrels files round-trip exactly")
