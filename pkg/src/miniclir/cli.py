"""Command-line surface for the whole pipeline.

Subcommands cover corpus synthesis, vocabulary construction, continued
pretraining, triplet fine-tuning, BM25+rerank run generation, metric
evaluation, gradient verification, and the condenser-by-similarity
ablation grid. Exit codes are scriptable: 0 success, 1 verification
failure, 2 input error, 3 numerical failure.
"""

import argparse
import os
import sys
from dataclasses import replace

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (generate_cipher_corpus, ingest_pairs, translate_text,
                     write_bijection, write_pairs)
from .encoder import EncoderConfig, init_params, strip_condenser
from .errors import (CheckpointError, ContractError, CorpusFormatError,
                     EmptyCorpusError, NonFiniteLossError)
from .fileio import atomic_write, escape_field, read_tsv
from .gradcheck import run_gradcheck
from .metrics import ndcg_at_k, paired_t_test, relative_improvement
from .retrieval import (BM25Index, bm25_search, read_qrels, read_run, rerank,
                        write_qrels, write_run)
from .rng import derive_rng
from .trainer import (RunConfig, apply_config_overrides, finetune_colbert,
                      finetune_dpr, make_triples, pretrain, read_config_file,
                      read_triples, write_triples)
from .vocab import Vocabulary, build_vocab

SIMILARITY_CHOICES = ("none", "cls", "maxsim")
EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _require_files(*paths) -> None:
    for path in paths:
        if path is not None and not os.path.exists(path):
            raise FileNotFoundError(f"input file not found: {path}")


def _load_texts_tsv(path) -> dict:
    """Two-column id<TAB>text file -> ordered {id: text}."""
    out = {}
    for lineno, (key, text) in read_tsv(path, num_fields=2):
        if key in out:
            raise CorpusFormatError(f"{path}: line {lineno}: duplicate id {key!r}")
        out[key] = text
    if not out:
        raise EmptyCorpusError(f"{path}: no records found")
    return out


def write_texts_tsv(path, mapping: dict) -> None:
    with atomic_write(path) as fh:
        for key, text in mapping.items():
            fh.write(f"{escape_field(key)}\t{escape_field(text)}\n")


# ---------------------------------------------------------------------------
# evaluation report format: "section<TAB>metric<TAB>value" with repr floats
# ---------------------------------------------------------------------------


def write_report(path, rows) -> None:
    """rows: iterable of (section, metric, float value)."""
    with atomic_write(path) as fh:
        for section, metric, value in rows:
            fh.write(f"{escape_field(section)}\t{escape_field(metric)}\t{float(value)!r}\n")


def read_report(path) -> dict:
    """Inverse of write_report: {(section, metric): value}."""
    out = {}
    for lineno, (section, metric, value) in read_tsv(path, num_fields=3):
        try:
            out[(section, metric)] = float(value)
        except ValueError as exc:
            raise CorpusFormatError(f"{path}: line {lineno}: bad value {value!r}") from exc
    return out


def rerank_evaluation(queries: dict, docs: dict, qrels: dict, params: dict,
                      cfg: EncoderConfig, vocab: Vocabulary, scorer: str,
                      ks, depth: int = 50, bm25_queries: dict = None) -> dict:
    """BM25 candidates reranked per query; returns {k: [per-query nDCG]}.

    The lexical first stage needs query and document terms in the same
    language, so `bm25_queries` carries pre-translated queries when the
    eval is cross-language; the model still scores the original query
    text. Queries whose first stage finds nothing score zero at every
    cutoff. With scorer "bm25" the first-stage ranking is evaluated as-is.
    """
    index = BM25Index(docs)
    lexical = bm25_queries if bm25_queries is not None else queries
    missing = [q for q in queries if q not in lexical]
    if missing:
        raise ContractError(f"queries missing from the first-stage query file: {missing[:3]}")
    per_k = {k: [] for k in ks}
    for qid in queries:
        candidates = bm25_search(index, qid, lexical[qid], depth)
        if len(candidates) == 0:
            for k in ks:
                per_k[k].append(0.0)
            continue
        if scorer == "bm25":
            final = candidates
        else:
            final = rerank(queries[qid], candidates, docs, params, cfg, vocab, scorer)
        for k in ks:
            per_k[k].append(ndcg_at_k(final, qrels, k))
    return per_k


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    if args.num_pairs - args.eval_pairs < 2:
        raise ContractError("need at least 2 training pairs after the eval split")
    records, bijection = generate_cipher_corpus(
        num_pairs=args.num_pairs, vocab_size=args.vocab_size,
        doc_len_range=(args.min_len, args.max_len), seed=args.seed,
        noise_rate=args.noise_rate)
    os.makedirs(args.out_dir, exist_ok=True)
    train = records[:args.num_pairs - args.eval_pairs]
    held = records[args.num_pairs - args.eval_pairs:]
    write_pairs(os.path.join(args.out_dir, "pairs.tsv"), train)
    write_bijection(os.path.join(args.out_dir, "bijection.tsv"), bijection)
    queries = {f"q-{pair.pair_id}": pair.text_s for pair, _ in held}
    docs = {f"d-{pair.pair_id}": pair.text_t for pair, _ in held}
    qrels = {(f"q-{pair.pair_id}", f"d-{pair.pair_id}"): 1 for pair, _ in held}
    translated = {qid: translate_text(text, bijection) for qid, text in queries.items()}
    write_texts_tsv(os.path.join(args.out_dir, "eval_queries.tsv"), queries)
    write_texts_tsv(os.path.join(args.out_dir, "eval_queries_qt.tsv"), translated)
    write_texts_tsv(os.path.join(args.out_dir, "eval_docs.tsv"), docs)
    write_qrels(os.path.join(args.out_dir, "eval_qrels.txt"), qrels)
    train_pairs = [pair for pair, _ in train]
    triples = make_triples(train_pairs, derive_rng(args.seed, "triples"))
    write_triples(os.path.join(args.out_dir, "triples.tsv"), triples)
    print(f"wrote {len(train)} training pairs, {len(held)} eval pairs, "
          f"{len(triples)} triples to {args.out_dir}")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    _require_files(args.pairs)
    pairs = ingest_pairs(args.pairs)
    texts = [t for p in pairs for t in (p.text_s, p.text_t)]
    vocab = build_vocab(texts, max_size=args.max_size)
    vocab.save(args.out)
    print(f"vocabulary of {vocab.size} tokens written to {args.out}")
    return EXIT_OK


def _run_config_from_args(args, vocab_size: int) -> RunConfig:
    base = RunConfig(encoder=EncoderConfig(vocab_size=vocab_size))
    overrides = {}
    if args.config is not None:
        _require_files(args.config)
        overrides.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    overrides["encoder.vocab_size"] = str(vocab_size)
    for flag, key in (("seed", "seed"), ("steps", "steps"),
                      ("similarity", "similarity"), ("learning_rate", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "condenser", None) is not None:
        overrides["condenser"] = "true" if args.condenser == "on" else "false"
    return apply_config_overrides(base, overrides)


def cmd_pretrain(args) -> int:
    _require_files(args.pairs, args.vocab)
    pairs = ingest_pairs(args.pairs)
    vocab = Vocabulary.load(args.vocab)
    cfg = _run_config_from_args(args, vocab.size)
    log_path = args.log if args.log else args.out + ".log"
    params, history = pretrain(pairs, vocab, cfg, log_path=log_path)
    save_checkpoint(params, cfg.encoder, args.out)
    print(f"pretrained {cfg.steps} steps; final total loss {history[-1].total!r}")
    print(f"checkpoint: {args.out}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    _require_files(args.triples, args.vocab, args.checkpoint)
    triples = read_triples(args.triples)
    vocab = Vocabulary.load(args.vocab)
    params, enc_cfg = load_checkpoint(args.checkpoint)
    cfg = _run_config_from_args(args, enc_cfg.vocab_size)
    cfg = replace(cfg, encoder=enc_cfg)
    if args.random_init:
        params = init_params(enc_cfg, derive_rng(cfg.seed, "init"), dtype=cfg.dtype)
    objective = finetune_dpr if args.objective == "dpr" else finetune_colbert
    params, history = objective(triples, params, cfg, vocab)
    save_checkpoint(params, enc_cfg, args.out)
    print(f"fine-tuned ({args.objective}) {cfg.steps} steps; "
          f"loss {history[0]!r} -> {history[-1]!r}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_rerank(args) -> int:
    _require_files(args.queries, args.docs, args.vocab, args.checkpoint, args.bm25_queries)
    queries = _load_texts_tsv(args.queries)
    lexical = _load_texts_tsv(args.bm25_queries) if args.bm25_queries else queries
    docs = _load_texts_tsv(args.docs)
    vocab = Vocabulary.load(args.vocab)
    params, enc_cfg = load_checkpoint(args.checkpoint)
    if args.strip_condenser:
        params = strip_condenser(params)
    missing = [q for q in queries if q not in lexical]
    if missing:
        raise ContractError(f"queries missing from --bm25-queries: {missing[:3]}")
    index = BM25Index(docs)
    results = []
    for qid, text in queries.items():
        candidates = bm25_search(index, qid, lexical[qid], args.depth)
        if len(candidates) == 0:
            continue
        if args.scorer == "bm25":
            results.append(candidates)
        else:
            results.append(rerank(text, candidates, docs, params, enc_cfg, vocab, args.scorer))
    write_run(args.out, results, tag=args.tag)
    print(f"wrote {sum(len(r) for r in results)} entries for {len(results)} queries to {args.out}")
    return EXIT_OK


def _mean(values) -> float:
    return sum(values) / len(values) if values else 0.0


def cmd_evaluate(args) -> int:
    _require_files(args.run, args.qrels, args.baseline_run)
    runs = read_run(args.run)
    qrels = read_qrels(args.qrels)
    ks = args.k or [10, 100]
    rows = []
    per_k = {k: [ndcg_at_k(runs[q], qrels, k) for q in sorted(runs)] for k in ks}
    for k in ks:
        rows.append(("run", f"ndcg@{k}", _mean(per_k[k])))
    if args.baseline_run:
        base_runs = read_run(args.baseline_run)
        if sorted(base_runs) != sorted(runs):
            raise ContractError("run and baseline run rank different query sets")
        base_k = {k: [ndcg_at_k(base_runs[q], qrels, k) for q in sorted(base_runs)] for k in ks}
        for k in ks:
            rows.append(("baseline", f"ndcg@{k}", _mean(base_k[k])))
            result = paired_t_test(per_k[k], base_k[k], num_comparisons=args.num_comparisons)
            rows.append(("compare", f"t@{k}", result.t))
            rows.append(("compare", f"p@{k}", result.p_value))
            rows.append(("compare", f"p_corrected@{k}", result.p_corrected))
            if _mean(base_k[k]) > 0:
                rows.append(("compare", f"delta@{k}",
                             relative_improvement([(_mean(base_k[k]), _mean(per_k[k]))])))
    for section, metric, value in rows:
        print(f"{section}\t{metric}\t{value!r}")
    if args.out:
        write_report(args.out, rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seed=args.seed, epsilon=args.epsilon)
    failed = [r for r in rows if not r.passed]
    print(f"{'component':<20} {'max rel err':>12} {'threshold':>10} {'status':>8} {'seconds':>8}")
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<20} {r.max_rel_err:>12.3e} {r.threshold:>10.0e} "
              f"{status:>8} {r.seconds:>8.2f}")
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err)
        print(f"FAIL: {worst.component} at {worst.max_rel_err:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require_files(args.pairs, args.triples, args.queries, args.docs, args.qrels,
                   args.vocab, args.bm25_queries)
    pairs = ingest_pairs(args.pairs)
    triples = read_triples(args.triples)
    queries = _load_texts_tsv(args.queries)
    lexical = _load_texts_tsv(args.bm25_queries) if args.bm25_queries else None
    docs = _load_texts_tsv(args.docs)
    qrels = read_qrels(args.qrels)
    vocab = Vocabulary.load(args.vocab)
    ks = args.k or [10, 100]
    objective = finetune_dpr if args.objective == "dpr" else finetune_colbert
    rows = []
    for condenser in (True, False):
        for similarity in SIMILARITY_CHOICES:
            section = f"cond={'on' if condenser else 'off'} sim={similarity}"
            means = {k: [] for k in ks}
            for seed_index in range(args.seeds):
                seed = args.seed + seed_index
                cfg = _run_config_from_args(args, vocab.size)
                cfg = replace(cfg, seed=seed, similarity=similarity, condenser=condenser)
                params, _ = pretrain(pairs, vocab, cfg)
                params, _ = objective(triples, params, replace(cfg, steps=args.finetune_steps), vocab)
                scorer = "cls" if args.objective == "dpr" else "maxsim"
                per_k = rerank_evaluation(queries, docs, qrels, params, cfg.encoder,
                                          vocab, scorer, ks, depth=args.depth,
                                          bm25_queries=lexical)
                for k in ks:
                    value = _mean(per_k[k])
                    means[k].append(value)
                    rows.append((section, f"ndcg@{k} seed{seed}", value))
            for k in ks:
                rows.append((section, f"ndcg@{k} mean", _mean(means[k])))
    for section, metric, value in rows:
        print(f"{section}\t{metric}\t{value!r}")
    if args.out:
        write_report(args.out, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miniclir",
        description="Desk-scale cross-language retrieval pretraining pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesize an aligned cipher corpus with eval split")
    p.add_argument("--out-dir", required=True, help="directory for all generated files")
    p.add_argument("--num-pairs", type=int, default=550, help="total aligned pairs")
    p.add_argument("--eval-pairs", type=int, default=50, help="held-out pairs for retrieval eval")
    p.add_argument("--vocab-size", type=int, default=200, help="cipher vocabulary size per side")
    p.add_argument("--min-len", type=int, default=40, help="minimum document length in tokens")
    p.add_argument("--max-len", type=int, default=120, help="maximum document length in tokens")
    p.add_argument("--noise-rate", type=float, default=0.1, help="fraction of resampled tokens")
    p.add_argument("--seed", type=int, default=0, help="corpus generator seed")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-vocab", help="build a token vocabulary from aligned pairs")
    p.add_argument("--pairs", required=True, help="aligned-pair TSV file")
    p.add_argument("--out", required=True, help="vocabulary output path")
    p.add_argument("--max-size", type=int, default=1000, help="vocabulary size cap")
    p.set_defaults(func=cmd_build_vocab)

    def add_train_flags(p, similarity=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--steps", type=int, default=None, help="training steps")
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        if similarity:
            p.add_argument("--similarity", choices=SIMILARITY_CHOICES, default=None,
                           help="contrastive similarity function")
            p.add_argument("--condenser", choices=("on", "off"), default=None,
                           help="train the condenser head and its masked objective")

    p = sub.add_parser("pretrain", help="continued pretraining on aligned pairs")
    p.add_argument("--pairs", required=True, help="aligned-pair TSV file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="training log path (default: OUT.log)")
    add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="triplet fine-tuning from a checkpoint")
    p.add_argument("--triples", required=True, help="query/positive/negative TSV file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--checkpoint", required=True, help="initial checkpoint")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint output path")
    p.add_argument("--objective", choices=("colbert", "dpr"), default="colbert",
                   help="late-interaction or CLS bi-encoder objective")
    p.add_argument("--random-init", action="store_true",
                   help="reinitialize weights (config from checkpoint) before fine-tuning")
    add_train_flags(p, similarity=False)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("rerank", help="BM25 candidates rescored by a trained model")
    p.add_argument("--queries", required=True, help="query id<TAB>text file")
    p.add_argument("--docs", required=True, help="document id<TAB>text file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--out", required=True, help="run file output path")
    p.add_argument("--scorer", choices=("maxsim", "cls", "bm25"), default="maxsim",
                   help="reranking score (bm25 = emit first-stage ranking)")
    p.add_argument("--bm25-queries", dest="bm25_queries", default=None,
                   help="pre-translated queries for the lexical first stage "
                        "(cross-language evals; model still scores --queries text)")
    p.add_argument("--depth", type=int, default=50, help="first-stage candidate depth")
    p.add_argument("--tag", default="miniclir", help="run tag for the output file")
    p.add_argument("--strip-condenser", action="store_true",
                   help="drop condenser weights before scoring (must not change scores)")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="nDCG report for a run file, optionally vs a baseline")
    p.add_argument("--run", required=True, help="run file to score")
    p.add_argument("--qrels", required=True, help="relevance judgments")
    p.add_argument("--baseline-run", default=None, help="run file to compare against")
    p.add_argument("--k", action="append", type=int, help="nDCG cutoff (repeatable; default 10, 100)")
    p.add_argument("--num-comparisons", type=int, default=1,
                   help="multiple-testing correction factor")
    p.add_argument("--out", default=None, help="write the report as TSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of every loss component")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.add_argument("--epsilon", type=float, default=1e-6, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="condenser x similarity grid, pretrain+finetune+eval per cell")
    p.add_argument("--pairs", required=True, help="aligned-pair TSV file")
    p.add_argument("--triples", required=True, help="fine-tuning triples")
    p.add_argument("--queries", required=True, help="eval queries")
    p.add_argument("--docs", required=True, help="eval documents")
    p.add_argument("--qrels", required=True, help="eval judgments")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--bm25-queries", dest="bm25_queries", default=None,
                   help="pre-translated queries for the lexical first stage")
    p.add_argument("--out", default=None, help="write the grid report as TSV")
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--k", action="append", type=int, help="nDCG cutoff (repeatable; default 10, 100)")
    p.add_argument("--depth", type=int, default=50, help="first-stage candidate depth")
    p.add_argument("--objective", choices=("colbert", "dpr"), default="colbert")
    p.add_argument("--finetune-steps", type=int, default=30, help="fine-tuning steps per cell")
    p.add_argument("--config", default=None, help="key=value config file for pretraining")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--steps", type=int, default=None, help="pretraining steps")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CorpusFormatError, EmptyCorpusError, CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
