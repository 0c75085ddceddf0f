"""End-to-end tests for the command-line pipeline.

Everything drives `cli.main` in-process so exit codes are observable
directly; one subprocess smoke test covers the module entrypoint. A
module-scoped corpus/vocab/checkpoint fixture keeps the slow steps to
one run each.
"""

import subprocess
import sys

import pytest

import miniclir.autodiff as ad
from miniclir import cli
from miniclir.checkpoint import load_checkpoint
from miniclir.cli import read_report, write_report
from miniclir.corpus import ingest_pairs
from miniclir.errors import CorpusFormatError
from miniclir.fileio import read_tsv
from miniclir.retrieval import read_qrels, read_run
from miniclir.trainer import read_triples
from miniclir.vocab import Vocabulary


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generated corpus + vocabulary + 3-step pretrained checkpoint."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert run_cli("gen-corpus", "--out-dir", data, "--num-pairs", 30,
                   "--eval-pairs", 10, "--vocab-size", 40, "--min-len", 12,
                   "--max-len", 20, "--seed", 5) == 0
    vocab_path = root / "vocab.tsv"
    assert run_cli("build-vocab", "--pairs", data / "pairs.tsv",
                   "--out", vocab_path, "--max-size", 80) == 0
    ckpt = root / "pre.ckpt"
    log = root / "pre.log"
    assert run_cli("pretrain", "--pairs", data / "pairs.tsv", "--vocab", vocab_path,
                   "--out", ckpt, "--log", log, "--seed", 1, "--steps", 3,
                   "--set", "batch_pairs=4", "--set", "chunk_pairs=2",
                   "--set", "window=12") == 0
    return {"root": root, "data": data, "vocab": vocab_path, "ckpt": ckpt, "log": log}


class TestGenCorpus:
    def test_writes_all_pipeline_files(self, pipeline):
        data = pipeline["data"]
        for name in ("pairs.tsv", "bijection.tsv", "eval_queries.tsv",
                     "eval_queries_qt.tsv", "eval_docs.tsv", "eval_qrels.txt",
                     "triples.tsv"):
            assert (data / name).exists(), name
        assert len(ingest_pairs(data / "pairs.tsv")) == 20
        assert len(read_triples(data / "triples.tsv")) == 20
        queries = dict(fields for _, fields in read_tsv(data / "eval_queries.tsv", 2))
        translated = dict(fields for _, fields in read_tsv(data / "eval_queries_qt.tsv", 2))
        docs = dict(fields for _, fields in read_tsv(data / "eval_docs.tsv", 2))
        assert len(queries) == len(docs) == len(translated) == 10
        assert set(queries) == set(translated)
        # The translated side must actually be in the other language.
        assert all(translated[q] != queries[q] for q in queries)
        qrels = read_qrels(data / "eval_qrels.txt")
        assert len(qrels) == 10 and set(qrels.values()) == {1}

    def test_rejects_split_without_training_pairs(self, tmp_path):
        assert run_cli("gen-corpus", "--out-dir", tmp_path / "x",
                       "--num-pairs", 5, "--eval-pairs", 4) == 2


class TestBuildVocab:
    def test_vocabulary_loads(self, pipeline):
        vocab = Vocabulary.load(pipeline["vocab"])
        assert 5 <= vocab.size <= 80

    def test_missing_pairs_file(self, tmp_path):
        assert run_cli("build-vocab", "--pairs", tmp_path / "nope.tsv",
                       "--out", tmp_path / "v.tsv") == 2


class TestPretrain:
    def test_writes_checkpoint_and_per_step_log(self, pipeline):
        params, enc_cfg = load_checkpoint(pipeline["ckpt"])
        vocab = Vocabulary.load(pipeline["vocab"])
        assert enc_cfg.vocab_size == vocab.size
        assert params
        lines = pipeline["log"].read_bytes().decode().splitlines()
        assert len(lines) == 3

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        outs = []
        for name in ("a", "b"):
            ckpt = tmp_path / f"{name}.ckpt"
            log = tmp_path / f"{name}.log"
            assert run_cli("pretrain", "--pairs", pipeline["data"] / "pairs.tsv",
                           "--vocab", pipeline["vocab"], "--out", ckpt, "--log", log,
                           "--seed", 1, "--steps", 3, "--set", "batch_pairs=4",
                           "--set", "chunk_pairs=2", "--set", "window=12") == 0
            outs.append((ckpt.read_bytes(), log.read_bytes()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]
        assert outs[0][1] == pipeline["log"].read_bytes()

    def test_missing_input_exits_2(self, pipeline, tmp_path):
        assert run_cli("pretrain", "--pairs", tmp_path / "missing.tsv",
                       "--vocab", pipeline["vocab"], "--out", tmp_path / "o.ckpt") == 2

    def test_non_finite_loss_exits_3(self, pipeline, tmp_path):
        # A subnormal temperature sends the scaled similarities to inf and
        # the softmax to nan, which must surface as the numerical exit code.
        rc = run_cli("pretrain", "--pairs", pipeline["data"] / "pairs.tsv",
                     "--vocab", pipeline["vocab"], "--out", tmp_path / "o.ckpt",
                     "--steps", 1, "--set", "temperature=1e-320",
                     "--set", "batch_pairs=4", "--set", "chunk_pairs=4",
                     "--set", "window=12")
        assert rc == 3


class TestFinetune:
    def test_colbert_objective(self, pipeline, tmp_path):
        out = tmp_path / "ft.ckpt"
        assert run_cli("finetune", "--triples", pipeline["data"] / "triples.tsv",
                       "--vocab", pipeline["vocab"], "--checkpoint", pipeline["ckpt"],
                       "--out", out, "--steps", 2, "--set", "batch_pairs=4",
                       "--set", "window=12") == 0
        params, _ = load_checkpoint(out)
        assert params

    def test_dpr_objective_from_random_init(self, pipeline, tmp_path):
        out = tmp_path / "ft.ckpt"
        assert run_cli("finetune", "--triples", pipeline["data"] / "triples.tsv",
                       "--vocab", pipeline["vocab"], "--checkpoint", pipeline["ckpt"],
                       "--out", out, "--objective", "dpr", "--random-init",
                       "--steps", 2, "--seed", 9, "--set", "batch_pairs=4",
                       "--set", "window=12") == 0
        assert out.exists()


@pytest.fixture(scope="module")
def run_files(pipeline):
    """Model-reranked and first-stage-only runs over the eval split."""
    data, root = pipeline["data"], pipeline["root"]
    reranked = root / "model.run"
    lexical = root / "bm25.run"
    common = ("--queries", data / "eval_queries.tsv", "--docs", data / "eval_docs.tsv",
              "--vocab", pipeline["vocab"], "--checkpoint", pipeline["ckpt"],
              "--bm25-queries", data / "eval_queries_qt.tsv", "--depth", 10)
    assert run_cli("rerank", *common, "--out", reranked) == 0
    assert run_cli("rerank", *common, "--out", lexical, "--scorer", "bm25") == 0
    return {"reranked": reranked, "lexical": lexical}


class TestRerank:
    def test_run_parses_with_all_queries(self, run_files):
        runs = read_run(run_files["reranked"])
        assert len(runs) == 10
        assert all(1 <= len(r) <= 10 for r in runs.values())

    def test_first_stage_run_differs_only_in_scores(self, run_files):
        lexical = read_run(run_files["lexical"])
        reranked = read_run(run_files["reranked"])
        assert sorted(lexical) == sorted(reranked)
        for qid in lexical:
            assert sorted(lexical[qid].doc_ids()) == sorted(reranked[qid].doc_ids())

    def test_condenser_strip_changes_nothing(self, pipeline, run_files, tmp_path):
        data = pipeline["data"]
        out = tmp_path / "stripped.run"
        assert run_cli("rerank", "--queries", data / "eval_queries.tsv",
                       "--docs", data / "eval_docs.tsv", "--vocab", pipeline["vocab"],
                       "--checkpoint", pipeline["ckpt"],
                       "--bm25-queries", data / "eval_queries_qt.tsv",
                       "--depth", 10, "--out", out, "--strip-condenser") == 0
        assert out.read_bytes() == run_files["reranked"].read_bytes()

    def test_missing_first_stage_query_exits_2(self, pipeline, tmp_path):
        data = pipeline["data"]
        truncated = tmp_path / "qt_short.tsv"
        lines = (data / "eval_queries_qt.tsv").read_text().splitlines(keepends=True)
        truncated.write_text("".join(lines[:-1]))
        assert run_cli("rerank", "--queries", data / "eval_queries.tsv",
                       "--docs", data / "eval_docs.tsv", "--vocab", pipeline["vocab"],
                       "--checkpoint", pipeline["ckpt"], "--bm25-queries", truncated,
                       "--out", tmp_path / "r.run") == 2


class TestEvaluate:
    def test_report_sections(self, pipeline, run_files, tmp_path):
        report = tmp_path / "report.tsv"
        assert run_cli("evaluate", "--run", run_files["reranked"],
                       "--qrels", pipeline["data"] / "eval_qrels.txt",
                       "--k", 5, "--k", 10, "--out", report) == 0
        rows = read_report(report)
        assert set(rows) == {("run", "ndcg@5"), ("run", "ndcg@10")}
        assert all(0.0 <= v <= 1.0 for v in rows.values())

    def test_baseline_comparison_rows(self, pipeline, run_files, tmp_path):
        report = tmp_path / "report.tsv"
        assert run_cli("evaluate", "--run", run_files["reranked"],
                       "--qrels", pipeline["data"] / "eval_qrels.txt",
                       "--baseline-run", run_files["lexical"], "--k", 10,
                       "--num-comparisons", 2, "--out", report) == 0
        rows = read_report(report)
        expected = {("run", "ndcg@10"), ("baseline", "ndcg@10"), ("compare", "t@10"),
                    ("compare", "p@10"), ("compare", "p_corrected@10"),
                    ("compare", "delta@10")}
        assert set(rows) == expected
        assert 0.0 <= rows[("compare", "p@10")] <= 1.0
        assert rows[("compare", "p_corrected@10")] >= rows[("compare", "p@10")]

    def test_missing_run_exits_2(self, pipeline, tmp_path):
        assert run_cli("evaluate", "--run", tmp_path / "missing.run",
                       "--qrels", pipeline["data"] / "eval_qrels.txt") == 2

    def test_malformed_run_exits_2(self, pipeline, tmp_path):
        bad = tmp_path / "bad.run"
        bad.write_text("q1 Q0 d1 not-a-rank 1.0 tag\n")
        assert run_cli("evaluate", "--run", bad,
                       "--qrels", pipeline["data"] / "eval_qrels.txt") == 2

    def test_zero_cutoff_exits_2(self, pipeline, run_files):
        assert run_cli("evaluate", "--run", run_files["reranked"],
                       "--qrels", pipeline["data"] / "eval_qrels.txt", "--k", 0) == 2


class TestReportFormat:
    def test_round_trip_is_lossless(self, tmp_path):
        path = tmp_path / "r.tsv"
        rows = [("run", "ndcg@10", 0.1 + 0.2), ("compare", "t@10", -3.5),
                ("compare", "p@10", 1e-17)]
        write_report(path, rows)
        loaded = read_report(path)
        for section, metric, value in rows:
            assert loaded[(section, metric)] == value

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("run\tndcg@10\tnot-a-float\n")
        with pytest.raises(CorpusFormatError):
            read_report(path)


class TestGradcheckCommand:
    def test_corrupted_gradient_is_detected(self, monkeypatch, capsys):
        original = ad.gelu

        def corrupted(a):
            node = original(a)
            if node._vjp is not None:
                inner = node._vjp
                node._vjp = lambda g: tuple(gr * 1.01 for gr in inner(g))
            return node

        monkeypatch.setattr(ad, "gelu", corrupted)
        assert run_cli("gradcheck") == 1
        out = capsys.readouterr()
        assert "FAIL" in out.out + out.err


class TestAblate:
    def test_grid_covers_both_axes(self, pipeline, tmp_path):
        data = pipeline["data"]
        report = tmp_path / "grid.tsv"
        assert run_cli("ablate", "--pairs", data / "pairs.tsv",
                       "--triples", data / "triples.tsv",
                       "--queries", data / "eval_queries.tsv",
                       "--docs", data / "eval_docs.tsv",
                       "--qrels", data / "eval_qrels.txt",
                       "--vocab", pipeline["vocab"],
                       "--bm25-queries", data / "eval_queries_qt.tsv",
                       "--out", report, "--steps", 1, "--finetune-steps", 1,
                       "--depth", 5, "--k", 5, "--seeds", 1, "--seed", 3,
                       "--set", "batch_pairs=4", "--set", "chunk_pairs=4",
                       "--set", "window=8") == 0
        rows = read_report(report)
        sections = {section for section, _ in rows}
        assert sections == {f"cond={c} sim={s}" for c in ("on", "off")
                            for s in ("none", "cls", "maxsim")}
        for section in sections:
            assert 0.0 <= rows[(section, "ndcg@5 mean")] <= 1.0


class TestParserBehavior:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("--help")
        assert exc.value.code == 0

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_module_entrypoint(self):
        proc = subprocess.run([sys.executable, "-m", "miniclir.cli", "--help"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        assert "usage" in proc.stdout.lower()
