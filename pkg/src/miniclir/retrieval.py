"""First-stage lexical retrieval, neural reranking, and run-file I/O.

BM25 builds the candidate pool; `rerank` re-scores candidates with a
trained encoder using either token-level max-dot similarity or the CLS
dot product. Rankings and judgments travel in the classic space-separated
run/qrels text formats.
"""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, encode
from .errors import ContractError, CorpusFormatError
from .fileio import atomic_write
from .kernels import maxsim_scores
from .vocab import Vocabulary, attention_mask_for, encode as encode_text

BM25_K1 = 0.9
BM25_B = 0.4
RERANK_SCORERS = ("maxsim", "cls")


@dataclass(frozen=True)
class RankedList:
    """Scored documents for one query, best first, ranks implied 1-based."""

    query_id: str
    entries: tuple  # ((doc_id, score), ...) with scores non-increasing

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(d), float(s)) for d, s in self.entries))
        seen = set()
        prev = math.inf
        for doc_id, score in self.entries:
            if doc_id in seen:
                raise ContractError(f"ranked list for query {self.query_id!r} repeats doc {doc_id!r}")
            seen.add(doc_id)
            if score > prev:
                raise ContractError(
                    f"ranked list for query {self.query_id!r} has increasing scores at doc {doc_id!r}")
            prev = score

    def __len__(self):
        return len(self.entries)

    def doc_ids(self) -> tuple:
        return tuple(doc_id for doc_id, _ in self.entries)


def _tokenize(text: str) -> list:
    return text.lower().split()


class BM25Index:
    """Okapi BM25 inverted index (k1=0.9, b=0.4, non-negative smoothed IDF)."""

    def __init__(self, docs: dict, k1: float = BM25_K1, b: float = BM25_B):
        if not docs:
            raise ContractError("cannot index an empty document collection")
        self.k1 = k1
        self.b = b
        self.doc_ids = sorted(docs)
        self.term_freqs = {doc_id: Counter(_tokenize(docs[doc_id])) for doc_id in self.doc_ids}
        self.doc_lens = {doc_id: sum(tf.values()) for doc_id, tf in self.term_freqs.items()}
        self.avg_len = sum(self.doc_lens.values()) / len(self.doc_ids)
        self.postings = {}
        for doc_id in self.doc_ids:
            for term, count in self.term_freqs[doc_id].items():
                self.postings.setdefault(term, []).append((doc_id, count))

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = len(self.doc_ids)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def search(self, query: str, k: int) -> RankedList:
        """Top-k by BM25; ties broken by doc_id ascending. Query terms
        contribute once per occurrence; all-unseen queries score nothing."""
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        scores = {}
        for term in _tokenize(query):
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for doc_id, tf in postings:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[doc_id] / self.avg_len)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
        return RankedList(query_id="", entries=tuple(ordered))


def bm25_search(index: BM25Index, query_id: str, query: str, k: int) -> RankedList:
    result = index.search(query, k)
    return RankedList(query_id=query_id, entries=result.entries)


def _encode_no_grad(texts, vocab: Vocabulary, params: dict, cfg: EncoderConfig):
    ids = np.stack([encode_text(t, vocab, cfg.max_len) for t in texts])
    att = attention_mask_for(ids)
    with ad.no_grad():
        out = encode(params, cfg, ids, att)
    return out, att


def score_candidates(query: str, doc_texts, params: dict, cfg: EncoderConfig,
                     vocab: Vocabulary, scorer: str = "maxsim",
                     batch_size: int = 32) -> np.ndarray:
    """Model score of one query against each document text, in order."""
    if scorer not in RERANK_SCORERS:
        raise ContractError(f"scorer must be one of {RERANK_SCORERS}, got {scorer!r}")
    q_out, q_att = _encode_no_grad([query], vocab, params, cfg)
    scores = []
    for start in range(0, len(doc_texts), batch_size):
        chunk = doc_texts[start:start + batch_size]
        d_out, d_att = _encode_no_grad(chunk, vocab, params, cfg)
        if scorer == "maxsim":
            part = maxsim_scores(q_out.sim_tokens.data[0], q_att[0],
                                 d_out.sim_tokens.data, d_att)
        else:
            part = d_out.cls.data @ q_out.cls.data[0]
        scores.append(np.asarray(part, dtype=np.float64).reshape(-1))
    return np.concatenate(scores) if scores else np.zeros(0)


def rerank(query: str, candidates: RankedList, docs: dict, params: dict,
           cfg: EncoderConfig, vocab: Vocabulary, scorer: str = "maxsim",
           batch_size: int = 32) -> RankedList:
    """Re-score every candidate with the encoder and stable-sort by score
    descending, so equal-scored documents keep their candidate order. The
    output is a permutation of the input documents."""
    if len(candidates) == 0:
        raise ContractError("rerank needs a non-empty candidate list")
    missing = [d for d in candidates.doc_ids() if d not in docs]
    if missing:
        raise ContractError(f"candidates missing from the document store: {missing[:3]}")
    texts = [docs[d] for d in candidates.doc_ids()]
    scores = score_candidates(query, texts, params, cfg, vocab, scorer, batch_size)
    order = sorted(range(len(texts)), key=lambda i: -scores[i])
    entries = tuple((candidates.doc_ids()[i], float(scores[i])) for i in order)
    return RankedList(query_id=candidates.query_id, entries=entries)


# ---------------------------------------------------------------------------
# run / qrels files: "qid Q0 docid rank score tag" and "qid 0 docid rel"
# ---------------------------------------------------------------------------


def _check_field(value: str, what: str) -> str:
    if not value or any(ch.isspace() for ch in value):
        raise ContractError(f"{what} {value!r} must be non-empty and whitespace-free")
    return value


def write_run(path, ranked_lists, tag: str = "miniclir") -> None:
    """One line per entry, scores via repr for lossless round-tripping."""
    _check_field(tag, "run tag")
    with atomic_write(path) as fh:
        for ranked in ranked_lists:
            qid = _check_field(ranked.query_id, "query_id")
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                _check_field(doc_id, "doc_id")
                fh.write(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path) -> dict:
    """Parse a run file back into {query_id: RankedList}, validating ranks."""
    per_query = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise CorpusFormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
            qid, marker, doc_id, rank_s, score_s, _tag = parts
            if marker != "Q0":
                raise CorpusFormatError(f"{path}: line {lineno}: second field must be Q0, got {marker!r}")
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: bad rank or score") from exc
            rows = per_query.setdefault(qid, [])
            if rank != len(rows) + 1:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: rank {rank} out of sequence for query {qid!r}")
            rows.append((doc_id, score))
    out = {}
    for qid, rows in per_query.items():
        try:
            out[qid] = RankedList(query_id=qid, entries=tuple(rows))
        except ContractError as exc:
            raise CorpusFormatError(f"{path}: query {qid!r}: {exc}") from exc
    return out


def write_qrels(path, qrels: dict) -> None:
    """qrels maps (query_id, doc_id) -> integer grade >= 0."""
    with atomic_write(path) as fh:
        for (qid, doc_id), grade in sorted(qrels.items()):
            _check_field(qid, "query_id")
            _check_field(doc_id, "doc_id")
            if int(grade) != grade or grade < 0:
                raise ContractError(f"relevance grade for ({qid}, {doc_id}) must be a non-negative "
                                    f"integer, got {grade!r}")
            fh.write(f"{qid} 0 {doc_id} {int(grade)}\n")


def read_qrels(path) -> dict:
    qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise CorpusFormatError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            qid, _zero, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: bad relevance grade {grade_s!r}") from exc
            if grade < 0:
                raise CorpusFormatError(f"{path}: line {lineno}: negative relevance grade {grade}")
            qrels[(qid, doc_id)] = grade
    return qrels
