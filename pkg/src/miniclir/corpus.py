"""Document-aligned corpora: ingestion, span sampling, batch construction,
and a synthetic cipher-language generator for end-to-end verification.

Pair file format (one record per line, tab-separated, backslash escaping
for tabs/newlines): pair_id, lang_s, lang_t, text_s, text_t, grade.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorpusFormatError, EmptyCorpusError
from .fileio import atomic_write, escape_field, read_tsv
from .rng import derive_rng
from .vocab import Vocabulary, attention_mask_for, encode_tokens, mask_tokens

PAIR_RECORD_FIELDS = 6


@dataclass(frozen=True)
class DocumentPair:
    pair_id: str
    lang_s: str
    lang_t: str
    text_s: str
    text_t: str

    def __post_init__(self):
        if self.lang_s == self.lang_t:
            raise ContractError(f"pair {self.pair_id!r}: sides must differ in language, both are {self.lang_s!r}")
        if not self.text_s.strip() or not self.text_t.strip():
            raise ContractError(f"pair {self.pair_id!r}: both texts must be non-empty")


@dataclass(frozen=True)
class SpanBatch:
    """Interleaved spans [S_1, T_1, ..., S_n, T_n] ready for the encoder.

    Row 2i is the source-side span of pair i, row 2i+1 the target side;
    `pair_index` and `side` spell that out per row.
    """

    input_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray
    pair_index: np.ndarray
    side: tuple

    @property
    def num_pairs(self) -> int:
        return self.input_ids.shape[0] // 2


def write_pairs(path, records) -> None:
    """Write (DocumentPair, grade) records in file order."""
    with atomic_write(path) as fh:
        for pair, grade in records:
            fields = (pair.pair_id, pair.lang_s, pair.lang_t, pair.text_s, pair.text_t, str(grade))
            fh.write("\t".join(escape_field(f) for f in fields) + "\n")


def ingest_pairs(path) -> list:
    """Load pairs, keep only the maximum grade present, dedup by pair_id.

    File order is preserved; the first occurrence of a duplicated pair_id
    wins. Malformed records fail with their line number; an empty file or
    a filter that removes everything is an empty-corpus error.
    """
    records = []
    for lineno, fields in read_tsv(path, num_fields=PAIR_RECORD_FIELDS):
        pair_id, lang_s, lang_t, text_s, text_t, raw_grade = fields
        try:
            grade = int(raw_grade)
        except ValueError:
            raise CorpusFormatError(f"{path}: line {lineno}: grade {raw_grade!r} is not an integer")
        try:
            pair = DocumentPair(pair_id, lang_s, lang_t, text_s, text_t)
        except ContractError as exc:
            raise CorpusFormatError(f"{path}: line {lineno}: {exc}") from exc
        records.append((pair, grade))
    if not records:
        raise EmptyCorpusError(f"{path}: no pair records found")
    top = max(grade for _, grade in records)
    seen = set()
    pairs = []
    for pair, grade in records:
        if grade != top or pair.pair_id in seen:
            continue
        seen.add(pair.pair_id)
        pairs.append(pair)
    if not pairs:
        raise EmptyCorpusError(f"{path}: no pairs survive the grade filter")
    return pairs


def sample_span(tokens, window: int, rng):
    """A random contiguous window; documents at or under the window pass whole."""
    if window < 1:
        raise ContractError(f"window must be at least 1, got {window}")
    n = len(tokens)
    if n <= window:
        return tokens
    offset = int(rng.integers(0, n - window + 1))
    return tokens[offset : offset + window]


def build_batch(pairs, vocab: Vocabulary, window: int, max_len: int,
                mask_rate: float, rng) -> SpanBatch:
    """Sample one span per document side, encode, and mask, interleaved S,T.

    Offsets are drawn independently per side, in pair order (S then T), so
    the batch is a pure function of the incoming generator state.
    """
    if len(pairs) < 1:
        raise ContractError("build_batch needs at least one pair")
    if max_len < window + 1:
        raise ContractError(f"max_len {max_len} too small for window {window} plus [CLS]")
    rows = []
    pair_index = []
    side = []
    for i, pair in enumerate(pairs):
        for which, text in (("S", pair.text_s), ("T", pair.text_t)):
            span = sample_span(text.split(), window, rng)
            rows.append(encode_tokens(span, vocab, max_len))
            pair_index.append(i)
            side.append(which)
    input_ids = np.stack(rows)
    attention = attention_mask_for(input_ids)
    masked, labels = mask_tokens(input_ids, attention, vocab_size=vocab.size,
                                 mask_rate=mask_rate, rng=rng)
    return SpanBatch(input_ids=masked, attention_mask=attention, mlm_labels=labels,
                     pair_index=np.asarray(pair_index, dtype=np.int64), side=tuple(side))


def generate_cipher_corpus(num_pairs: int, vocab_size: int, doc_len_range,
                           seed: int, noise_rate: float = 0.1):
    """Synthetic aligned corpus: language T is a token-level cipher of S.

    Source documents are uniform random sequences over s000..s<V-1>; the
    target side maps each token through a fixed random bijection onto
    t000..t<V-1>, then independently resamples `noise_rate` of the
    positions uniformly. Returns (records, bijection) where records are
    (DocumentPair, grade) with grade 6 and bijection maps s-token surface
    to t-token surface.
    """
    if vocab_size < 10:
        raise ContractError(f"cipher vocab_size must be at least 10, got {vocab_size}")
    lo, hi = doc_len_range
    if not 1 <= lo <= hi:
        raise ContractError(f"doc_len_range must satisfy 1 <= lo <= hi, got {doc_len_range}")
    width = max(3, len(str(vocab_size - 1)))
    s_tokens = [f"s{i:0{width}d}" for i in range(vocab_size)]
    t_tokens = [f"t{i:0{width}d}" for i in range(vocab_size)]

    rng = derive_rng(seed, "cipher-corpus")
    perm = rng.permutation(vocab_size)
    bijection = {s_tokens[i]: t_tokens[perm[i]] for i in range(vocab_size)}

    records = []
    for p in range(num_pairs):
        length = int(rng.integers(lo, hi + 1))
        s_idx = rng.integers(0, vocab_size, size=length)
        t_idx = perm[s_idx]
        noisy = rng.random(length) < noise_rate
        t_idx = np.where(noisy, rng.integers(0, vocab_size, size=length), t_idx)
        pair = DocumentPair(
            pair_id=f"pair{p:05d}",
            lang_s="src",
            lang_t="tgt",
            text_s=" ".join(s_tokens[i] for i in s_idx),
            text_t=" ".join(t_tokens[i] for i in t_idx),
        )
        records.append((pair, 6))
    return records, bijection


def write_bijection(path, bijection: dict) -> None:
    """Sidecar ground truth: one "s_token<TAB>t_token" line per entry."""
    with atomic_write(path) as fh:
        for s_tok in sorted(bijection):
            fh.write(f"{escape_field(s_tok)}\t{escape_field(bijection[s_tok])}\n")


def read_bijection(path) -> dict:
    bijection = {}
    for lineno, (s_tok, t_tok) in read_tsv(path, num_fields=2):
        if s_tok in bijection:
            raise CorpusFormatError(f"{path}: line {lineno}: duplicate source token {s_tok!r}")
        bijection[s_tok] = t_tok
    if not bijection:
        raise EmptyCorpusError(f"{path}: no bijection entries found")
    return bijection


def translate_text(text: str, bijection: dict) -> str:
    """Token-by-token query translation through the cipher's ground-truth
    mapping, mirroring a translate-the-query lexical baseline."""
    out = []
    for token in text.split():
        if token not in bijection:
            raise ContractError(f"token {token!r} has no translation in the bijection")
        out.append(bijection[token])
    return " ".join(out)
