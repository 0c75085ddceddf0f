"""Whitespace tokenizer with a frequency-ranked vocabulary and MLM masking.

Five reserved ids come first in every vocabulary: PAD=0, CLS=1, SEP=2,
MASK=3, UNK=4. Corpus tokens are ranked by frequency (ties broken
lexicographically) and assigned ids from 5 upward, so attention masks can
be recovered from ids alone (PAD is the only id 0) and "special" always
means id < 5.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorpusFormatError
from .fileio import atomic_write, escape_field, read_tsv

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4
NUM_RESERVED = 5
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token<->id bijection with the reserved block at ids 0..4."""

    token_to_id: dict
    id_to_token: tuple

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            for token_id, token in enumerate(self.id_to_token):
                fh.write(f"{escape_field(token)}\t{token_id}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        for lineno, fields in read_tsv(path, num_fields=2):
            token, raw_id = fields
            try:
                token_id = int(raw_id)
            except ValueError:
                raise CorpusFormatError(f"{path}: line {lineno}: id {raw_id!r} is not an integer")
            entries.append((lineno, token, token_id))
        if len(entries) < NUM_RESERVED:
            raise CorpusFormatError(f"{path}: vocabulary must contain the {NUM_RESERVED} reserved tokens")
        id_to_token = [None] * len(entries)
        for lineno, token, token_id in entries:
            if not 0 <= token_id < len(entries) or id_to_token[token_id] is not None:
                raise CorpusFormatError(f"{path}: line {lineno}: duplicate or out-of-range id {token_id}")
            id_to_token[token_id] = token
        for i, expected in enumerate(RESERVED_TOKENS):
            if id_to_token[i] != expected:
                raise CorpusFormatError(f"{path}: id {i} must be {expected}, got {id_to_token[i]!r}")
        token_to_id = {token: i for i, token in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise CorpusFormatError(f"{path}: token surfaces are not unique")
        return cls(token_to_id=token_to_id, id_to_token=tuple(id_to_token))


def build_vocab(corpus_texts, max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary over whitespace tokens, capped at max_size.

    Ties in frequency break lexicographically. Corpus tokens spelled like a
    reserved surface are skipped so reserved ids stay reserved.
    """
    if max_size < NUM_RESERVED:
        raise ContractError(f"max_size must be at least {NUM_RESERVED}, got {max_size}")
    counts = Counter()
    for text in corpus_texts:
        counts.update(tok for tok in text.split() if tok not in RESERVED_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [token for token, _ in ranked[: max_size - NUM_RESERVED]]
    id_to_token = RESERVED_TOKENS + tuple(kept)
    return Vocabulary(
        token_to_id={token: i for i, token in enumerate(id_to_token)},
        id_to_token=id_to_token,
    )


def encode_tokens(tokens, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS] + token ids (OOV -> UNK), truncated to max_len, PAD-padded."""
    if max_len < 2:
        raise ContractError(f"max_len must be at least 2, got {max_len}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    body = [vocab.lookup(tok) for tok in tokens[: max_len - 1]]
    ids[1 : 1 + len(body)] = body
    return ids


def encode(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    return encode_tokens(text.split(), vocab, max_len)


def attention_mask_for(input_ids: np.ndarray) -> np.ndarray:
    """1 at real positions, 0 at padding (PAD never appears inside a span)."""
    return (np.asarray(input_ids) != PAD_ID).astype(np.int64)


@dataclass(frozen=True)
class MaskedSequence:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray


def mask_tokens(input_ids, attention_mask, *, vocab_size: int,
                mask_rate: float = 0.15, rng=None):
    """BERT-style masking over a batch: returns (masked_ids, labels).

    Eligible positions are attended and non-special (id >= 5). Each is
    selected independently with probability mask_rate; selected positions
    become [MASK] (80%), a random non-reserved id (10%), or stay unchanged
    (10%). Labels hold the original id where selected, -1 elsewhere.

    Exactly three generator draws of fixed shape happen per call, so the
    stream position depends only on the batch shape.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ContractError(f"mask_rate must lie in [0, 1], got {mask_rate}")
    ids = np.asarray(input_ids, dtype=np.int64)
    attention = np.asarray(attention_mask)
    eligible = (attention != 0) & (ids >= NUM_RESERVED)

    select_draw = rng.random(ids.shape)
    branch_draw = rng.random(ids.shape)
    random_ids = rng.integers(NUM_RESERVED, max(vocab_size, NUM_RESERVED + 1), size=ids.shape)

    selected = eligible & (select_draw < mask_rate)
    labels = np.where(selected, ids, -1)
    masked = ids.copy()
    masked[selected & (branch_draw < 0.8)] = MASK_ID
    use_random = selected & (branch_draw >= 0.8) & (branch_draw < 0.9)
    masked[use_random] = random_ids[use_random]
    return masked, labels


def apply_mlm_mask(seq, vocab: Vocabulary, mask_rate: float, rng) -> MaskedSequence:
    """Single-sequence view of `mask_tokens`, packaged with its masks."""
    ids = np.asarray(seq, dtype=np.int64)
    attention = attention_mask_for(ids)
    masked, labels = mask_tokens(ids[None, :], attention[None, :],
                                 vocab_size=vocab.size, mask_rate=mask_rate, rng=rng)
    return MaskedSequence(input_ids=masked[0], attention_mask=attention, mlm_labels=labels[0])
