"""Training loops: continued pretraining (direct and gradient-cached
steps), triplet fine-tuning with late-interaction and bi-encoder
objectives, and the run configuration they all share.

The cached step trades memory for compute in three passes — encode all
chunks without gradients and cache the similarity-facing representations,
differentiate the contrastive loss w.r.t. the cache, then re-encode each
chunk with gradients and inject the cached gradient alongside that chunk's
share of the MLM terms. One optimizer update per step either way, and the
parameter gradients match the direct step to float64 accuracy.
"""

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .corpus import SpanBatch, build_batch
from .encoder import (EncoderConfig, condenser_logits, encode, init_params,
                      mlm_logits)
from .errors import ContractError, EmptyCorpusError, NonFiniteLossError
from .fileio import atomic_write, escape_field, read_tsv
from .losses import (LossBreakdown, LossConfig, batch_loss, contrastive_reps,
                     maxsim_pairs_op, per_span_cross_entropy, similarity_from_reps)
from .rng import derive_rng
from .vocab import Vocabulary, attention_mask_for, encode as encode_text

PRECISIONS = {"float64": np.float64, "float32": np.float32}
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig
    seed: int = 0
    steps: int = 300
    learning_rate: float = 1e-3
    batch_pairs: int = 16
    chunk_pairs: int = 4
    window: int = 48
    mask_rate: float = 0.15
    similarity: str = "maxsim"
    condenser: bool = True
    temperature: float = 1.0
    denominator: str = "anchor"
    optimizer: str = "adam"
    warmup_steps: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_pairs < 1 or self.chunk_pairs < 1:
            raise ContractError("batch_pairs and chunk_pairs must be positive")
        if self.batch_pairs % self.chunk_pairs != 0:
            raise ContractError(
                f"chunk_pairs {self.chunk_pairs} must divide batch_pairs {self.batch_pairs}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ContractError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ContractError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.warmup_steps < 0:
            raise ContractError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        self.loss_config()  # validates similarity/temperature/denominator

    def loss_config(self) -> LossConfig:
        return LossConfig(similarity=self.similarity, condenser=self.condenser,
                          temperature=self.temperature, denominator=self.denominator)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


_CONFIG_SCALARS = {f.name: f.type for f in fields(RunConfig) if f.name != "encoder"}


def _coerce_flag(name: str, kind, raw: str):
    text = raw.strip()
    if kind is bool or kind == "bool":
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"config key {name}: expected a boolean, got {raw!r}")
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    return text


def apply_config_overrides(base: RunConfig, mapping: dict) -> RunConfig:
    """Override RunConfig fields from string values; "encoder.X" reaches inside.

    Changing encoder.num_layers without also setting encoder.middle_layer
    re-derives the middle tap from the new depth instead of carrying the
    old resolved value into a config where it may be out of range.
    """
    run_kwargs = {}
    enc_kwargs = {}
    enc_fields = {f.name: f.type for f in fields(EncoderConfig)}
    for key, raw in mapping.items():
        if key.startswith("encoder."):
            sub = key[len("encoder."):]
            if sub not in enc_fields:
                raise ContractError(f"unknown config key {key!r}")
            enc_kwargs[sub] = _coerce_flag(key, enc_fields[sub], str(raw))
        elif key in _CONFIG_SCALARS:
            run_kwargs[key] = _coerce_flag(key, _CONFIG_SCALARS[key], str(raw))
        else:
            raise ContractError(f"unknown config key {key!r}")
    encoder = base.encoder
    if enc_kwargs:
        current = {f.name: getattr(encoder, f.name) for f in fields(EncoderConfig)}
        if "num_layers" in enc_kwargs and "middle_layer" not in enc_kwargs:
            current["middle_layer"] = None
        current.update(enc_kwargs)
        encoder = EncoderConfig(**current)
    return replace(base, encoder=encoder, **run_kwargs)


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and #-comments ignored."""
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ContractError(f"{path}: line {lineno}: expected key=value, got {text!r}")
            key, _, value = text.partition("=")
            mapping[key.strip()] = value.strip()
    return mapping


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, learning_rate: float, warmup_steps: int = 0):
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.t = 0

    def _lr(self) -> float:
        if self.warmup_steps and self.t <= self.warmup_steps:
            return self.learning_rate * self.t / self.warmup_steps
        return self.learning_rate

    def step(self, params: dict) -> None:
        self.t += 1
        lr = self._lr()
        for name in sorted(params):
            p = params[name]
            p.data -= lr * p.grad


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, warmup_steps: int = 0):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {}
        self.v = {}

    def _lr(self) -> float:
        if self.warmup_steps and self.t <= self.warmup_steps:
            return self.learning_rate * self.t / self.warmup_steps
        return self.learning_rate

    def step(self, params: dict) -> None:
        self.t += 1
        lr = self._lr()
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / (1.0 - self.beta1 ** self.t)
            vhat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: RunConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate, cfg.warmup_steps)
    return Adam(cfg.learning_rate, warmup_steps=cfg.warmup_steps)


# ---------------------------------------------------------------------------
# pretraining steps
# ---------------------------------------------------------------------------


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    if not np.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: {breakdown.as_dict()}",
            components=breakdown.as_dict())


def pretrain_step_direct(batch: SpanBatch, params: dict, cfg: RunConfig,
                         optimizer, step: int = 0) -> LossBreakdown:
    """One forward/backward/update over the whole batch at once."""
    loss_cfg = cfg.loss_config()
    ad.zero_grads(params)
    rng = derive_rng(cfg.seed, "dropout", step) if cfg.encoder.dropout_rate > 0 else None
    out = encode(params, cfg.encoder, batch.input_ids, batch.attention_mask, dropout_rng=rng)
    breakdown = batch_loss(out, batch.mlm_labels, loss_cfg, params, cfg.encoder)
    _check_finite(breakdown, step)
    ad.backward(breakdown.total_node)
    optimizer.step(params)
    return breakdown


def _chunk_slices(num_spans: int, chunk_pairs: int):
    rows = 2 * chunk_pairs
    return [slice(start, start + rows) for start in range(0, num_spans, rows)]


def pretrain_step_cached(batch: SpanBatch, params: dict, cfg: RunConfig,
                         optimizer, step: int = 0) -> LossBreakdown:
    """Gradient-cache emulation of the direct step in three passes.

    Representations that feed the contrastive loss are cached from a
    no-gradient pass, the loss is differentiated w.r.t. the cache, and
    each chunk is re-encoded exactly once with the cached gradient
    injected via an inner product (its VJP reproduces the chain rule).
    Chunk re-encodes see identical inputs and, when dropout is active, an
    identically re-derived noise stream, so pass 1 and pass 3 agree.
    """
    loss_cfg = cfg.loss_config()
    num_spans = batch.input_ids.shape[0]
    slices = _chunk_slices(num_spans, cfg.chunk_pairs)
    dropout = cfg.encoder.dropout_rate > 0

    def chunk_rng(index: int):
        return derive_rng(cfg.seed, "dropout", step, index) if dropout else None

    kind = loss_cfg.similarity
    zero = ad.Tensor(np.zeros((), dtype=cfg.dtype))
    co_value = 0.0
    rep_grads = None
    if kind != "none":
        cached = []
        with ad.no_grad():
            for i, sl in enumerate(slices):
                out = encode(params, cfg.encoder, batch.input_ids[sl],
                             batch.attention_mask[sl], dropout_rng=chunk_rng(i))
                cached.append(contrastive_reps(out, kind).data)
        leaf = ad.Tensor(np.concatenate(cached, axis=0), requires_grad=True)
        co = similarity_from_reps(kind, leaf, batch.attention_mask,
                                  loss_cfg.temperature, loss_cfg.denominator)
        ad.backward(co)
        co_value = float(co.data)
        rep_grads = leaf.grad

    ad.zero_grads(params)
    mlm_value = 0.0
    cd_value = 0.0
    for i, sl in enumerate(slices):
        share = (sl.stop - sl.start) / num_spans
        out = encode(params, cfg.encoder, batch.input_ids[sl],
                     batch.attention_mask[sl], dropout_rng=chunk_rng(i))
        terms = []
        if rep_grads is not None:
            reps = contrastive_reps(out, kind)
            terms.append(ad.sum_(ad.mul(reps, ad.Tensor(rep_grads[sl]))))
        mlm_chunk = ad.mul(ad.mean_(per_span_cross_entropy(
            mlm_logits(params, cfg.encoder, out), batch.mlm_labels[sl])), share)
        mlm_value += float(mlm_chunk.data)
        terms.append(mlm_chunk)
        if loss_cfg.condenser:
            cd_chunk = ad.mul(ad.mean_(per_span_cross_entropy(
                condenser_logits(params, cfg.encoder, out), batch.mlm_labels[sl])), share)
            cd_value += float(cd_chunk.data)
            terms.append(cd_chunk)
        chunk_loss = terms[0]
        for term in terms[1:]:
            chunk_loss = ad.add(chunk_loss, term)
        ad.backward(chunk_loss)

    breakdown = LossBreakdown(
        contrastive=co_value, mlm=mlm_value, cdmlm=cd_value,
        total=co_value + mlm_value + cd_value,
        contrastive_node=zero, mlm_node=zero, cdmlm_node=zero, total_node=zero)
    _check_finite(breakdown, step)
    optimizer.step(params)
    return breakdown


def pair_schedule(num_pairs: int, batch_pairs: int, steps: int, seed: int):
    """Deterministic batch indices: per-epoch permutations, remainder dropped.

    Yields `steps` arrays of `batch_pairs` pair indices. Every epoch is a
    permutation of range(num_pairs), so each pair appears exactly once per
    completed epoch.
    """
    if num_pairs < batch_pairs:
        raise ContractError(f"need at least {batch_pairs} pairs, got {num_pairs}")
    per_epoch = num_pairs // batch_pairs
    produced = 0
    epoch = 0
    while produced < steps:
        perm = derive_rng(seed, "epoch", epoch).permutation(num_pairs)
        for b in range(per_epoch):
            if produced == steps:
                return
            yield perm[b * batch_pairs : (b + 1) * batch_pairs]
            produced += 1
        epoch += 1


def format_log_line(step: int, breakdown: LossBreakdown) -> str:
    values = breakdown.as_dict()
    return "\t".join([str(step)] + [repr(values[k]) for k in ("contrastive", "mlm", "cdmlm", "total")])


def pretrain(pairs, vocab: Vocabulary, cfg: RunConfig, log_path=None,
             params: dict = None, progress=None):
    """Full continued-pretraining loop; returns (params, history).

    The log file holds one line per step — step index and the four loss
    components, formatted with repr so reruns are byte-identical. Wall
    time goes to `progress` (a callable) only, keeping logs deterministic.
    """
    if params is None:
        params = init_params(cfg.encoder, derive_rng(cfg.seed, "init"), dtype=cfg.dtype)
    optimizer = make_optimizer(cfg)
    step_fn = pretrain_step_cached if cfg.chunk_pairs < cfg.batch_pairs else pretrain_step_direct
    history = []
    lines = []
    start = time.perf_counter()
    for step, idx in enumerate(pair_schedule(len(pairs), cfg.batch_pairs, cfg.steps, cfg.seed)):
        batch = build_batch([pairs[i] for i in idx], vocab, cfg.window,
                            cfg.encoder.max_len, cfg.mask_rate,
                            derive_rng(cfg.seed, "batch", step))
        breakdown = step_fn(batch, params, cfg, optimizer, step=step)
        history.append(breakdown.detached())
        lines.append(format_log_line(step, breakdown))
        if progress is not None:
            progress(step, breakdown, time.perf_counter() - start)
    if log_path is not None:
        with atomic_write(log_path) as fh:
            for line in lines:
                fh.write(line + "\n")
    return params, history


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingTriple:
    query: str
    positive: str
    negative: str

    def __post_init__(self):
        if not (self.query.strip() and self.positive.strip() and self.negative.strip()):
            raise ContractError("triple fields must all be non-empty")


def write_triples(path, triples) -> None:
    with atomic_write(path) as fh:
        for t in triples:
            fh.write("\t".join(escape_field(f) for f in (t.query, t.positive, t.negative)) + "\n")


def read_triples(path) -> list:
    triples = []
    for lineno, (query, positive, negative) in read_tsv(path, num_fields=3):
        try:
            triples.append(TrainingTriple(query, positive, negative))
        except ContractError as exc:
            raise EmptyCorpusError(f"{path}: line {lineno}: {exc}") from exc
    return triples


def _encode_texts(texts, vocab, params, cfg: RunConfig):
    ids = np.stack([encode_text(t, vocab, cfg.encoder.max_len) for t in texts])
    att = attention_mask_for(ids)
    return encode(params, cfg.encoder, ids, att), att


def _finetune_loop(triples, params, cfg: RunConfig, batch_loss_fn):
    if not triples:
        raise ContractError("fine-tuning needs at least one triple")
    optimizer = make_optimizer(cfg)
    batch_size = min(cfg.batch_pairs, len(triples))
    history = []
    for step, idx in enumerate(pair_schedule(len(triples), batch_size, cfg.steps, cfg.seed)):
        batch = [triples[i] for i in idx]
        ad.zero_grads(params)
        loss = batch_loss_fn(batch, params)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite fine-tuning loss at step {step}: {value}",
                                     components={"loss": value})
        ad.backward(loss)
        optimizer.step(params)
        history.append(value)
    return params, history


def finetune_colbert(triples, params: dict, cfg: RunConfig, vocab: Vocabulary):
    """Late-interaction objective: softmax CE over (maxsim+, maxsim-) per triple."""

    def batch_loss_fn(batch, params):
        q_out, q_att = _encode_texts([t.query for t in batch], vocab, params, cfg)
        p_out, p_att = _encode_texts([t.positive for t in batch], vocab, params, cfg)
        n_out, n_att = _encode_texts([t.negative for t in batch], vocab, params, cfg)
        pos = maxsim_pairs_op(q_out.sim_tokens, q_att, p_out.sim_tokens, p_att)
        neg = maxsim_pairs_op(q_out.sim_tokens, q_att, n_out.sim_tokens, n_att)
        b = len(batch)
        logits = ad.concat([ad.reshape(pos, (b, 1)), ad.reshape(neg, (b, 1))], axis=1)
        return ad.cross_entropy_with_ignore_index(logits, np.zeros(b, dtype=np.int64))

    return _finetune_loop(triples, params, cfg, batch_loss_fn)


def finetune_dpr(triples, params: dict, cfg: RunConfig, vocab: Vocabulary):
    """Bi-encoder objective: CLS dot products, in-batch positives as negatives.

    Candidates for query i are every positive in the batch plus i's own
    hard negative, so each query sees batch_size negatives.
    """

    def batch_loss_fn(batch, params):
        q_out, _ = _encode_texts([t.query for t in batch], vocab, params, cfg)
        p_out, _ = _encode_texts([t.positive for t in batch], vocab, params, cfg)
        n_out, _ = _encode_texts([t.negative for t in batch], vocab, params, cfg)
        b = len(batch)
        pos_scores = ad.matmul(q_out.cls, ad.transpose(p_out.cls, (1, 0)))
        own_neg = ad.reshape(ad.sum_(ad.mul(q_out.cls, n_out.cls), axis=1), (b, 1))
        logits = ad.concat([pos_scores, own_neg], axis=1)
        return ad.cross_entropy_with_ignore_index(logits, np.arange(b, dtype=np.int64))

    return _finetune_loop(triples, params, cfg, batch_loss_fn)


def make_triples(pairs, rng, num_per_pair: int = 1):
    """Synthetic triples from aligned pairs: query = S side, positive = its
    T side, negative = the T side of a different random pair."""
    if len(pairs) < 2:
        raise ContractError("need at least two pairs to draw negatives")
    triples = []
    for i, pair in enumerate(pairs):
        for _ in range(num_per_pair):
            j = int(rng.integers(0, len(pairs) - 1))
            if j >= i:
                j += 1
            triples.append(TrainingTriple(pair.text_s, pair.text_t, pairs[j].text_t))
    return triples
