"""Pre-norm transformer encoder with a detachable Condenser-style head.

The encoder embeds token + learned position, runs `num_layers` pre-norm
self-attention blocks, and exposes three views of the result:

* ``last_tokens``  — final-layer-norm output, input to the MLM head;
* ``sim_tokens``   — the similarity-facing stream (L2-normalized rows when
  ``normalize_tokens`` is on), whose CLS row serves CLS similarity;
* ``middle_tokens`` — the raw residual stream after ``middle_layer`` blocks.

The auxiliary head rebuilds a sequence from the last layer's CLS vector
plus the middle layer's remaining positions, runs ``condenser_layers``
extra blocks, and projects through the shared MLM head. Its parameters
(`cond.*`) can be dropped after pretraining without touching `encode`.
"""

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 128
    max_len: int = 64
    middle_layer: int = None
    condenser_layers: int = 2
    normalize_tokens: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.middle_layer is None:
            object.__setattr__(self, "middle_layer", self.num_layers // 2)
        if self.vocab_size < 5:
            raise ContractError(f"vocab_size must be at least 5, got {self.vocab_size}")
        if self.num_layers < 2 or self.num_layers % 2 != 0:
            raise ContractError(f"num_layers must be even and >= 2, got {self.num_layers}")
        if self.hidden_dim % self.num_heads != 0:
            raise ContractError(
                f"num_heads {self.num_heads} must divide hidden_dim {self.hidden_dim}")
        if not 1 <= self.middle_layer < self.num_layers:
            raise ContractError(
                f"middle_layer must lie in [1, {self.num_layers - 1}], got {self.middle_layer}")
        if self.condenser_layers < 1:
            raise ContractError(f"condenser_layers must be >= 1, got {self.condenser_layers}")
        if self.max_len < 2:
            raise ContractError(f"max_len must be at least 2, got {self.max_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "EncoderConfig":
        return cls(**json.loads(blob))


@dataclass
class EncoderOutput:
    """Batched encoder views; tensors shaped (num_spans, length, hidden_dim)."""

    last_tokens: ad.Tensor
    middle_tokens: ad.Tensor
    last_raw: ad.Tensor
    sim_tokens: ad.Tensor
    cls: ad.Tensor
    attention_mask: np.ndarray


def _block_param_names(prefix: str, cfg: EncoderConfig):
    names = []
    for ln in ("ln1", "ln2"):
        names.append((f"{prefix}.{ln}.gain", (cfg.hidden_dim,), "gain"))
        names.append((f"{prefix}.{ln}.bias", (cfg.hidden_dim,), "bias"))
    for mat in ("wq", "wk", "wv", "wo"):
        names.append((f"{prefix}.attn.{mat}", (cfg.hidden_dim, cfg.hidden_dim), "weight"))
    for vec in ("bq", "bk", "bv", "bo"):
        names.append((f"{prefix}.attn.{vec}", (cfg.hidden_dim,), "bias"))
    names.append((f"{prefix}.ff.w1", (cfg.hidden_dim, cfg.ff_dim), "weight"))
    names.append((f"{prefix}.ff.b1", (cfg.ff_dim,), "bias"))
    names.append((f"{prefix}.ff.w2", (cfg.ff_dim, cfg.hidden_dim), "weight"))
    names.append((f"{prefix}.ff.b2", (cfg.hidden_dim,), "bias"))
    return names


def param_spec(cfg: EncoderConfig):
    """Canonical (name, shape, kind) list; fixes init draw order and checkpoint order."""
    spec = [
        ("embed.token", (cfg.vocab_size, cfg.hidden_dim), "weight"),
        ("embed.position", (cfg.max_len, cfg.hidden_dim), "weight"),
    ]
    for layer in range(cfg.num_layers):
        spec.extend(_block_param_names(f"enc.{layer}", cfg))
    spec.append(("final_ln.gain", (cfg.hidden_dim,), "gain"))
    spec.append(("final_ln.bias", (cfg.hidden_dim,), "bias"))
    spec.extend([
        ("mlm.dense", (cfg.hidden_dim, cfg.hidden_dim), "weight"),
        ("mlm.dense_bias", (cfg.hidden_dim,), "bias"),
        ("mlm.ln.gain", (cfg.hidden_dim,), "gain"),
        ("mlm.ln.bias", (cfg.hidden_dim,), "bias"),
        ("mlm.proj", (cfg.hidden_dim, cfg.vocab_size), "weight"),
        ("mlm.proj_bias", (cfg.vocab_size,), "bias"),
    ])
    for layer in range(cfg.condenser_layers):
        spec.extend(_block_param_names(f"cond.{layer}", cfg))
    spec.append(("cond_final_ln.gain", (cfg.hidden_dim,), "gain"))
    spec.append(("cond_final_ln.bias", (cfg.hidden_dim,), "bias"))
    return spec


def init_params(cfg: EncoderConfig, rng, dtype=np.float64) -> dict:
    """Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1, in spec order."""
    params = {}
    for name, shape, kind in param_spec(cfg):
        if kind == "weight":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.Parameter(name, data.astype(dtype))
    return params


def condenser_param_names(params) -> list:
    return [n for n in params if n.startswith("cond.") or n.startswith("cond_final_ln.")]


def strip_condenser(params: dict) -> dict:
    """Parameters without the auxiliary head; `encode` output is unaffected."""
    dropped = set(condenser_param_names(params))
    return {n: p for n, p in params.items() if n not in dropped}


def _ln_eps(params) -> float:
    return 1e-12 if params["final_ln.gain"].data.dtype == np.float64 else 1e-5


def _maybe_dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return ad.mul(x, ad.Tensor(keep))


def _block(x, prefix, params, cfg, mask_bias, eps, dropout_rng):
    b, length, dim = x.shape
    heads = cfg.num_heads
    head_dim = dim // heads
    p = lambda k: params[f"{prefix}.{k}"]

    h = ad.layer_norm(x, p("ln1.gain"), p("ln1.bias"), eps)
    q = ad.add(ad.matmul(h, p("attn.wq")), p("attn.bq"))
    k = ad.add(ad.matmul(h, p("attn.wk")), p("attn.bk"))
    v = ad.add(ad.matmul(h, p("attn.wv")), p("attn.bv"))

    def split(t):
        return ad.transpose(ad.reshape(t, (b, length, heads, head_dim)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    weights = ad.softmax(ad.add(scores, mask_bias), axis=-1)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, length, dim))
    attn_out = ad.add(ad.matmul(ctx, p("attn.wo")), p("attn.bo"))
    x = ad.add(x, _maybe_dropout(attn_out, cfg.dropout_rate, dropout_rng))

    h = ad.layer_norm(x, p("ln2.gain"), p("ln2.bias"), eps)
    h = ad.gelu(ad.add(ad.matmul(h, p("ff.w1")), p("ff.b1")))
    h = ad.add(ad.matmul(h, p("ff.w2")), p("ff.b2"))
    return ad.add(x, _maybe_dropout(h, cfg.dropout_rate, dropout_rng))


def _attention_bias(attention_mask, length, dtype):
    bias = np.where(attention_mask[:, None, None, :] != 0, 0.0, -np.inf).astype(dtype)
    return ad.Tensor(bias)


def _run_blocks(x, prefixes, params, cfg, mask_bias, eps, dropout_rng, tap_after=None):
    tapped = None
    for i, prefix in enumerate(prefixes):
        x = _block(x, prefix, params, cfg, mask_bias, eps, dropout_rng)
        if tap_after is not None and i + 1 == tap_after:
            tapped = x
    return x, tapped


def encode(params: dict, cfg: EncoderConfig, input_ids, attention_mask,
           dropout_rng=None) -> EncoderOutput:
    """Forward pass over a batch of id rows; PAD positions never attend in."""
    ids = np.asarray(input_ids, dtype=np.int64)
    att = np.asarray(attention_mask, dtype=np.int64)
    if ids.ndim != 2 or att.shape != ids.shape:
        raise ShapeError(
            f"encode: input_ids and attention_mask must be matching 2-D arrays, got {ids.shape} and {att.shape}")
    b, length = ids.shape
    if length > cfg.max_len:
        raise ShapeError(f"encode: length {length} exceeds max_len {cfg.max_len}")
    eps = _ln_eps(params)
    dtype = params["embed.token"].data.dtype

    tok = ad.embedding_lookup(params["embed.token"], ids)
    pos = ad.getitem(params["embed.position"], (slice(0, length), slice(None)))
    x = ad.add(tok, ad.reshape(pos, (1, length, cfg.hidden_dim)))

    mask_bias = _attention_bias(att, length, dtype)
    prefixes = [f"enc.{i}" for i in range(cfg.num_layers)]
    last_raw, middle_raw = _run_blocks(x, prefixes, params, cfg, mask_bias, eps,
                                       dropout_rng, tap_after=cfg.middle_layer)

    last = ad.layer_norm(last_raw, params["final_ln.gain"], params["final_ln.bias"], eps)
    sim = ad.l2_normalize(last) if cfg.normalize_tokens else last
    cls = ad.getitem(sim, (slice(None), 0, slice(None)))
    return EncoderOutput(last_tokens=last, middle_tokens=middle_raw, last_raw=last_raw,
                         sim_tokens=sim, cls=cls, attention_mask=att)


def _mlm_head(params, x, eps):
    h = ad.gelu(ad.add(ad.matmul(x, params["mlm.dense"]), params["mlm.dense_bias"]))
    h = ad.layer_norm(h, params["mlm.ln.gain"], params["mlm.ln.bias"], eps)
    return ad.add(ad.matmul(h, params["mlm.proj"]), params["mlm.proj_bias"])


def mlm_logits(params: dict, cfg: EncoderConfig, output: EncoderOutput) -> ad.Tensor:
    """Vocabulary logits from the last layer, shape (num_spans, length, vocab)."""
    return _mlm_head(params, output.last_tokens, _ln_eps(params))


def condenser_logits(params: dict, cfg: EncoderConfig, output: EncoderOutput,
                     dropout_rng=None) -> ad.Tensor:
    """Vocabulary logits from [last-layer CLS ; middle-layer rest].

    Gradients reach the middle layer directly, bypassing the top blocks,
    and the shared projection ties the two MLM losses together.
    """
    b, length, dim = output.last_raw.shape
    eps = _ln_eps(params)
    head_cls = ad.getitem(output.last_raw, (slice(None), slice(0, 1), slice(None)))
    rest = ad.getitem(output.middle_tokens, (slice(None), slice(1, None), slice(None)))
    x = ad.concat([head_cls, rest], axis=1)
    mask_bias = _attention_bias(output.attention_mask, length, params["embed.token"].data.dtype)
    prefixes = [f"cond.{i}" for i in range(cfg.condenser_layers)]
    x, _ = _run_blocks(x, prefixes, params, cfg, mask_bias, eps, dropout_rng)
    x = ad.layer_norm(x, params["cond_final_ln.gain"], params["cond_final_ln.bias"], eps)
    return _mlm_head(params, x, eps)
