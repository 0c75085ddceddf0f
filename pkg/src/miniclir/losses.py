"""Training objectives: cross-language contrastive loss over interleaved
span batches (CLS or token-level MaxSim similarity), per-span MLM and
Condenser-head MLM, and their combined total.

Batch layout contract: 2n spans ordered [S_1, T_1, ..., S_n, T_n], so the
positive partner of span a is a XOR 1 and a's side is a mod 2.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .encoder import EncoderConfig, EncoderOutput, condenser_logits, mlm_logits
from .errors import ContractError

SIMILARITY_KINDS = ("none", "cls", "maxsim")
DENOMINATOR_MODES = ("anchor", "literal-and")


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "maxsim"
    condenser: bool = True
    temperature: float = 1.0
    denominator: str = "anchor"

    def __post_init__(self):
        if self.similarity not in SIMILARITY_KINDS:
            raise ContractError(f"similarity must be one of {SIMILARITY_KINDS}, got {self.similarity!r}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.denominator not in DENOMINATOR_MODES:
            raise ContractError(f"denominator must be one of {DENOMINATOR_MODES}, got {self.denominator!r}")


@dataclass
class LossBreakdown:
    """Scalar components plus the graph nodes they came from.

    `total` always equals `contrastive + mlm + cdmlm` exactly: the floats
    are read off nodes combined in that same order.
    """

    contrastive: float
    mlm: float
    cdmlm: float
    total: float
    contrastive_node: ad.Tensor
    mlm_node: ad.Tensor
    cdmlm_node: ad.Tensor
    total_node: ad.Tensor

    def as_dict(self) -> dict:
        return {"contrastive": self.contrastive, "mlm": self.mlm,
                "cdmlm": self.cdmlm, "total": self.total}

    def detached(self) -> "LossBreakdown":
        """Float-only copy. The node fields pin the step's entire graph, so
        anything kept beyond the step (history lists) must store this."""
        return LossBreakdown(self.contrastive, self.mlm, self.cdmlm, self.total,
                             None, None, None, None)


def maxsim(h1, mask1, h2, mask2) -> float:
    """Late-interaction score of one span pair (forward only).

    Sum over attended rows of h1 of the max dot product against attended
    rows of h2; asymmetric in its arguments.
    """
    scores, _ = kernels.maxsim_pairs(np.asarray(h1)[None], np.asarray(mask1)[None],
                                     np.asarray(h2)[None], np.asarray(mask2)[None])
    return float(scores[0])


def cls_sim(c1, c2) -> float:
    """Dot product of two CLS vectors."""
    return float(np.asarray(c1) @ np.asarray(c2))


def maxsim_matrix_op(tokens: ad.Tensor, attention_mask) -> ad.Tensor:
    """Differentiable all-pairs MaxSim of a span batch against itself."""
    mask = np.asarray(attention_mask)
    scores, argmax = kernels.maxsim_matrix(tokens.data, mask, tokens.data, mask)

    def vjp(g):
        dx, dy = kernels.maxsim_matrix_backward(g, argmax, tokens.data, tokens.data)
        return (dx + dy,)

    return ad.make_node(scores, (tokens,), vjp)


def maxsim_pairs_op(x: ad.Tensor, x_mask, y: ad.Tensor, y_mask) -> ad.Tensor:
    """Differentiable row-aligned MaxSim scores, shape (num_spans,)."""
    xm = np.asarray(x_mask)
    ym = np.asarray(y_mask)
    scores, argmax = kernels.maxsim_pairs(x.data, xm, y.data, ym)

    def vjp(g):
        dx, dy = kernels.maxsim_pairs_backward(g, argmax, x.data, y.data)
        return dx, dy

    return ad.make_node(scores, (x, y), vjp)


def _denominator_mask(num_spans: int, mode: str) -> np.ndarray:
    keep = ~np.eye(num_spans, dtype=bool)
    if mode == "literal-and":
        idx = np.arange(num_spans)
        pair = idx // 2
        side = idx % 2
        keep = (pair[:, None] != pair[None, :]) & (side[:, None] != side[None, :])
        if not keep.any(axis=1).all():
            raise ContractError(
                "literal-and denominator is empty (needs at least 2 pairs in the batch)")
    return keep


def contrastive_loss(sim: ad.Tensor, temperature: float = 1.0,
                     denominator: str = "anchor") -> ad.Tensor:
    """Mean InfoNCE over all 2n anchors of an interleaved similarity matrix.

    Row a of `sim` scores span a against every span; the positive is a's
    partner a XOR 1. The default denominator keeps every span except the
    anchor itself (same-language spans count as negatives); "literal-and"
    instead keeps only spans differing in both pair and side, which drops
    the positive from the denominator.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    num = sim.shape[0]
    if sim.shape != (num, num) or num % 2 != 0 or num < 2:
        raise ContractError(f"similarity matrix must be square with even size, got {sim.shape}")
    keep = _denominator_mask(num, denominator)
    partner = np.arange(num) ^ 1

    logits = ad.mul(sim, 1.0 / temperature)
    # shift by the row max over denominator terms and the positive, for stable exps
    relevant = keep.copy()
    relevant[np.arange(num), partner] = True
    shift = np.where(relevant, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = ad.sub(logits, ad.Tensor(shift))
    weights = ad.Tensor(keep.astype(sim.data.dtype))
    denom = ad.sum_(ad.mul(ad.exp(shifted), weights), axis=1)
    positives = ad.gather_pairs(shifted, np.arange(num), partner)
    return ad.mean_(ad.sub(ad.log(denom), positives))


def per_span_cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean masked-token cross entropy per span, shape (num_spans,).

    Spans with no labeled positions contribute exactly zero (and receive
    zero gradient), so averaging over spans matches the per-span loss
    definition rather than a global token mean.
    """
    labels = np.asarray(labels)
    num, length, vocab = logits.data.shape
    if labels.shape != (num, length):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.data.shape}")
    valid = labels != -1
    picked = labels[valid]
    if picked.size and (picked.min() < 0 or picked.max() >= vocab):
        bad = int(picked.min()) if picked.min() < 0 else int(picked.max())
        raise IndexError(f"mlm label {bad} out of range for vocab of {vocab}")

    counts = valid.sum(axis=1)
    b_idx, pos_idx = np.nonzero(valid)
    lab = labels[b_idx, pos_idx]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sums = np.zeros(num, dtype=logits.data.dtype)
    np.add.at(sums, b_idx, -logp[b_idx, pos_idx, lab])
    out = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    def vjp(g):
        dlogits = np.zeros_like(logits.data)
        if b_idx.size:
            w = (g[b_idx] / counts[b_idx]).astype(logits.data.dtype)
            rows = np.exp(logp[b_idx, pos_idx])
            rows *= w[:, None]
            rows[np.arange(b_idx.size), lab] -= w
            np.add.at(dlogits, (b_idx, pos_idx), rows)
        return (dlogits,)

    return ad.make_node(out, (logits,), vjp)


def similarity_from_reps(kind: str, reps: ad.Tensor, attention_mask,
                         temperature: float, denominator: str) -> ad.Tensor:
    """Contrastive loss over cached representations.

    For "maxsim" the reps are per-token matrices (2n, len, dim) with their
    attention mask; for "cls" a (2n, dim) matrix of CLS vectors. This is
    the pass-2 entry point of the cached training step: `reps` may be a
    plain leaf tensor rather than a live encoder output.
    """
    if kind == "maxsim":
        sim = maxsim_matrix_op(reps, attention_mask)
    elif kind == "cls":
        sim = ad.matmul(reps, ad.transpose(reps, (1, 0)))
    else:
        raise ContractError(f"no contrastive similarity for kind {kind!r}")
    return contrastive_loss(sim, temperature=temperature, denominator=denominator)


def contrastive_reps(output: EncoderOutput, kind: str) -> ad.Tensor:
    """The representation tensor the contrastive loss consumes (and the
    gradient-cache step caches): token matrices for maxsim, CLS for cls."""
    if kind == "maxsim":
        return output.sim_tokens
    if kind == "cls":
        return output.cls
    raise ContractError(f"no contrastive representation for kind {kind!r}")


def batch_loss(output: EncoderOutput, mlm_labels, loss_cfg: LossConfig,
               params: dict, enc_cfg: EncoderConfig) -> LossBreakdown:
    """All loss components of one interleaved span batch.

    total = mean-over-anchors contrastive + mean-over-spans MLM
    + mean-over-spans Condenser MLM, each term dropping to an exact zero
    when its switch is off.
    """
    num = output.sim_tokens.shape[0]
    if num % 2 != 0 or num < 2:
        raise ContractError(f"batch must hold an even number of spans >= 2, got {num}")
    dtype = output.sim_tokens.data.dtype
    zero = ad.Tensor(np.zeros((), dtype=dtype))

    if loss_cfg.similarity == "none":
        co = zero
    else:
        co = similarity_from_reps(loss_cfg.similarity, contrastive_reps(output, loss_cfg.similarity),
                                  output.attention_mask, loss_cfg.temperature, loss_cfg.denominator)

    mlm = ad.mean_(per_span_cross_entropy(mlm_logits(params, enc_cfg, output), mlm_labels))
    if loss_cfg.condenser:
        cd = ad.mean_(per_span_cross_entropy(condenser_logits(params, enc_cfg, output), mlm_labels))
    else:
        cd = zero
    total = ad.add(ad.add(co, mlm), cd)
    return LossBreakdown(
        contrastive=float(co.data), mlm=float(mlm.data), cdmlm=float(cd.data),
        total=float(co.data) + float(mlm.data) + float(cd.data),
        contrastive_node=co, mlm_node=mlm, cdmlm_node=cd, total_node=total,
    )
