"""Ranking metrics and significance testing.

nDCG follows the trec_eval convention (gain 2^rel − 1, discount
log2(rank+1), ideal ranking over all judged documents). The paired t-test
computes its two-tailed p-value from a self-contained Student-t survival
function built on the regularized incomplete beta continued fraction, so
the package needs no statistics dependency at runtime.
"""

import math
import sys
import warnings
from dataclasses import dataclass

from .errors import ContractError
from .retrieval import RankedList


def ndcg_at_k(ranked: RankedList, qrels: dict, k: int) -> float:
    """Normalized DCG truncated at rank k; 0.0 when the query has no
    relevant documents. qrels maps (query_id, doc_id) -> grade >= 0."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    gains = {doc_id: grade for (qid, doc_id), grade in qrels.items()
             if qid == ranked.query_id and grade > 0}
    if not gains:
        return 0.0
    dcg = 0.0
    for rank, (doc_id, _score) in enumerate(ranked.entries[:k], start=1):
        grade = gains.get(doc_id, 0)
        if grade:
            dcg += (2.0 ** grade - 1.0) / math.log2(rank + 1)
    ideal = sorted(gains.values(), reverse=True)[:k]
    idcg = sum((2.0 ** g - 1.0) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
    return dcg / idcg


# ---------------------------------------------------------------------------
# Student-t machinery (regularized incomplete beta via Lentz's method)
# ---------------------------------------------------------------------------

_BETACF_TINY = 1e-300
_BETACF_EPS = 3e-15
_BETACF_MAX_ITER = 300


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_TINY:
        d = _BETACF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if a <= 0 or b <= 0:
        raise ContractError(f"beta parameters must be positive, got a={a}, b={b}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for T Student-t with df degrees of freedom."""
    if df < 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def bonferroni(p_value: float, num_comparisons: int) -> float:
    if num_comparisons < 1:
        raise ContractError(f"num_comparisons must be >= 1, got {num_comparisons}")
    return min(1.0, p_value * num_comparisons)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_value: float
    p_corrected: float
    degenerate: bool


def paired_t_test(scores_a, scores_b, num_comparisons: int = 1) -> TTestResult:
    """Two-tailed paired t-test with Bonferroni-corrected p-value.

    All-zero differences return p = 1.0. Constant nonzero differences have
    no sample variance, so the statistic is infinite; that case returns
    p = 0.0 with the `degenerate` flag set so callers can report it
    honestly. "Constant" is judged against the rounding noise of forming
    the differences (each a−b carries error up to a few ulps of the input
    magnitudes), since inputs like 1−1.1 and 4−4.1 differ in the last bit
    despite being −0.1 exactly in real arithmetic.
    """
    a = [float(v) for v in scores_a]
    b = [float(v) for v in scores_b]
    if len(a) != len(b):
        raise ContractError(f"paired t-test needs equal lengths, got {len(a)} and {len(b)}")
    n = len(a)
    if n < 2:
        raise ContractError(f"paired t-test needs at least 2 pairs, got {n}")
    if num_comparisons < 1:
        raise ContractError(f"num_comparisons must be >= 1, got {num_comparisons}")
    diffs = [x - y for x, y in zip(a, b)]
    if all(d == 0.0 for d in diffs):
        return TTestResult(t=0.0, p_value=1.0, p_corrected=1.0, degenerate=False)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    noise = 16.0 * sys.float_info.epsilon * max(abs(v) for v in a + b)
    if var <= noise * noise:
        if abs(mean) <= noise:
            return TTestResult(t=0.0, p_value=1.0, p_corrected=1.0, degenerate=False)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p_value=0.0, p_corrected=0.0, degenerate=True)
    t = mean / math.sqrt(var / n)
    p = student_t_two_tailed_p(t, n - 1)
    return TTestResult(t=t, p_value=p, p_corrected=bonferroni(p, num_comparisons),
                       degenerate=False)


def relative_improvement(pairs) -> float:
    """Mean over (baseline, treatment) pairs of (treatment−baseline)/baseline.

    Zero baselines cannot be expressed as a relative change; they are
    dropped with a warning rather than poisoning the mean.
    """
    pairs = [(float(base), float(treat)) for base, treat in pairs]
    if not pairs:
        raise ContractError("relative_improvement needs at least one pair")
    kept = []
    for base, treat in pairs:
        if base == 0.0:
            warnings.warn(f"dropping pair with zero baseline (treatment {treat})", stacklevel=2)
            continue
        kept.append((treat - base) / base)
    if not kept:
        raise ContractError("every pair had a zero baseline")
    return sum(kept) / len(kept)
