# app/pipeline/redundancy.py
"""
Cross-modal redundancy: pairwise JS-bound discriminators, the gradient
reversal layer, and the summed redundancy loss.

For a discriminator T on latent pairs,
    J   = E_pos[log s(T)] + E_neg[log(1 - s(T))] + 2 ln 2
    BCE = -(E_pos[log s(T)] + E_neg[log(1 - s(T))])
so J + BCE = 2 ln 2 by construction. Both are built from the same two terms.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.stats import norm

from app.tools.rng import Rng
from app.tools.tensor import DenseStack, Graph, Tensor

LOG_FLOOR = math.log(1e-12)
TWO_LN2 = 2.0 * math.log(2.0)

# Pair name -> (first member, second member). The first member always goes through GRL.
PAIRS: Dict[str, Tuple[str, str]] = {
    "it": ("image", "text"),
    "ia": ("image", "audio"),
    "ta": ("text", "audio"),
}


class DerangementError(ValueError):
    pass


class Discriminator:
    """Dense stack in -> hidden -> hidden -> 1 with tanh; the output layer
    starts at zero so an untrained discriminator scores every pair 0."""

    def __init__(self, name: str, in_dim: int, rng: Rng, hidden: int = 64):
        self.stack = DenseStack(name, [in_dim, hidden, hidden, 1], rng,
                                activation="tanh", zero_init_last=True)
        self.in_dim = in_dim

    def parameters(self):
        return self.stack.parameters()

    def scores(self, graph: Graph, pairs: Tensor) -> Tensor:
        if pairs.shape[-1] != self.in_dim:
            raise ValueError(f"discriminator expects width {self.in_dim}, got {pairs.shape}")
        return graph.sum(self.stack(graph, pairs), axis=-1)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

def derangement(n: int, rng: Rng) -> np.ndarray:
    """Uniform permutation without fixed points (rejection sampling; the
    acceptance rate tends to 1/e)."""
    if n < 2:
        raise DerangementError(f"no derangement exists for batch size {n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class PairBatch:
    first: Tensor
    second: Tensor
    permutation: np.ndarray

    def positives(self, graph: Graph) -> Tensor:
        return graph.concat([self.first, self.second], axis=-1)

    def negatives(self, graph: Graph) -> Tensor:
        return graph.concat([self.first, graph.gather(self.second, self.permutation)], axis=-1)


def shuffle_negatives(first: Tensor, second: Tensor, rng: Rng) -> PairBatch:
    if first.shape[0] != second.shape[0]:
        raise ValueError(f"latent batches disagree: {first.shape} vs {second.shape}")
    return PairBatch(first=first, second=second, permutation=derangement(first.shape[0], rng))


# ---------------------------------------------------------------------------
# GRL and the bound
# ---------------------------------------------------------------------------

def grl(graph: Graph, x, alpha: float) -> Tensor:
    """Identity forward; the backward pass multiplies the upstream gradient by -alpha."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return graph.grl(x, alpha)


def js_bound_terms(graph: Graph, t_pos: Tensor, t_neg: Tensor) -> Tuple[Tensor, Tensor]:
    """(mean log s(T_pos), mean log(1 - s(T_neg))), each element floored at log 1e-12."""
    log_s = graph.negate(graph.softplus(graph.negate(t_pos)))
    log_1ms = graph.negate(graph.softplus(t_neg))
    pos = graph.mean(graph.clamp(log_s, LOG_FLOOR))
    neg = graph.mean(graph.clamp(log_1ms, LOG_FLOOR))
    return pos, neg


@dataclass
class PairScores:
    j: Tensor
    bce: Tensor
    p_pos: float
    p_neg: float


def score_pair(graph: Graph, disc: Discriminator, batch: PairBatch) -> PairScores:
    t_pos = disc.scores(graph, batch.positives(graph))
    t_neg = disc.scores(graph, batch.negatives(graph))
    pos, neg = js_bound_terms(graph, t_pos, t_neg)
    both = graph.add(pos, neg)
    return PairScores(
        j=graph.add_scalar(both, TWO_LN2),
        bce=graph.negate(both),
        p_pos=float(np.mean(1.0 / (1.0 + np.exp(-t_pos.value)))),
        p_neg=float(np.mean(1.0 / (1.0 + np.exp(-t_neg.value)))),
    )


def js_objective(graph: Graph, disc: Discriminator, batch: PairBatch) -> Tensor:
    return score_pair(graph, disc, batch).j


def bce_diagnostic(graph: Graph, disc: Discriminator, batch: PairBatch) -> Tensor:
    return score_pair(graph, disc, batch).bce


@dataclass
class RedundancyOutput:
    loss: Tensor                  # sum of J over pairs (reported L_red)
    adversarial: Tensor           # sum of BCE over pairs (differentiated)
    pairs: Dict[str, PairScores] = field(default_factory=dict)


def redundancy_loss(graph: Graph, latents: Dict[str, Tensor],
                    discriminators: Dict[str, Discriminator], alpha: float, rng: Rng,
                    reverse_both: bool = False) -> RedundancyOutput:
    """
    Sum of pairwise J over (i,t), (i,a), (t,a). The first member of each pair
    passes through GRL(alpha) before its discriminator; with reverse_both the
    second member does too.

    Descending `adversarial` (sum of BCE) in one backward pass trains the
    discriminators to maximise J while reversed members receive the gradient
    of alpha * J, i.e. their encoders minimise it.
    """
    pair_rngs = dict(zip(PAIRS, rng.spawn(len(PAIRS))))
    scores: Dict[str, PairScores] = {}
    for name, (a, b) in PAIRS.items():
        first = grl(graph, latents[a], alpha)
        second = grl(graph, latents[b], alpha) if reverse_both else latents[b]
        batch = shuffle_negatives(first, second, pair_rngs[name])
        scores[name] = score_pair(graph, discriminators[name], batch)

    names = list(PAIRS)
    loss, adversarial = scores[names[0]].j, scores[names[0]].bce
    for name in names[1:]:
        loss = graph.add(loss, scores[name].j)
        adversarial = graph.add(adversarial, scores[name].bce)
    return RedundancyOutput(loss=loss, adversarial=adversarial, pairs=scores)


# ---------------------------------------------------------------------------
# Analytic oracles (1-D Gaussians)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSpec:
    mean: float
    std: float = 1.0

    def logpdf(self, x):
        return norm.logpdf(x, loc=self.mean, scale=self.std)


def js_bound_from_scores(t_pos: np.ndarray, t_neg: np.ndarray) -> float:
    """numpy twin of js_bound_terms + 2 ln 2."""
    pos = np.maximum(-np.logaddexp(0.0, -np.asarray(t_pos)), LOG_FLOOR).mean()
    neg = np.maximum(-np.logaddexp(0.0, np.asarray(t_neg)), LOG_FLOOR).mean()
    return float(pos + neg + TWO_LN2)


def optimal_bayes_discriminator(p: GaussianSpec, q: GaussianSpec) -> Callable:
    """T*(x) = log p(x) - log q(x)."""
    def score(x):
        return p.logpdf(x) - q.logpdf(x)
    return score


def _support(p: GaussianSpec, q: GaussianSpec) -> Tuple[float, float, list]:
    lo = min(p.mean - 14 * p.std, q.mean - 14 * q.std)
    hi = max(p.mean + 14 * p.std, q.mean + 14 * q.std)
    return lo, hi, sorted({p.mean, q.mean})


def bayes_js_objective(p: GaussianSpec, q: GaussianSpec,
                       score: Optional[Callable] = None) -> float:
    """J for a scoring function under the true p (positives) and q (negatives),
    by quadrature. With the default optimal score this equals 2 * D_JS(p || q)."""
    score = score or optimal_bayes_discriminator(p, q)
    lo, hi, pts = _support(p, q)

    def pos(x):
        return math.exp(p.logpdf(x)) * max(-np.logaddexp(0.0, -score(x)), LOG_FLOOR)

    def neg(x):
        return math.exp(q.logpdf(x)) * max(-np.logaddexp(0.0, score(x)), LOG_FLOOR)

    a = integrate.quad(pos, lo, hi, points=pts, limit=400)[0]
    b = integrate.quad(neg, lo, hi, points=pts, limit=400)[0]
    return a + b + TWO_LN2


def js_divergence(p: GaussianSpec, q: GaussianSpec) -> float:
    """D_JS(p || q) by quadrature of the KL-to-mixture form (nats)."""
    lo, hi, pts = _support(p, q)

    def half_kl(f: GaussianSpec, x):
        lf, lp, lq = f.logpdf(x), p.logpdf(x), q.logpdf(x)
        return math.exp(lf) * (lf - (np.logaddexp(lp, lq) - math.log(2.0)))

    a = integrate.quad(lambda x: half_kl(p, x), lo, hi, points=pts, limit=400)[0]
    b = integrate.quad(lambda x: half_kl(q, x), lo, hi, points=pts, limit=400)[0]
    return 0.5 * (a + b)
