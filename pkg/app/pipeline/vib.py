# app/pipeline/vib.py
"""
Gaussian latent heads, reparameterized sampling, the closed-form KL to the
standard-normal prior, and the U-VIB / M-VIB losses.

Both bottlenecks minimise mean[cross-entropy + coef * KL]; coef is beta for
the per-modality stage and gamma for the post-channel stage.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.schemas.dataset import N_CLASSES
from app.tools.rng import Rng
from app.tools.tensor import DenseLayer, Graph, NonFiniteError, Tensor

STD_FLOOR = 1e-6
PROB_FLOOR = 1e-12
CLASS_SCORES = np.arange(N_CLASSES, dtype=np.float64) - 3.0


class EmptyBatchError(ValueError):
    pass


@dataclass
class GaussianLatent:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


class GaussianHead:
    """Two linear maps: one for the mean, one for the pre-softplus std."""

    def __init__(self, name: str, in_dim: int, latent_dim: int, rng: Rng):
        self.mean_layer = DenseLayer(f"{name}.mean", in_dim, latent_dim, rng)
        self.std_layer = DenseLayer(f"{name}.std", in_dim, latent_dim, rng)
        self.latent_dim = latent_dim

    def parameters(self):
        return self.mean_layer.parameters() + self.std_layer.parameters()

    def __call__(self, graph: Graph, features) -> GaussianLatent:
        return gaussian_head(graph, features, self)


def gaussian_head(graph: Graph, features, head: GaussianHead) -> GaussianLatent:
    if not np.all(np.isfinite(graph.coerce(features).value)):
        raise NonFiniteError("gaussian_head received non-finite features")
    mean = head.mean_layer(graph, features)
    raw = head.std_layer(graph, features)
    std = graph.add_scalar(graph.softplus(raw), STD_FLOOR)
    return GaussianLatent(mean=mean, std=std)


def reparameterize(graph: Graph, latent: GaussianLatent, rng: Optional[Rng] = None,
                   noise: Optional[np.ndarray] = None) -> Tensor:
    """z = mean + std * eps. eps enters as a constant, so no gradient reaches it."""
    if noise is None:
        if rng is None:
            raise ValueError("reparameterize needs either rng or noise")
        noise = rng.normal(latent.mean.shape)
    eps = graph.constant(np.broadcast_to(noise, latent.mean.shape))
    return graph.add(latent.mean, graph.multiply(latent.std, eps))


def kl_to_standard_normal(graph: Graph, latent: GaussianLatent) -> Tensor:
    """0.5 * sum_i(mean^2 + std^2 - 1 - ln std^2), summed over the last axis."""
    mean, std = latent.mean, latent.std
    terms = graph.add(graph.square(mean), graph.square(std))
    terms = graph.add_scalar(terms, -1.0)
    terms = graph.add(terms, graph.scale(graph.log(std), -2.0))
    return graph.scale(graph.sum(terms, axis=-1), 0.5)


def task_log_likelihood(graph: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    """log softmax(logits)[label], floored at log(1e-12). Shape (batch,)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError(f"labels must lie in 0..{N_CLASSES - 1}")
    if len(logits.shape) == 1:
        logits = graph.broadcast(logits, (1, logits.shape[0]))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    logp = graph.log_softmax(logits, axis=-1)
    picked = graph.sum(graph.multiply(logp, graph.constant(onehot)), axis=-1)
    return graph.clamp(picked, float(np.log(PROB_FLOOR)))


def bottleneck_terms(graph: Graph, latent: GaussianLatent, logits: Tensor,
                     labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """(mean cross-entropy, mean KL) over the batch."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise EmptyBatchError("empty batch")
    ce = graph.negate(graph.mean(task_log_likelihood(graph, logits, labels)))
    kl = graph.mean(kl_to_standard_normal(graph, latent))
    return ce, kl


def uvib_loss(graph: Graph, latent: GaussianLatent, logits: Tensor,
              labels: np.ndarray, beta: float) -> Tensor:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    ce, kl = bottleneck_terms(graph, latent, logits, labels)
    return graph.add(ce, graph.scale(kl, beta))


def mvib_loss(graph: Graph, latent: GaussianLatent, logits: Tensor,
              labels: np.ndarray, gamma: float) -> Tensor:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    ce, kl = bottleneck_terms(graph, latent, logits, labels)
    return graph.add(ce, graph.scale(kl, gamma))


# ---------------------------------------------------------------------------
# Task prediction (numpy side)
# ---------------------------------------------------------------------------

def class_probabilities(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def expected_score(logits: np.ndarray) -> np.ndarray:
    """Softmax-weighted class score in [-3, 3]."""
    return np.clip(class_probabilities(logits) @ CLASS_SCORES, -3.0, 3.0)


def predicted_class(logits: np.ndarray) -> np.ndarray:
    return np.argmax(np.atleast_2d(logits), axis=-1)


@dataclass
class TaskPrediction:
    class_logits: np.ndarray        # (n, 7)

    @property
    def score(self) -> np.ndarray:
        return expected_score(self.class_logits)

    @property
    def label(self) -> np.ndarray:
        return predicted_class(self.class_logits)

    @property
    def binary(self) -> np.ndarray:
        return (self.score >= 0).astype(np.int64)
