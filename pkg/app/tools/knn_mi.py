# app/tools/knn_mi.py
"""
Kraskov-Stoegbauer-Grassberger mutual information estimate (first variant).

    I(X;Y) = psi(k) + psi(N) - < psi(n_x + 1) + psi(n_y + 1) >

with distances in the max-norm; n_x counts the other points strictly
closer in X than the k-th joint neighbour.
"""
import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

MIN_SAMPLES = 1000
DEFAULT_K = 5


class InsufficientSamplesError(ValueError):
    pass


def _as_columns(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def oracle_mi(samples_x, samples_y, k: int = DEFAULT_K, min_samples: int = MIN_SAMPLES) -> float:
    """MI estimate in nats from paired rows of samples_x and samples_y."""
    x, y = _as_columns(samples_x), _as_columns(samples_y)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"paired samples disagree: {n} vs {y.shape[0]} rows")
    if n < max(min_samples, k + 1):
        raise InsufficientSamplesError(f"need at least {max(min_samples, k + 1)} paired samples, got {n}")

    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = dist[:, k]
    # strictly-closer counts: shrink the radius by one ulp
    radius = np.maximum(np.nextafter(eps, 0.0), 0.0)

    n_x = cKDTree(x).query_ball_point(x, radius, p=np.inf, return_length=True) - 1
    n_y = cKDTree(y).query_ball_point(y, radius, p=np.inf, return_length=True) - 1
    mi = digamma(k) + digamma(n) - np.mean(digamma(n_x + 1) + digamma(n_y + 1))
    return float(max(mi, 0.0))
