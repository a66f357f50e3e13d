# app/pipeline/synthetic.py
"""
Synthetic three-modality sentiment data with a redundancy knob.

    s       balanced over {-3..3}
    c       = s/3 + N(0, factor_noise_std^2)            shared factor
    u_m     ~ N(0, I_private)                           private factor
    x_m     = A_m [rho * c * 1 ; (1 - rho) * u_m] + N(0, noise_std^2 I)

rho = 0 leaves only independent private factors in the features; rho = 1
with no private dims and no noise makes every modality a function of c.
"""
import hashlib

import numpy as np

from app.schemas.config import SyntheticSpec
from app.schemas.dataset import MODALITIES, N_CLASSES, Dataset
from app.tools.rng import Rng

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def split_tag(index: int) -> str:
    """Deterministic split from a hash of the row index (70/15/15)."""
    bucket = int(hashlib.sha256(str(index).encode("ascii")).hexdigest()[:8], 16) % 100
    if bucket < 70:
        return "train"
    if bucket < 85:
        return "val"
    return "test"


def balanced_scores(n: int, rng: Rng) -> np.ndarray:
    """A random permutation of an exact tiling of {-3..3}: class counts differ by at most one."""
    tiling = np.tile(np.arange(N_CLASSES, dtype=np.float64) - 3.0, -(-n // N_CLASSES))[:n]
    return tiling[rng.permutation(n)]


def mixing_matrices(spec: SyntheticSpec, rng: Rng) -> dict:
    width = spec.shared_dim + spec.private_dim
    return {m: rng.normal((d, width), scale=1.0 / np.sqrt(width))
            for m, d in zip(MODALITIES, spec.dims)}


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    label_rng, mix_rng, factor_rng, noise_rng = Rng(spec.seed).spawn(4)
    n = spec.n_samples

    scores = balanced_scores(n, label_rng)
    mixing = mixing_matrices(spec, mix_rng)
    shared = scores / 3.0 + factor_rng.normal((n,), scale=spec.factor_noise_std)
    shared_block = spec.rho * np.repeat(shared[:, None], spec.shared_dim, axis=1)

    features = {}
    for m in MODALITIES:
        private = factor_rng.normal((n, spec.private_dim))
        latent = np.hstack([shared_block, (1.0 - spec.rho) * private])
        x = latent @ mixing[m].T
        if spec.noise_std > 0:
            x = x + noise_rng.normal(x.shape, scale=spec.noise_std)
        features[m] = x

    split = np.array([split_tag(i) for i in range(n)])
    return Dataset(features=features, label_score=scores, split=split)
