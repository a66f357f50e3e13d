# app/pipeline/channel.py
"""
Wireless channel between the multi-modal encoder and the receiver.

Signals are power-normalized per row to unit average per-dimension power, so
the noise variance at a given SNR is simply 10^(-snr_db/10). An SNR of +inf
is the noiseless sentinel.

Rayleigh fading is block fading: one gain per transmitted row. With
equalization the receiver divides by the (perfectly known) gain.
"""
import math
import threading
from typing import Optional, Tuple

import numpy as np

from app.schemas.config import ChannelConfig
from app.tools.rng import Rng
from app.tools.tensor import Graph, Tensor

GAIN_FLOOR = 1e-8

_stats_lock = threading.Lock()
CHANNEL_STATS = {"rayleigh_draws": 0, "rayleigh_redraws": 0}


class ZeroSignalError(ValueError):
    pass


def reset_channel_stats() -> None:
    with _stats_lock:
        for k in CHANNEL_STATS:
            CHANNEL_STATS[k] = 0


def _count(draws: int, redraws: int) -> None:
    with _stats_lock:
        CHANNEL_STATS["rayleigh_draws"] += draws
        CHANNEL_STATS["rayleigh_redraws"] += redraws


def power_normalize(graph: Graph, z) -> Tensor:
    """z * sqrt(d / sum z^2), row-wise over the last axis."""
    z = graph.coerce(z)
    d = z.shape[-1]
    energy = np.sum(z.value * z.value, axis=-1)
    if np.any(energy == 0.0):
        rows = np.flatnonzero(np.atleast_1d(energy) == 0.0).tolist()
        raise ZeroSignalError(f"cannot normalize an all-zero signal (rows {rows})")
    ss = graph.sum(graph.square(z), axis=-1, keepdims=True)
    inv_norm = graph.exp(graph.scale(graph.log(ss), -0.5))
    factor = graph.scale(graph.broadcast(inv_norm, z.shape), math.sqrt(d))
    return graph.multiply(z, factor)


def noise_variance(snr_db: float) -> float:
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    if snr_db == math.inf:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def _noise(rng: Rng, shape, snr_db: float) -> Optional[np.ndarray]:
    var = noise_variance(snr_db)
    if var == 0.0:
        return None
    return rng.normal(shape, scale=math.sqrt(var))


def awgn(graph: Graph, z, snr_db: float, rng: Rng) -> Tensor:
    z = graph.coerce(z)
    n = _noise(rng, z.shape, snr_db)
    if n is None:
        return z
    return graph.add(z, graph.constant(n))


def draw_rayleigh_gains(rng: Rng, n: int) -> Tuple[np.ndarray, int]:
    """n gains h = |g|, g complex with N(0, 1/2) parts. Gains under 1e-8 are
    redrawn; returns (gains, redraw count)."""
    scale = math.sqrt(0.5)

    def draw(k):
        parts = rng.normal((k, 2), scale=scale)
        return np.hypot(parts[:, 0], parts[:, 1])

    h = draw(n)
    redraws = 0
    low = np.flatnonzero(h < GAIN_FLOOR)
    while low.size:
        redraws += int(low.size)
        h[low] = draw(low.size)
        low = low[h[low] < GAIN_FLOOR]
    _count(n, redraws)
    return h, redraws


def rayleigh(graph: Graph, z, snr_db: float, rng: Rng, equalize: bool = True,
             gain: Optional[np.ndarray] = None) -> Tensor:
    """
    z_hat = h*z + n, or with equalization (h*z + n)/h, computed as z + n/h so
    that the noiseless equalized channel returns z exactly.
    `gain` pins h (scalar or one value per row) instead of drawing it.
    """
    z = graph.coerce(z)
    rows = z.shape[0] if len(z.shape) == 2 else 1
    if gain is None:
        h, _ = draw_rayleigh_gains(rng, rows)
    else:
        h = np.broadcast_to(np.asarray(gain, dtype=np.float64), (rows,)).copy()
        if np.any(h <= 0):
            raise ValueError("fading gain must be positive")
    col = h.reshape(-1, 1) if len(z.shape) == 2 else h.reshape(())
    col = np.broadcast_to(col, z.shape)

    n = _noise(rng, z.shape, snr_db)
    if equalize:
        if n is None:
            return z
        return graph.add(z, graph.constant(n / col))
    faded = graph.multiply(z, graph.constant(col))
    if n is None:
        return faded
    return graph.add(faded, graph.constant(n))


def sample_snr(channel: ChannelConfig, rng: Rng) -> float:
    """Training SNR for one step: fixed value, or uniform over snr_range."""
    if channel.policy == "fixed":
        return float(channel.snr_db)
    lo, hi = channel.snr_range
    return float(rng.uniform((), lo, hi))


def transmit(graph: Graph, z, channel: ChannelConfig, snr_db: float, rng: Rng,
             family: Optional[str] = None) -> Tensor:
    """Power-normalize, then pass through the configured channel family."""
    family = family or channel.family
    x = power_normalize(graph, z)
    if family == "awgn":
        return awgn(graph, x, snr_db, rng)
    if family == "rayleigh":
        return rayleigh(graph, x, snr_db, rng, equalize=channel.equalize)
    raise ValueError(f"unknown channel family: {family}")
