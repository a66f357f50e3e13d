# app/pipeline/evaluate.py
"""
Evaluation: deterministic-mode predictions through a channel, SNR sweeps,
and redundancy diagnostics of the trained discriminators.
"""
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.pipeline.model import ModelState, encode_modalities, infer
from app.pipeline.redundancy import PAIRS, score_pair, shuffle_negatives
from app.pipeline.scorecard import prediction_metrics
from app.pipeline.vib import TaskPrediction
from app.schemas.config import ChannelConfig
from app.schemas.dataset import MODALITIES, MultiModalBatch
from app.schemas.metrics import MetricsRow, RedundancyRow
from app.tools.knn_mi import MIN_SAMPLES, InsufficientSamplesError, oracle_mi
from app.tools.logger import log_stderr
from app.tools.rng import Rng
from app.tools.tensor import Graph

CHANNEL_FAMILIES = ("awgn", "rayleigh")


@dataclass
class Prediction:
    task: TaskPrediction
    latents: Dict[str, np.ndarray]     # modality -> latent means (n, k_m)


def predict(model: ModelState, batch: MultiModalBatch, family: str, snr_db: float, rng: Rng,
            equalize: bool = True, batch_size: int = 256) -> Prediction:
    """Batched inference over a split; chunk k draws channel noise from child stream k."""
    n = len(batch)
    if n == 0:
        raise ValueError("cannot predict on an empty split")
    channel = ChannelConfig(family=family, snr_db=snr_db, equalize=equalize)
    starts = list(range(0, n, batch_size))
    streams = rng.spawn(len(starts))
    logits, latents = [], {m: [] for m in MODALITIES}
    for start, stream in zip(starts, streams):
        stop = min(start + batch_size, n)
        feats = {m: batch.features[m][start:stop] for m in MODALITIES}
        out, lat = infer(model, feats, channel, snr_db, stream, family=family)
        logits.append(out)
        for m in MODALITIES:
            latents[m].append(lat[m])
    return Prediction(
        task=TaskPrediction(class_logits=np.vstack(logits)),
        latents={m: np.vstack(latents[m]) for m in MODALITIES},
    )


def evaluate(model: ModelState, batch: MultiModalBatch, family: str, snr_db: float,
             seed: int = 0, equalize: bool = True, batch_size: int = 256,
             redundancy: Optional[List[RedundancyRow]] = None) -> MetricsRow:
    pred = predict(model, batch, family, snr_db, Rng(seed), equalize, batch_size)
    m = prediction_metrics(pred.task, batch.label_score, batch.label_class)
    row = MetricsRow(channel=family, snr_db=snr_db, seed=str(seed), **m)
    if redundancy:
        _attach_redundancy(row, redundancy)
    return row


def _attach_redundancy(row: MetricsRow, report: List[RedundancyRow]) -> None:
    for r in report:
        setattr(row, f"bce_{r.pair}", r.bce)
        setattr(row, f"mi_{r.pair}", r.mi)


def redundancy_report(model: ModelState, batch: MultiModalBatch, seed: int = 0,
                      with_mi: bool = True) -> List[RedundancyRow]:
    """
    Per-pair BCE, J, mean sigma(T) on positives and negatives, and the kNN MI
    oracle, on held-out data. Latents are sampled as in training, so the
    discriminators are scored on the distribution they were trained on.
    """
    if len(batch) < 2:
        raise ValueError("redundancy report needs at least 2 samples")
    sample_rng, neg_rng = Rng(seed).spawn(2)
    graph = Graph()
    _, samples = encode_modalities(graph, batch.features, model, sample_rng, sample=True)
    latents = {m: samples[m].numpy() for m in MODALITIES}
    neg_rngs = dict(zip(PAIRS, neg_rng.spawn(len(PAIRS))))
    rows = []
    for name, (a, b) in PAIRS.items():
        pairs = shuffle_negatives(samples[a], samples[b], neg_rngs[name])
        s = score_pair(graph, model.discriminators[name], pairs)
        mi = None
        if with_mi:
            try:
                mi = oracle_mi(latents[a], latents[b])
            except InsufficientSamplesError:
                log_stderr("WARNING", f"skipping MI for pair {name}: fewer than {MIN_SAMPLES} samples")
        rows.append(RedundancyRow(pair=name, bce=s.bce.item(), j=s.j.item(),
                                  p_pos=s.p_pos, p_neg=s.p_neg, mi=mi))
    return rows


_METRIC_FIELDS = ("top2", "top7", "f1", "mae")
_REDUNDANCY_FIELDS = tuple(f"{p}_{k}" for p in ("bce", "mi") for k in PAIRS)


def aggregate_rows(rows: List[MetricsRow]) -> List[MetricsRow]:
    """One `agg` (mean over seeds) and one `agg_std` row per (channel, snr)."""
    groups: Dict[tuple, List[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.channel, r.snr_db), []).append(r)
    out = []
    for (family, snr), members in groups.items():
        for tag, fn in (("agg", np.mean), ("agg_std", np.std)):
            values = {f: float(fn([getattr(r, f) for r in members])) for f in _METRIC_FIELDS}
            for f in _REDUNDANCY_FIELDS:
                vals = [getattr(r, f) for r in members if getattr(r, f) is not None]
                values[f] = float(fn(vals)) if vals else None
            out.append(MetricsRow(channel=family, snr_db=snr, seed=tag,
                                  n_samples=members[0].n_samples, **values))
    return out


def snr_sweep(model: ModelState, batch: MultiModalBatch, snr_grid: Sequence[float],
              families: Sequence[str] = CHANNEL_FAMILIES, seeds: Sequence[int] = (0, 1, 2),
              equalize: bool = True, batch_size: int = 256, workers: int = 4,
              redundancy: Optional[List[RedundancyRow]] = None,
              progress: bool = False) -> List[MetricsRow]:
    """
    Full-split evaluation for every (family, snr, seed). Grid points run in a
    thread pool; each point seeds its own stream from (seed, family, snr index)
    so results do not depend on scheduling. Rows come back in grid order,
    followed by the aggregate rows.
    """
    if not snr_grid:
        raise ValueError("snr_grid must not be empty")
    for f in families:
        if f not in CHANNEL_FAMILIES:
            raise ValueError(f"unknown channel family: {f}")

    points = [(fi, family, gi, snr, seed)
              for fi, family in enumerate(families)
              for gi, snr in enumerate(snr_grid)
              for seed in seeds]

    def _run(point):
        fi, family, gi, snr, seed = point
        pred = predict(model, batch, family, snr, Rng(seed, (fi, gi)), equalize, batch_size)
        m = prediction_metrics(pred.task, batch.label_score, batch.label_class)
        row = MetricsRow(channel=family, snr_db=snr, seed=str(seed), **m)
        if redundancy:
            _attach_redundancy(row, redundancy)
        return row

    results: Dict[int, MetricsRow] = {}
    bar = tqdm(total=len(points), desc="Sweeping", unit=" point", leave=False, disable=not progress)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(_run, p): i for i, p in enumerate(points)}
        for fut in as_completed(futures):
            results[futures[fut]] = fut.result()
            bar.update(1)
    bar.close()

    rows = [results[i] for i in range(len(points))]
    return rows + aggregate_rows(rows)
