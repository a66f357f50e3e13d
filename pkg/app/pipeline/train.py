# app/pipeline/train.py
"""
One-step adversarial training.

Every step builds one graph, descends

    sum_m U-VIB_m + M-VIB + lambda_eff * sum_pairs BCE

and updates all modules with a single Adam step. Because J = 2 ln 2 - BCE,
the discriminators ascend J while GRL hands the encoders -alpha times that
gradient. The reported total is the J form: sum U + M + lambda_eff * sum J.

Adam is invariant to gradient scale, so lambda_eff would otherwise vanish from
the discriminator update. Their group steps at lr * disc_lr_scale * lambda_eff,
which keeps them slower than the encoders they play against.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from app.pipeline.channel import sample_snr
from app.pipeline.evaluate import evaluate
from app.pipeline.model import (
    LossParts, LossValues, ModelState, NonFiniteLossError, forward_pass, init_model,
)
from app.pipeline.redundancy import PAIRS
from app.schemas.config import ChannelConfig, TrainConfig
from app.schemas.dataset import MODALITIES, Dataset
from app.schemas.metrics import EpochRecord
from app.tools.logger import log_stderr
from app.tools.optim import Adam
from app.tools.rng import Rng
from app.tools.tensor import Graph, NonFiniteError, Tensor, backward


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, reason: str, epochs: Optional[List[EpochRecord]] = None):
        self.epoch = epoch
        self.step = step
        self.reason = reason
        self.epochs = list(epochs or [])
        super().__init__(f"training diverged at epoch {epoch} step {step}: {reason}")


def total_loss(parts: LossValues, lambda_red: float) -> float:
    """sum_m U-VIB_m + M-VIB + lambda_red * L_red."""
    return sum(parts.uvib.values()) + parts.mvib + lambda_red * parts.redundancy


def training_objective(graph: Graph, parts: LossParts, lambda_red: float) -> Tensor:
    """The descended scalar; the redundancy part enters through its BCE form."""
    out = parts.mvib
    for m in MODALITIES:
        out = graph.add(out, parts.uvib[m])
    if parts.adversarial is not None:
        out = graph.add(out, graph.scale(parts.adversarial, lambda_red))
    return out


def warmup_schedule(epoch: float, e_warm: int, total_epochs: int, lambda_red: float = 0.4,
                    alpha_max: float = 1.0) -> Tuple[float, float]:
    """
    (alpha, lambda_eff) at a possibly fractional epoch.

    alpha ramps 0 -> alpha_max over the first e_warm epochs. lambda_eff is 0
    before e_warm, then ramps to lambda_red at the last epoch index.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    alpha = alpha_max if e_warm == 0 else alpha_max * min(1.0, epoch / e_warm)
    if epoch < e_warm:
        return alpha, 0.0
    span = total_epochs - 1 - e_warm
    if span <= 0:
        return alpha, lambda_red
    return alpha, lambda_red * min(1.0, (epoch - e_warm) / span)


def minibatches(n: int, batch_size: int, rng: Rng) -> List[np.ndarray]:
    """Shuffled index batches; the trailing incomplete batch is dropped."""
    order = rng.permutation(n)
    full = n // batch_size
    return [order[k * batch_size:(k + 1) * batch_size] for k in range(full)]


@dataclass
class TrainResult:
    model: ModelState
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: int = 0


class _EpochMeter:
    def __init__(self):
        self.sums: Dict[str, float] = {}
        self.n = 0

    def add(self, values: LossValues, total: float) -> None:
        row = {f"uvib_{m}": v for m, v in values.uvib.items()}
        row.update(mvib=values.mvib, redundancy=values.redundancy, total=total)
        for k in PAIRS:
            row[f"bce_{k}"] = values.bce.get(k, 2 * math.log(2))
            row[f"p_pos_{k}"] = values.p_pos.get(k, 0.5)
            row[f"p_neg_{k}"] = values.p_neg.get(k, 0.5)
        for k, v in row.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.n += 1

    def means(self) -> Dict[str, float]:
        return {k: v / max(self.n, 1) for k, v in self.sums.items()}


def _validate(model: ModelState, dataset: Dataset, config: TrainConfig, epoch: int) -> Dict[str, float]:
    val = dataset.select("val")
    if len(val) == 0:
        return {}
    out = {}
    for snr in config.val_snr_grid:
        row = evaluate(model, val, config.channel.family, snr, seed=config.seed + epoch,
                       equalize=config.channel.equalize)
        tag = f"{snr:g}"
        out[f"top2@{tag}"] = row.top2
        out[f"top7@{tag}"] = row.top7
        out[f"f1@{tag}"] = row.f1
        out[f"mae@{tag}"] = row.mae
    return out


def train(config: TrainConfig, dataset: Dataset, progress: bool = False,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          validate: bool = True) -> TrainResult:
    train_idx = dataset.split_index("train")
    if train_idx.size < config.batch_size:
        raise ValueError(
            f"train split has {train_idx.size} rows, fewer than batch size {config.batch_size}")

    root = Rng(config.seed)
    init_rng, shuffle_rng, step_root = root.spawn(3)
    model = init_model(config.model, dataset.dims, init_rng)
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    disc_params = model.discriminator_parameters()
    result = TrainResult(model=model)
    channel: ChannelConfig = config.channel

    epoch_bar = tqdm(range(config.epochs), desc="Training", unit=" epoch",
                     leave=False, disable=not progress)
    for epoch in epoch_bar:
        batches = minibatches(train_idx.size, config.batch_size, shuffle_rng)
        meter = _EpochMeter()
        alpha = lam = 0.0
        for step, idx in enumerate(batches):
            frac = epoch + step / len(batches)
            alpha, lam = warmup_schedule(frac, config.e_warm, config.epochs,
                                         config.lambda_red, config.alpha_max)
            snr_rng, fwd_rng = step_root.spawn(2)
            snr = sample_snr(channel, snr_rng)
            batch = dataset.subset(train_idx[idx])
            try:
                out = forward_pass(batch, model, channel, snr, alpha, fwd_rng,
                                   beta=config.beta, gamma=config.gamma)
                objective = training_objective(out.graph, out.parts, lam)
            except (NonFiniteLossError, NonFiniteError) as e:
                raise TrainingDiverged(epoch, step, str(e), result.epochs) from e

            values = out.parts.values()
            reported = total_loss(values, lam)
            if not math.isfinite(reported) or abs(reported) > config.divergence_threshold:
                raise TrainingDiverged(epoch, step, f"loss {reported!r} exceeds "
                                       f"{config.divergence_threshold:g}", result.epochs)

            optimizer.zero_grad()
            backward(out.graph, objective)
            optimizer.set_scale(disc_params, config.disc_lr_scale * lam)
            optimizer.step()
            meter.add(values, reported)
            result.steps += 1

        means = meter.means()
        record = EpochRecord(
            epoch=epoch, alpha=alpha, lambda_red=lam, steps=len(batches),
            val=_validate(model, dataset, config, epoch) if validate else {},
            **means,
        )
        result.epochs.append(record)
        log_stderr("DEBUG", f"epoch {epoch} total={record.total:.4f} "
                            f"bce_it={record.bce_it:.4f} alpha={alpha:.3f} lambda={lam:.3f}")
        if on_epoch:
            on_epoch(record)
    epoch_bar.close()
    return result
