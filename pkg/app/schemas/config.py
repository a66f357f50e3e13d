# app/schemas/config.py
import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

ChannelFamily = Literal["awgn", "rayleigh"]


class SyntheticSpec(BaseModel):
    n_samples: int = Field(8000, ge=7)
    dims: Tuple[int, int, int] = (16, 16, 16)   # image, text, audio
    rho: float = Field(0.8, ge=0.0, le=1.0)     # shared-factor weight
    shared_dim: int = Field(4, ge=1)
    private_dim: int = Field(4, ge=0)
    factor_noise_std: float = Field(0.1, ge=0.0)
    noise_std: float = Field(0.1, ge=0.0)
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _dims_positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError(f"modality dims must be >= 1, got {v}")
        return v


class ChannelConfig(BaseModel):
    family: ChannelFamily = "awgn"
    snr_db: Optional[float] = None                     # fixed SNR; +inf is noiseless
    snr_range: Optional[Tuple[float, float]] = (0.0, 21.0)
    equalize: bool = True                              # Rayleigh only

    @model_validator(mode="after")
    def _check_policy(self):
        if self.snr_db is not None:
            if math.isnan(self.snr_db) or self.snr_db == -math.inf:
                raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        elif self.snr_range is None:
            raise ValueError("either snr_db or snr_range must be set")
        else:
            lo, hi = self.snr_range
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"snr_range must be finite, got {self.snr_range}")
            if lo > hi:
                raise ValueError(f"snr_range lo > hi: {self.snr_range}")
        return self

    @property
    def policy(self) -> str:
        return "fixed" if self.snr_db is not None else "uniform"


class ModelConfig(BaseModel):
    feature_hidden: int = Field(32, ge=0)               # 0 = identity feature encoder
    latent_dims: Tuple[int, int, int] = (8, 8, 8)
    transmitted_dim: int = Field(50, ge=1)
    fusion_hidden: int = Field(64, ge=1)
    receiver_latent_dim: int = Field(16, ge=1)
    decoder_hidden: int = Field(32, ge=1)
    disc_hidden: int = Field(64, ge=1)
    reverse_both: bool = True                           # GRL on both pair members

    @field_validator("latent_dims")
    @classmethod
    def _latents_positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError(f"latent dims must be >= 1, got {v}")
        return v


class TrainConfig(BaseModel):
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=2)
    lambda_red: float = Field(0.4, ge=0.0)
    e_warm: int = Field(3, ge=0)
    alpha_max: float = Field(1.0, ge=0.0)
    beta: float = Field(1e-3, ge=0.0)
    gamma: float = Field(1e-3, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    disc_lr_scale: float = Field(0.05, ge=0.0)          # discriminator step = lr * scale * lambda_eff
    seed: int = 0
    val_snr_grid: List[float] = Field(default_factory=lambda: [18.0])
    divergence_threshold: float = 1e6
    model: ModelConfig = Field(default_factory=ModelConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)


class EvalConfig(BaseModel):
    snr_grid: List[float] = Field(default_factory=lambda: [float(s) for s in range(-12, 19, 3)])
    families: List[ChannelFamily] = Field(default_factory=lambda: ["awgn", "rayleigh"])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    equalize: bool = True
    split: Literal["train", "val", "test"] = "test"
    batch_size: int = Field(256, ge=1)
    workers: int = Field(4, ge=1)
    with_mi: bool = True

    @field_validator("snr_grid")
    @classmethod
    def _grid_nonempty(cls, v):
        if not v:
            raise ValueError("snr_grid must not be empty")
        return v


class DataConfig(BaseModel):
    data_dir: str = "data/synthetic"
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)


class OutputConfig(BaseModel):
    root: str = "runs"


class LoggingConfig(BaseModel):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class RunConfig(BaseModel):
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
