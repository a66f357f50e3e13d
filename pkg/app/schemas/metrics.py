# app/schemas/metrics.py
from typing import Dict, Optional

from pydantic import BaseModel, Field


class MetricsRow(BaseModel):
    channel: str
    snr_db: float
    seed: str
    top2: float = Field(ge=0.0, le=1.0)
    top7: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    mae: float = Field(ge=0.0)
    bce_it: Optional[float] = None
    bce_ia: Optional[float] = None
    bce_ta: Optional[float] = None
    mi_it: Optional[float] = None
    mi_ia: Optional[float] = None
    mi_ta: Optional[float] = None
    n_samples: int = 0


class RedundancyRow(BaseModel):
    pair: str
    bce: float
    j: float
    p_pos: float
    p_neg: float
    mi: Optional[float] = None


class EpochRecord(BaseModel):
    epoch: int
    alpha: float
    lambda_red: float
    steps: int
    uvib_image: float
    uvib_text: float
    uvib_audio: float
    mvib: float
    redundancy: float
    total: float
    bce_it: float
    bce_ia: float
    bce_ta: float
    p_pos_it: float
    p_neg_it: float
    p_pos_ia: float
    p_neg_ia: float
    p_pos_ta: float
    p_neg_ta: float
    val: Dict[str, float] = Field(default_factory=dict)
