# app/schemas/dataset.py
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

MODALITIES = ("image", "text", "audio")
SPLITS = ("train", "val", "test")
N_CLASSES = 7


def score_to_class(scores: np.ndarray) -> np.ndarray:
    """Round half up, then shift [-3, 3] onto class ids 0..6."""
    cls = np.floor(np.asarray(scores, dtype=np.float64) + 0.5).astype(np.int64) + 3
    return np.clip(cls, 0, N_CLASSES - 1)


@dataclass
class MultiModalBatch:
    features: Dict[str, np.ndarray]   # modality -> (n, d_m)
    label_class: np.ndarray           # (n,) int 0..6
    label_score: np.ndarray           # (n,) float in [-3, 3]

    def __len__(self) -> int:
        return int(self.label_class.shape[0])

    @property
    def binary(self) -> np.ndarray:
        """1 = positive sentiment (zero score counts positive)."""
        return (self.label_score >= 0).astype(np.int64)


@dataclass
class Dataset:
    features: Dict[str, np.ndarray]
    label_score: np.ndarray
    split: np.ndarray                 # (n,) str tags
    label_class: np.ndarray = field(default=None)

    def __post_init__(self):
        self.label_score = np.asarray(self.label_score, dtype=np.float64)
        if self.label_class is None:
            self.label_class = score_to_class(self.label_score)
        n = self.label_score.shape[0]
        for m in MODALITIES:
            if self.features[m].shape[0] != n:
                raise ValueError(
                    f"modality {m} has {self.features[m].shape[0]} rows, labels have {n}")

    def __len__(self) -> int:
        return int(self.label_score.shape[0])

    @property
    def dims(self) -> Dict[str, int]:
        return {m: int(self.features[m].shape[1]) for m in MODALITIES}

    def subset(self, index: np.ndarray) -> MultiModalBatch:
        index = np.asarray(index)
        return MultiModalBatch(
            features={m: self.features[m][index] for m in MODALITIES},
            label_class=self.label_class[index],
            label_score=self.label_score[index],
        )

    def split_index(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def select(self, name: str) -> MultiModalBatch:
        return self.subset(self.split_index(name))
