# app/pipeline/ingest.py
"""
Feature files: one text file per split.

    n_rows d_i d_t d_a
    <label_score> <d_i image values> <d_t text values> <d_a audio values>
    ...

Whitespace separated, UTF-8, LF line endings. Values are written with 17
significant digits so a write/load round trip is exact.
"""
import os
from typing import Dict, List, Optional

import numpy as np
import yaml

from app.schemas.config import SyntheticSpec
from app.schemas.dataset import MODALITIES, SPLITS, Dataset

SPEC_ECHO = "spec.yaml"


class FeatureFileError(ValueError):
    pass


class MalformedHeaderError(FeatureFileError):
    pass


class AlignmentError(FeatureFileError):
    pass


class LabelRangeError(FeatureFileError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _parse_header(line: str, path: str) -> List[int]:
    parts = line.split()
    if len(parts) != 4:
        raise MalformedHeaderError(f"{path}: header must be 'n_rows d_i d_t d_a', got {line.strip()!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-integer header {line.strip()!r}") from None
    if values[0] < 0 or any(d < 1 for d in values[1:]):
        raise MalformedHeaderError(f"{path}: header counts out of range {values}")
    return values


def load_features(path: str, split: Optional[str] = None) -> Dataset:
    """Read one feature file. Every row gets `split`, or the file stem when it
    names a split, or 'train'."""
    if split is None:
        stem = os.path.splitext(os.path.basename(path))[0]
        split = stem if stem in SPLITS else "train"

    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln.strip()]
    if not lines:
        raise MalformedHeaderError(f"{path}: empty file")
    n_rows, *dims = _parse_header(lines[0], path)
    rows = lines[1:]
    if len(rows) != n_rows:
        raise AlignmentError(f"{path}: header declares {n_rows} rows, found {len(rows)}")

    widths = dict(zip(MODALITIES, dims))
    expected = 1 + sum(dims)
    scores = np.empty(n_rows)
    feats = {m: np.empty((n_rows, widths[m])) for m in MODALITIES}
    for r, line in enumerate(rows):
        try:
            values = np.array([float(t) for t in line.split()])
        except ValueError as e:
            raise FeatureFileError(f"{path}: row {r + 1}: {e}") from None
        if values.size != expected:
            raise AlignmentError(f"{path}: row {r + 1}: {_misaligned(values.size - 1, widths)}")
        scores[r] = values[0]
        offset = 1
        for m in MODALITIES:
            feats[m][r] = values[offset:offset + widths[m]]
            offset += widths[m]

    bad = np.flatnonzero((scores < -3.0) | (scores > 3.0) | ~np.isfinite(scores))
    if bad.size:
        raise LabelRangeError(
            f"{path}: label score outside [-3, 3] at row {int(bad[0]) + 1}: {scores[bad[0]]}")
    return Dataset(features=feats, label_score=scores, split=np.full(n_rows, split))


def _misaligned(n_values: int, widths: Dict[str, int]) -> str:
    """Name the first modality whose block is short or the overflow."""
    remaining = n_values
    for m in MODALITIES:
        if remaining < widths[m]:
            return f"{m} has {max(remaining, 0)} values, expected {widths[m]}"
        remaining -= widths[m]
    return f"{remaining} values beyond image/text/audio widths {list(widths.values())}"


def write_split(dataset: Dataset, index: np.ndarray, path: str) -> None:
    dims = dataset.dims
    lines = [f"{index.size} {dims['image']} {dims['text']} {dims['audio']}"]
    for i in index:
        cells = [_fmt(dataset.label_score[i])]
        for m in MODALITIES:
            cells.extend(_fmt(v) for v in dataset.features[m][i])
        lines.append(" ".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_features(dataset: Dataset, directory: str, spec: Optional[SyntheticSpec] = None) -> List[str]:
    """Write `<split>.txt` for each split and, when given, the generating spec."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for split in SPLITS:
        path = os.path.join(directory, f"{split}.txt")
        write_split(dataset, dataset.split_index(split), path)
        written.append(path)
    if spec is not None:
        path = os.path.join(directory, SPEC_ECHO)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            yaml.safe_dump(spec.model_dump(mode="json"), f, sort_keys=False)
        written.append(path)
    return written


def load_dataset_dir(directory: str) -> Dataset:
    """Concatenate the split files found in `directory`; train.txt is required."""
    train_path = os.path.join(directory, "train.txt")
    if not os.path.exists(train_path):
        raise FileNotFoundError(f"dataset not found: expected {train_path}")
    parts = [load_features(os.path.join(directory, f"{s}.txt"), split=s)
             for s in SPLITS if os.path.exists(os.path.join(directory, f"{s}.txt"))]
    dims = parts[0].dims
    for p in parts[1:]:
        if p.dims != dims:
            raise AlignmentError(f"{directory}: split files disagree on widths {dims} vs {p.dims}")
    return Dataset(
        features={m: np.vstack([p.features[m] for p in parts]) for m in MODALITIES},
        label_score=np.concatenate([p.label_score for p in parts]),
        split=np.concatenate([p.split for p in parts]),
    )
