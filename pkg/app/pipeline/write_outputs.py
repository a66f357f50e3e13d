# app/pipeline/write_outputs.py
import csv
import json
import math
from typing import Iterable, List, Optional, Sequence

from app.schemas.metrics import EpochRecord, MetricsRow, RedundancyRow

METRICS_COLUMNS = ["channel", "snr_db", "seed", "top2", "top7", "f1", "mae",
                   "bce_it", "bce_ia", "bce_ta", "mi_it", "mi_ia", "mi_ta"]
REDUNDANCY_COLUMNS = ["pair", "bce", "j", "p_pos", "p_neg", "mi"]


def cell(v) -> str:
    """CSV rendering: empty for None, 'inf' for the noiseless sentinel, 10 significant digits."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(v)


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([cell(v) for v in r])


def write_metrics_csv(path: str, rows: List[MetricsRow]) -> None:
    _write_csv(path, METRICS_COLUMNS, ([getattr(r, c) for c in METRICS_COLUMNS] for r in rows))


def write_redundancy_csv(path: str, rows: List[RedundancyRow]) -> None:
    _write_csv(path, REDUNDANCY_COLUMNS, ([getattr(r, c) for c in REDUNDANCY_COLUMNS] for r in rows))


def epoch_columns(records: List[EpochRecord]) -> List[str]:
    base = [f for f in EpochRecord.model_fields if f != "val"]
    val_keys: List[str] = []
    for r in records:
        for k in r.val:
            if k not in val_keys:
                val_keys.append(k)
    return base + [f"val_{k}" for k in val_keys]


def write_epoch_log_csv(path: str, records: List[EpochRecord]) -> None:
    columns = epoch_columns(records)

    def row(r: EpochRecord):
        d = r.model_dump()
        return [r.val.get(c[4:]) if c.startswith("val_") else d[c] for c in columns]

    _write_csv(path, columns, (row(r) for r in records))


def metrics_table_md(rows: List[MetricsRow], seed_filter: Optional[str] = "agg") -> str:
    """Markdown table of the metric columns; by default only the seed-mean rows."""
    picked = [r for r in rows if seed_filter is None or r.seed == seed_filter] or rows
    lines = ["| channel | snr_db | seed | top2 | top7 | f1 | mae |",
             "|---|---|---|---|---|---|---|"]
    for r in picked:
        lines.append(f"| {r.channel} | {cell(r.snr_db)} | {r.seed} | {r.top2:.4f} | "
                     f"{r.top7:.4f} | {r.f1:.4f} | {r.mae:.4f} |")
    return "\n".join(lines)


def redundancy_table_md(rows: List[RedundancyRow]) -> str:
    lines = ["| pair | BCE | J | p_pos | p_neg | MI (kNN) |", "|---|---|---|---|---|---|"]
    for r in rows:
        mi = f"{r.mi:.4f}" if r.mi is not None else "—"
        lines.append(f"| {r.pair} | {r.bce:.4f} | {r.j:.4f} | {r.p_pos:.4f} | {r.p_neg:.4f} | {mi} |")
    return "\n".join(lines)


def write_json(path: str, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2)


def write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
