# app/store/run_index.py
import os
import json
from datetime import datetime


def append_run_index(
    run_id: str,
    command: str,
    outdir: str,
    headline: dict,
    duration_sec: float,
    status: str = "ok",
    store_dir: str = "store",
):
    os.makedirs(store_dir, exist_ok=True)
    path = os.path.join(store_dir, "run_index.jsonl")
    rec = {
        "run_id": run_id,
        "timestamp": datetime.now().isoformat(),
        "command": command,
        "status": status,
        "outdir": outdir,
        "headline": headline,
        "duration_sec": round(float(duration_sec), 2),
    }
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(rec, ensure_ascii=False) + "\n")
