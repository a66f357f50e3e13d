# app/main.py
import os
import sys
import math
import time
import argparse
import traceback
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from app.tools.logger import LOG_LEVEL_ENV, RunLogger, log_stderr, make_run_logger
from app.store.run_index import append_run_index
from app.store.checkpoint import CheckpointError, check_dims, load_checkpoint, save_checkpoint
from app.schemas.config import RunConfig
from app.schemas.metrics import EpochRecord
from app.pipeline.channel import CHANNEL_STATS, reset_channel_stats
from app.pipeline.evaluate import CHANNEL_FAMILIES, redundancy_report, snr_sweep
from app.pipeline.ingest import FeatureFileError, load_dataset_dir, write_features
from app.pipeline.model import NonFiniteLossError
from app.pipeline.synthetic import generate_synthetic
from app.pipeline.train import TrainingDiverged, train
from app.pipeline.write_outputs import (
    metrics_table_md, redundancy_table_md, write_epoch_log_csv, write_metrics_csv,
    write_json, write_redundancy_csv, write_text,
)
from app.selftest import run_selftest
from app.tools.tensor import NonFiniteError
from app.version import __version__

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3


class ConfigError(ValueError):
    pass


# ----------------------------
# Configuration
# ----------------------------

def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path: Optional[str] = "config.yaml", overrides: Optional[Dict[str, Any]] = None,
                required: bool = False) -> RunConfig:
    """
    Resolve the run configuration.
    Precedence (highest to lowest):
    1. CLI flag overrides (dotted keys)
    2. Environment variables (MMTOC_*)
    3. .env file
    4. config.yaml
    5. RunConfig defaults
    """
    # .env never overrides variables already set in the environment
    load_dotenv(override=False)

    cfg: dict = {}
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            try:
                cfg = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: invalid YAML ({e})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
    elif required:
        raise ConfigError(f"config file not found: {path}")

    if os.getenv("MMTOC_OUTPUT_ROOT"):
        set_path(cfg, "output.root", os.environ["MMTOC_OUTPUT_ROOT"])
    if os.getenv(LOG_LEVEL_ENV):
        set_path(cfg, "logging.level", os.environ[LOG_LEVEL_ENV].upper())

    for key, value in (overrides or {}).items():
        if value is not None:
            set_path(cfg, key, value)

    return RunConfig.model_validate(cfg)


def plain(obj):
    """Config dump in YAML/JSON-safe containers (tuples become lists)."""
    if isinstance(obj, dict):
        return {k: plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    return obj


def config_echo(cfg: RunConfig) -> dict:
    return plain(cfg.model_dump())


def write_config_echo(outdir: str, cfg: RunConfig) -> None:
    with open(os.path.join(outdir, "config.yaml"), "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(config_echo(cfg), f, sort_keys=False)


def parse_grid(text: str) -> List[float]:
    """'lo:hi:step' inclusive of hi, or a comma list; 'inf' is the noiseless point."""
    text = text.strip()
    if ":" in text:
        try:
            lo, hi, step = (float(p) for p in text.split(":"))
        except ValueError:
            raise ConfigError(f"--grid expects lo:hi:step, got {text!r}") from None
        if step <= 0 or hi < lo:
            raise ConfigError(f"--grid needs step > 0 and lo <= hi, got {text!r}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [lo + k * step for k in range(count)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--grid expects numbers, got {text!r}") from None


def parse_list(text: Optional[str], cast=str) -> Optional[list]:
    if text is None:
        return None
    try:
        return [cast(p.strip()) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"could not parse list {text!r}") from None


# ----------------------------
# Run manifest
# ----------------------------

def utc_now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def write_run_manifest(outdir: str, manifest: dict) -> None:
    write_json(os.path.join(outdir, "run.json"), manifest)


def stage_start(manifest: dict, stage_key: str) -> float:
    manifest.setdefault("timings", {})
    manifest["timings"].setdefault(stage_key, {})
    manifest["timings"][stage_key]["started_utc"] = utc_now_iso()
    return time.perf_counter()


def stage_end(manifest: dict, stage_key: str, perf_start: float) -> float:
    dur = time.perf_counter() - perf_start
    manifest["timings"][stage_key]["finished_utc"] = utc_now_iso()
    manifest["timings"][stage_key]["duration_sec"] = round(dur, 4)
    return dur


def add_artifact(manifest: dict, key: str, filename: str) -> None:
    manifest.setdefault("artifacts", {})
    manifest.setdefault("outputs", [])
    manifest["artifacts"][key] = filename
    if filename not in manifest["outputs"]:
        manifest["outputs"].append(filename)


def format_seconds(sec: Optional[float]) -> str:
    if sec is None:
        return "—"
    try:
        return f"{float(sec):.2f}s"
    except (TypeError, ValueError):
        return "—"


def write_artifacts_index(outdir: str, manifest: dict) -> None:
    """Human-friendly index of run outputs, rewritten after every stage."""
    artifacts = manifest.get("artifacts", {}) or {}
    timings = manifest.get("timings", {}) or {}

    file_lines = [f"- **{key}:** `{fn}`" for key, fn in artifacts.items()]
    stage_lines = []
    for sk in manifest.get("stage_order", []) or []:
        if sk in timings:
            stage_lines.append(f"- `{sk}` — {format_seconds(timings[sk].get('duration_sec'))}")
        else:
            stage_lines.append(f"- `{sk}` — (not run)")

    error_block = ""
    if manifest.get("status") == "error" and manifest.get("error"):
        err = manifest["error"]
        error_block = (
            "\n## Error\n"
            f"- **Type:** `{err.get('type')}`\n"
            f"- **Message:** {err.get('message')}\n"
            f"- **See:** `run.log` for traceback\n"
        )

    md = f"""# mmtoc Run Artifacts

- **Run ID:** `{manifest.get('run_id')}`
- **Command:** `{manifest.get('command')}`
- **Status:** `{manifest.get('status')}`

## Files
{chr(10).join(file_lines)}

## Stage timings
{chr(10).join(stage_lines)}
{error_block}
"""
    write_text(os.path.join(outdir, "artifacts_index.md"), md)


class Run:
    """Output directory, logger and manifest of one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, outdir: Optional[str], stage_order: List[str]):
        self.command = command
        self.cfg = cfg
        self.run_id = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.outdir = outdir or os.path.join(cfg.output.root, f"{self.run_id}__{command}")
        os.makedirs(self.outdir, exist_ok=True)
        self.log: RunLogger = make_run_logger(self.run_id, outdir=self.outdir)
        self.t0 = time.time()
        self.manifest = {
            "manifest_version": "1.0",
            "status": "running",  # running | ok | error
            "run_id": self.run_id,
            "command": command,
            "version": __version__,
            "started_utc": utc_now_iso(),
            "finished_utc": None,
            "duration_sec": None,
            "outdir": self.outdir,
            "config": config_echo(cfg),
            "counts": {},
            "headline": {},
            "channel_stats": {},
            "timings": {},
            "stage_order": stage_order,
            "error": None,
            "artifacts": {},
            "outputs": [],
        }
        add_artifact(self.manifest, "manifest", "run.json")
        add_artifact(self.manifest, "log", "run.log")
        add_artifact(self.manifest, "artifacts_index", "artifacts_index.md")
        write_config_echo(self.outdir, cfg)
        add_artifact(self.manifest, "config", "config.yaml")
        self.persist()

    def path(self, filename: str) -> str:
        return os.path.join(self.outdir, filename)

    def persist(self) -> None:
        self.manifest["channel_stats"] = dict(CHANNEL_STATS)
        write_run_manifest(self.outdir, self.manifest)
        write_artifacts_index(self.outdir, self.manifest)

    def artifact(self, key: str, filename: str) -> None:
        add_artifact(self.manifest, key, filename)
        self.persist()

    def fail(self, e: BaseException) -> None:
        self.manifest["status"] = "error"
        self.manifest["error"] = {
            "type": type(e).__name__,
            "message": str(e),
            "traceback": traceback.format_exc(),
        }
        self.log.error(f"{type(e).__name__}: {e}")
        self.log.debug(self.manifest["error"]["traceback"])
        self.persist()

    def finish(self) -> None:
        duration = time.time() - self.t0
        self.manifest["finished_utc"] = utc_now_iso()
        self.manifest["duration_sec"] = round(duration, 3)
        self.persist()
        append_run_index(
            run_id=self.run_id,
            command=self.command,
            outdir=self.outdir,
            headline=self.manifest.get("headline", {}),
            duration_sec=duration,
            status=self.manifest["status"],
        )
        self.log.log(f"RUN END status={self.manifest['status']} duration_sec={round(duration, 2)} "
                     f"outdir={self.outdir}")


# ----------------------------
# Commands
# ----------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    outdir = args.out or cfg.data.data_dir
    run = Run("gen-data", cfg, outdir, ["generate", "write_features"])
    try:
        spec = cfg.data.synthetic
        run.log.log(f"RUN START gen-data rho={spec.rho} n={spec.n_samples} seed={spec.seed}")
        s = stage_start(run.manifest, "generate")
        dataset = generate_synthetic(spec)
        stage_end(run.manifest, "generate", s)

        s = stage_start(run.manifest, "write_features")
        for path in write_features(dataset, run.outdir, spec=spec):
            name = os.path.basename(path)
            add_artifact(run.manifest, os.path.splitext(name)[0], name)
        stage_end(run.manifest, "write_features", s)

        run.manifest["counts"] = {sp: int(dataset.split_index(sp).size) for sp in ("train", "val", "test")}
        run.manifest["headline"] = {"n_samples": len(dataset), "rho": spec.rho}
        run.manifest["status"] = "ok"
        run.log.log(f"Wrote {len(dataset)} rows to {run.outdir} ({run.manifest['counts']})")
    except Exception as e:
        run.fail(e)
        raise
    finally:
        run.finish()
    return EXIT_OK


def _load_dataset(cfg: RunConfig, args):
    return load_dataset_dir(args.data_dir or cfg.data.data_dir)


def cmd_train(args, cfg: RunConfig) -> int:
    run = Run("train", cfg, args.out, ["load_data", "train", "checkpoint"])
    records: List[EpochRecord] = []
    try:
        tc = cfg.train
        run.log.log(f"RUN START train epochs={tc.epochs} lambda_red={tc.lambda_red} "
                    f"alpha_max={tc.alpha_max} channel={tc.channel.family}/{tc.channel.policy} seed={tc.seed}")
        s = stage_start(run.manifest, "load_data")
        dataset = _load_dataset(cfg, args)
        stage_end(run.manifest, "load_data", s)
        run.manifest["counts"] = {"rows": len(dataset), "dims": dataset.dims}
        run.persist()

        def on_epoch(record: EpochRecord) -> None:
            records.append(record)
            write_epoch_log_csv(run.path("epoch_log.csv"), records)
            val = " ".join(f"{k}={v:.4f}" for k, v in record.val.items())
            run.log.log(f"epoch {record.epoch + 1}/{tc.epochs} total={record.total:.4f} "
                        f"red={record.redundancy:.4f} alpha={record.alpha:.3f} "
                        f"lambda={record.lambda_red:.3f} {val}".rstrip())

        s = stage_start(run.manifest, "train")
        try:
            result = train(tc, dataset, progress=not args.quiet, on_epoch=on_epoch)
        finally:
            stage_end(run.manifest, "train", s)
            if records:
                add_artifact(run.manifest, "epoch_log", "epoch_log.csv")

        s = stage_start(run.manifest, "checkpoint")
        save_checkpoint(run.path("checkpoint.json"), result.model, tc.seed, config=config_echo(cfg))
        stage_end(run.manifest, "checkpoint", s)
        run.artifact("checkpoint", "checkpoint.json")

        last = result.epochs[-1]
        run.manifest["headline"] = {"total": last.total, "redundancy": last.redundancy, **last.val}
        run.manifest["counts"]["steps"] = result.steps
        summary = ["# mmtoc training summary", "",
                   f"- epochs: {len(result.epochs)}",
                   f"- steps: {result.steps}",
                   f"- final total loss: {last.total:.4f}",
                   f"- final redundancy (sum J): {last.redundancy:.4f}",
                   f"- final BCE it/ia/ta: {last.bce_it:.4f} / {last.bce_ia:.4f} / {last.bce_ta:.4f}"]
        summary += [f"- val {k}: {v:.4f}" for k, v in last.val.items()]
        write_text(run.path("summary.md"), "\n".join(summary) + "\n")
        add_artifact(run.manifest, "summary", "summary.md")
        run.manifest["status"] = "ok"
    except TrainingDiverged as e:
        if e.epochs and not records:
            write_epoch_log_csv(run.path("epoch_log.csv"), e.epochs)
            add_artifact(run.manifest, "epoch_log", "epoch_log.csv")
        run.fail(e)
        raise
    except Exception as e:
        run.fail(e)
        raise
    finally:
        run.finish()
    print(f"Done. Outputs in: {run.outdir}")
    return EXIT_OK


def _evaluate_run(command: str, args, cfg: RunConfig, grid: List[float], families: List[str]) -> int:
    run = Run(command, cfg, args.out, ["load", "redundancy_report", "sweep"])
    try:
        ec = cfg.eval
        run.log.log(f"RUN START {command} checkpoint={args.checkpoint} families={families} "
                    f"grid={grid} seeds={ec.seeds} split={ec.split}")
        s = stage_start(run.manifest, "load")
        model, meta = load_checkpoint(args.checkpoint)
        dataset = _load_dataset(cfg, args)
        check_dims(model, dataset.dims)
        batch = dataset.select(ec.split)
        if len(batch) == 0:
            raise FeatureFileError(f"split '{ec.split}' is empty")
        stage_end(run.manifest, "load", s)
        run.manifest["counts"] = {"rows": len(batch), "train_seed": meta.get("seed")}
        run.persist()

        s = stage_start(run.manifest, "redundancy_report")
        report = redundancy_report(model, batch, seed=ec.seeds[0] if ec.seeds else 0, with_mi=ec.with_mi)
        stage_end(run.manifest, "redundancy_report", s)
        write_redundancy_csv(run.path("redundancy.csv"), report)
        run.artifact("redundancy", "redundancy.csv")

        reset_channel_stats()
        s = stage_start(run.manifest, "sweep")
        rows = snr_sweep(model, batch, grid, families=families, seeds=ec.seeds,
                         equalize=ec.equalize, batch_size=ec.batch_size, workers=ec.workers,
                         redundancy=report, progress=not args.quiet)
        stage_end(run.manifest, "sweep", s)
        write_metrics_csv(run.path("results.csv"), rows)
        add_artifact(run.manifest, "results", "results.csv")

        md = [f"# mmtoc {command}", "", f"- checkpoint: `{args.checkpoint}`",
              f"- split: {ec.split} ({len(batch)} rows)", f"- equalize: {ec.equalize}", "",
              "## Task metrics (mean over seeds)", "", metrics_table_md(rows), "",
              "## Redundancy", "", redundancy_table_md(report), ""]
        write_text(run.path("summary.md"), "\n".join(md))
        add_artifact(run.manifest, "summary", "summary.md")

        agg = [r for r in rows if r.seed == "agg"]
        best = max(agg, key=lambda r: r.top2)
        run.manifest["headline"] = {"points": len(rows) - len(agg) * 2, "best_top2": best.top2,
                                    "best_channel": best.channel, "best_snr_db": best.snr_db}
        run.manifest["status"] = "ok"
        run.log.log(f"{len(rows)} rows; best top2={best.top2:.4f} at {best.channel} {best.snr_db:g} dB")
    except Exception as e:
        run.fail(e)
        raise
    finally:
        run.finish()
    print(f"Done. Outputs in: {run.outdir}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    family = args.channel or cfg.train.channel.family
    snr = float(args.snr)
    return _evaluate_run("eval", args, cfg, [snr], [family])


def cmd_sweep(args, cfg: RunConfig) -> int:
    grid = parse_grid(args.grid) if args.grid else list(cfg.eval.snr_grid)
    return _evaluate_run("sweep", args, cfg, grid, list(cfg.eval.families))


def cmd_selftest(args, cfg: RunConfig) -> int:
    def report(res) -> None:
        print(res.line(), flush=True)

    t0 = time.time()
    results = run_selftest(quick=args.quick, on_result=report)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    if failed:
        for r in failed:
            log_stderr("ERROR", f"{r.name}: measured {r.measured}; expected {r.expected}")
        return EXIT_SELFTEST
    return EXIT_OK


# ----------------------------
# Main
# ----------------------------

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="mmtoc", description="Multi-modal task-oriented communication simulator")
    parser.add_argument("--version", action="version", version=f"mmtoc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="Path to config.yaml (default: ./config.yaml when present).")
    common.add_argument("--data-dir", type=str, default=None, help="Feature file directory.")
    common.add_argument("--out", type=str, default=None, help="Output directory for this run.")
    common.add_argument("--seed", type=int, default=None, help="Seed override.")
    common.add_argument("--quiet", action="store_true",
                        help="Suppress DEBUG/INFO output (show only warnings and errors).")
    common.add_argument("--verbose", action="store_true",
                        help="Show all DEBUG output (overrides --quiet).")

    p = sub.add_parser("gen-data", parents=[common], help="Generate the synthetic dataset.")
    p.add_argument("--rho", type=float, default=None, help="Shared-factor weight in [0, 1].")
    p.add_argument("--n-samples", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="Train the two-stage model.")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda-red", type=float, default=None, help="Redundancy weight; 0 = baseline.")
    p.add_argument("--no-grl", action="store_true", help="Pin the GRL coefficient to 0.")
    p.add_argument("--noiseless-train", action="store_true", help="Train at SNR = +inf.")
    p.add_argument("--transmitted-dim", type=int, default=None)
    p.add_argument("--channel", choices=CHANNEL_FAMILIES, default=None, help="Training channel family.")

    for name, help_text in (("eval", "Evaluate a checkpoint at one SNR."),
                            ("sweep", "Sweep a checkpoint over an SNR grid.")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", type=str, required=True)
        p.add_argument("--seeds", type=str, default=None, help="Comma list, e.g. 0,1,2.")
        p.add_argument("--split", choices=("train", "val", "test"), default=None)
        p.add_argument("--no-mi", action="store_true", help="Skip the kNN MI oracle.")
        p.add_argument("--no-equalize", action="store_true", help="Rayleigh without equalization.")
        p.add_argument("--workers", type=int, default=None)
        if name == "eval":
            p.add_argument("--channel", choices=CHANNEL_FAMILIES, default=None)
            p.add_argument("--snr", type=str, default="inf", help="SNR in dB; 'inf' = noiseless.")
        else:
            p.add_argument("--families", type=str, default=None, help="Comma list: awgn,rayleigh.")
            p.add_argument("--grid", type=str, default=None, help="lo:hi:step in dB, e.g. -12:18:3.")

    p = sub.add_parser("selftest", parents=[common], help="Run the property self-checks.")
    p.add_argument("--quick", action="store_true", help="Reduced sample sizes.")
    return parser


# Flags whose value may start with "-" (negative dB); argparse would take it for an option.
SIGNED_VALUE_FLAGS = ("--grid", "--snr")


def join_signed_values(argv: List[str]) -> List[str]:
    """Rewrite `--grid -12:18:3` as `--grid=-12:18:3`."""
    out: List[str] = []
    tokens = iter(argv)
    for tok in tokens:
        value = next(tokens, None) if tok in SIGNED_VALUE_FLAGS else None
        out.append(tok if value is None else f"{tok}={value}")
    return out


def collect_overrides(args) -> Dict[str, Any]:
    o: Dict[str, Any] = {}
    if args.verbose:
        o["logging.level"] = "DEBUG"
    elif args.quiet:
        o["logging.level"] = "WARNING"
    if args.data_dir:
        o["data.data_dir"] = args.data_dir
    if args.command == "gen-data":
        o["data.synthetic.rho"] = args.rho
        o["data.synthetic.n_samples"] = args.n_samples
        o["data.synthetic.seed"] = args.seed
    elif args.command == "train":
        o["train.seed"] = args.seed
        o["train.epochs"] = args.epochs
        o["train.lambda_red"] = args.lambda_red
        o["train.model.transmitted_dim"] = args.transmitted_dim
        o["train.channel.family"] = args.channel
        if args.no_grl:
            o["train.alpha_max"] = 0.0
        if args.noiseless_train:
            o["train.channel.snr_db"] = math.inf
    elif args.command in ("eval", "sweep"):
        o["eval.seeds"] = parse_list(args.seeds, int)
        if args.seed is not None and args.seeds is None:
            o["eval.seeds"] = [args.seed]
        o["eval.split"] = args.split
        o["eval.workers"] = args.workers
        if args.no_mi:
            o["eval.with_mi"] = False
        if args.no_equalize:
            o["eval.equalize"] = False
        if args.command == "sweep":
            o["eval.families"] = parse_list(args.families)
    return o


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(join_signed_values(sys.argv[1:] if argv is None else list(argv)))

    try:
        overrides = collect_overrides(args)
        cfg = load_config(args.config or "config.yaml", overrides, required=args.config is not None)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    # Set logging level for should_log()
    os.environ[LOG_LEVEL_ENV] = cfg.logging.level

    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "selftest": cmd_selftest,
    }
    try:
        return commands[args.command](args, cfg)
    except (ConfigError, ValidationError, CheckpointError, FeatureFileError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteLossError, NonFiniteError, OSError) as e:
        print(f"aborted: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
