"""Command-line entry point: ``train``, ``analyze`` and ``gradcheck``.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration error,
3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis
from .calibration import AlphaTable, CalibrationError
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ANALYSIS_KINDS, ConfigError, check_dataset_fields, load_run_config
from .gradcheck import perturbable, run_gradcheck
from .model import SpikingTransformer
from .train import DivergenceError, train_loop

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

METRICS_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
THREADS_ENV = "BISPIKE_NUM_THREADS"

class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ------------------------------------------------------------------ metrics

def metrics_columns(model: SpikingTransformer) -> list[str]:
    return (["step", "lr", "train_loss", "val_loss", "val_metric", "mean_firing_rate"]
            + [f"r_{s}" for s in model.sites])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def format_metrics_row(row: dict, columns: list[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def metrics_header(columns: list[str]) -> str:
    return f"# schema_version={METRICS_SCHEMA_VERSION}\n" + ",".join(columns) + "\n"


def read_metrics(path) -> list[dict]:
    """Rows of a metrics file as dicts of floats (``step`` as int)."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in rec.items()})
    return rows


def _metrics_prefix(path: Path, columns: list[str], upto_step: int) -> str:
    """Existing metrics text up to and including ``upto_step`` (for resumed runs)."""
    text = metrics_header(columns)
    if not path.exists():
        return text
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != columns:
        raise ConfigError("io.metrics", f"existing {path} has different columns; cannot resume into it")
    for rec in reader:
        if int(rec[0]) <= upto_step:
            text += ",".join(rec) + "\n"
    return text


# --------------------------------------------------------------------- train

def _write_json(path, doc) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def cmd_train(config_path, out_dir, resume_path=None) -> int:
    try:
        cfg = load_run_config(config_path)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read config: {exc}")
    try:
        dataset = cfg.train.dataset()
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read training data: {exc}")
    except ValueError as exc:
        return _fail(EXIT_CONFIG, f"config train: {exc}")
    try:
        check_dataset_fields(cfg, dataset.vocab, dataset.n_classes)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config {exc}")

    resume = None
    if resume_path is not None:
        try:
            ck = checkpoint_load(resume_path)
        except (OSError, CheckpointError) as exc:
            return _fail(EXIT_IO, f"cannot load checkpoint: {exc}")
        if ck.model.config != cfg.train.model_config(dataset):
            return _fail(EXIT_CONFIG, "config model: does not match the checkpoint being resumed")
        resume = ck.train_state()

    out = Path(out_dir)
    ck_path = out / cfg.io.checkpoint
    metrics_path = out / cfg.io.metrics
    probe = SpikingTransformer(cfg.train.model_config(dataset)) if resume is None else resume.model
    columns = metrics_columns(probe)
    try:
        prefix = _metrics_prefix(metrics_path, columns, resume.step if resume else -1)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read existing metrics: {exc}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot create output dir: {exc}")

    try:
        with open(metrics_path, "w", newline="") as mf:
            mf.write(prefix)
            mf.flush()

            def on_row(row, state):
                mf.write(format_metrics_row(row, columns))
                mf.flush()
                if cfg.io.checkpoint_every_eval:
                    checkpoint_save(ck_path, state.model, state.opt, state.step, run_config=cfg.raw)
                if cfg.io.keep_checkpoints:
                    checkpoint_save(out / cfg.io.stamped(state.step), state.model, state.opt, state.step,
                                    run_config=cfg.raw)

            try:
                result = train_loop(cfg.train, resume=resume, dataset=dataset, on_row=on_row)
            except DivergenceError as exc:
                good = exc.last_good
                checkpoint_save(ck_path, good.model, good.opt, good.step, run_config=cfg.raw)
                return _fail(EXIT_DIVERGED, f"{exc}; last good state (step {good.step}) saved to {ck_path}")
        st = result.state
        checkpoint_save(ck_path, st.model, st.opt, st.step, run_config=cfg.raw)
        if result.calibration:
            fs = result.calibration["firing"]
            _write_json(out / "calibration.json", {
                "schema_version": REPORT_SCHEMA_VERSION,
                "mean_firing_rate": result.calibration["mean_firing_rate"],
                "val_mean_firing_rate": result.calibration["val_mean_firing_rate"],
                "alpha": {f"{s}/{t}": a for (s, t), a in st.model.alpha.items()},
                "table": fs.table(),
            })
        for kind in cfg.analysis.kinds:
            tokens = dataset.val_x[:cfg.analysis.sample_size]
            _write_json(out / f"{kind}.json", _report(kind, st.model, tokens, cfg.analysis.relu_p, cfg.analysis.k,
                                                      str(ck_path)))
    except CalibrationError as exc:
        return _fail(EXIT_CONFIG, f"calibration failed: {exc}")
    except (OSError, CheckpointError) as exc:
        return _fail(EXIT_IO, str(exc))
    print(f"trained {st.step} steps; metrics -> {metrics_path}; checkpoint -> {ck_path}")
    return EXIT_OK


# ------------------------------------------------------------------- analyze

def load_samples(path, model: SpikingTransformer, seq_len: int, limit: int) -> np.ndarray:
    """Token sample from a ``.npy`` integer array or a raw byte corpus."""
    p = Path(path)
    if p.suffix == ".npy":
        x = np.load(p, allow_pickle=False)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.dtype.kind not in "iu":
            raise UsageError(f"{path}: expected a 2-D integer token array, got {x.dtype} {x.shape}")
    else:
        raw = np.frombuffer(p.read_bytes(), dtype=np.uint8).astype(np.int64)
        n = raw.size // seq_len
        if n == 0:
            raise UsageError(f"{path}: fewer than {seq_len} bytes")
        x = raw[:n * seq_len].reshape(n, seq_len)
    x = x[:limit]
    if x.size == 0:
        raise UsageError(f"{path}: no samples")
    if x.min() < 0 or x.max() >= model.config.vocab:
        raise UsageError(f"{path}: tokens outside the model vocabulary of {model.config.vocab}")
    if x.shape[1] > model.config.max_len:
        raise UsageError(f"{path}: sequence length {x.shape[1]} exceeds max_len {model.config.max_len}")
    return x


def _report(kind: str, model: SpikingTransformer, tokens, relu_p: float, k, ckpt: str) -> dict:
    if k is not None:
        model = SpikingTransformer(replace(model.config, k=float(k)), model.params, AlphaTable())
    if kind == "firing":
        body = analysis.firing_report(model, tokens)
    elif kind == "isometry":
        body = analysis.isometry_report(model, tokens, relu_p).to_dict()
    elif kind == "energy":
        body = analysis.model_energy_report(model, tokens).to_dict()
    else:
        raise UsageError(f"unknown analysis kind {kind!r}")
    return {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, "checkpoint": ckpt,
            "k": model.config.k, "n_samples": int(len(tokens)), "T": model.config.T, "report": body}


def cmd_analyze(kind, ckpt_path, data_path, out_path, k=None) -> int:
    try:
        ck = checkpoint_load(ckpt_path)
    except (OSError, CheckpointError) as exc:
        return _fail(EXIT_IO, f"cannot load checkpoint: {exc}")
    if data_path is None:
        return _fail(EXIT_CONFIG, f"analyze --kind {kind} needs --data with token samples")
    if k is not None and not k > 0:
        return _fail(EXIT_CONFIG, f"--k must be positive, got {k}")
    run = ck.run_config or {}
    seq_len = run.get("train", {}).get("seq_len", 16)
    sample_size = run.get("analysis", {}).get("sample_size", 64)
    relu_p = run.get("analysis", {}).get("relu_p", 0.5)
    try:
        tokens = load_samples(data_path, ck.model, seq_len, sample_size)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read data: {exc}")
    except (UsageError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        doc = _report(kind, ck.model, tokens, relu_p, k, str(ckpt_path))
    except CalibrationError as exc:
        return _fail(EXIT_CONFIG, f"calibration failed on the sample: {exc}")
    try:
        _write_json(out_path, doc)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write report: {exc}")
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck

def cmd_gradcheck(seed: int = 0, perturb: str | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    if perturb is not None and perturb not in perturbable():
        return _fail(EXIT_CONFIG, f"--perturb must be one of {perturbable()}")
    results = run_gradcheck(seed, perturb)
    for r in results:
        print(r.line(), file=stream)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=stream)
    if failed:
        print("failed: " + ", ".join(failed), file=stream)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bispike", description="Elastic bi-spiking transformer toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")

    a = sub.add_parser("analyze", help="firing, isometry or energy report from a checkpoint")
    a.add_argument("--kind", required=True, choices=ANALYSIS_KINDS)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", help=".npy token array or raw byte corpus")
    a.add_argument("--k", type=float, help="recalibrate alpha on the sample with this k")
    a.add_argument("--out", required=True, help="report JSON path")

    g = sub.add_parser("gradcheck", help="finite-difference and Monte-Carlo gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--perturb", help="test hook: corrupt one op or gradient rule")
    return ap


def _thread_limit():
    """BLAS thread cap from the environment; a no-op context when unset."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {n}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
    except UsageError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    with limit:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.resume)
        if args.command == "analyze":
            return cmd_analyze(args.kind, args.ckpt, args.data, args.out, args.k)
        return cmd_gradcheck(args.seed, args.perturb)


if __name__ == "__main__":
    sys.exit(main())
