"""Flat little-endian binary checkpoints.

Layout::

    b"SPLM" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | rank x u32 dims | float32 values

Every value is stored as a little-endian float32, so parameters, moments and
alpha (all float32 quantities) round-trip bit-exactly.  Integers are stored
as exact float32 values and text as one byte per float.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensorcore as tc
from .calibration import AlphaTable
from .model import ModelConfig, SpikingTransformer
from .train import OptimState, TrainState

MAGIC = b"SPLM"
VERSION = 1
_MAX_EXACT_INT = 2 ** 24
_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


# ------------------------------------------------------------------ entries

def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; the file appears only once fully written."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"entry {name!r} has dtype {arr.dtype}; checkpoints hold float32 only")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    rd = _Reader(buf)
    rd.take(4, "magic")
    version = rd.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    count = rd.u32("entry count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name = rd.take(rd.u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        rank = rd.u32(f"{name} rank")
        dims = tuple(rd.u32(f"{name} dims") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(rd.take(4 * n, f"{name} values"), dtype=_F32)
        out[name] = data.astype(np.float32).reshape(dims)
    if rd.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - rd.pos} trailing bytes after {count} entries")
    return out


def _scalar(x) -> np.ndarray:
    return np.array(x, dtype=np.float32).reshape(())


def _int_entry(x: int) -> np.ndarray:
    if not 0 <= x < _MAX_EXACT_INT:
        raise CheckpointError(f"integer {x} not exactly representable as float32")
    return _scalar(x)


def _text_entry(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _entry_text(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode("utf-8")


# --------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model: SpikingTransformer
    opt: OptimState | None
    step: int
    rng_counter: int
    run_config: dict | None = None

    def train_state(self) -> TrainState:
        opt = self.opt if self.opt is not None else OptimState.zeros_like(self.model.params)
        return TrainState(self.model, opt, self.step)


def checkpoint_save(path, model: SpikingTransformer, opt: OptimState | None = None, step: int = 0,
                    rng_counter: int | None = None, run_config: dict | None = None) -> None:
    """Save parameters, alpha, optimizer moments and counters.

    Batches are drawn from a counter-based generator keyed by the step, so
    the RNG counter defaults to ``step``.
    """
    e: dict[str, np.ndarray] = {
        "meta/model_config": _text_entry(json.dumps(model.config.to_dict(), sort_keys=True)),
        "meta/step": _int_entry(step),
        "meta/rng_counter": _int_entry(step if rng_counter is None else rng_counter),
        "meta/alpha_frozen": _scalar(1.0 if model.alpha.frozen else 0.0),
    }
    if run_config is not None:
        e["meta/run_config"] = _text_entry(json.dumps(run_config, sort_keys=True))
    for name, p in model.params.items():
        e[f"param/{name}"] = p.data
    for (site, t), a in model.alpha.items():
        if float(np.float32(a)) != a:
            raise CheckpointError(f"alpha for {(site, t)} is not a float32 value")
        e[f"alpha/{site}/{t}"] = _scalar(a)
    if opt is not None:
        e["meta/opt_step"] = _int_entry(opt.step)
        for name in model.params:
            e[f"adam_m/{name}"] = opt.m[name]
            e[f"adam_v/{name}"] = opt.v[name]
    write_entries(path, e)


def _model_config(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"checkpoint model config has unknown fields {sorted(unknown)}")
    return ModelConfig(**d)


def checkpoint_load(path) -> Checkpoint:
    e = read_entries(path)
    try:
        config = _model_config(json.loads(_entry_text(e["meta/model_config"])))
        step = int(e["meta/step"])
        rng_counter = int(e["meta/rng_counter"])
        frozen = bool(e["meta/alpha_frozen"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    params = {k[len("param/"):]: tc.parameter(v.copy(), dtype=np.float32, name=k[len("param/"):])
              for k, v in e.items() if k.startswith("param/")}
    alpha = AlphaTable()
    for k, v in e.items():
        if k.startswith("alpha/"):
            site, t = k[len("alpha/"):].rsplit("/", 1)
            alpha[(site, int(t))] = float(v)
    if frozen:
        alpha.freeze()
    model = SpikingTransformer(config, params, alpha)
    missing = set(SpikingTransformer(config).params) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    opt = None
    if "meta/opt_step" in e:
        opt = OptimState({n: e[f"adam_m/{n}"].copy() for n in params},
                         {n: e[f"adam_v/{n}"].copy() for n in params}, int(e["meta/opt_step"]))
    run_config = json.loads(_entry_text(e["meta/run_config"])) if "meta/run_config" in e else None
    return Checkpoint(model, opt, step, rng_counter, run_config)
