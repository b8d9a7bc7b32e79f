"""Toy tasks, AdamW with a linear schedule, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .calibration import FiringStats
from .model import Instrument, ModelConfig, SpikingTransformer

log = logging.getLogger(__name__)

TASKS = ("synth_cls", "char_lm")
ENCODER_MODES = ("elastic_bi", "bi_ste", "lif_ste", "lif_surrogate")
SYNTH_ALPHABET = 16


class DivergenceError(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    ``last_good`` holds the training state from the last completed evaluation.
    """

    def __init__(self, msg, last_good=None, rows=None):
        super().__init__(msg)
        self.last_good = last_good
        self.rows = rows or []


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    kind: str
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    vocab: int
    n_classes: int | None


def synth_labels(x: np.ndarray) -> np.ndarray:
    """1 when strictly more than half of the symbols in a row are odd."""
    return ((x % 2).sum(axis=1) * 2 > x.shape[1]).astype(np.int64)


def make_task(task: str, seed: int, seq_len: int = 16, n_train: int = 4096, n_val: int = 512,
              text_path: str | Path | None = None) -> Dataset:
    if task == "synth_cls":
        rng = np.random.Generator(np.random.Philox(key=[int(seed), 0x5EED]))
        x = rng.integers(0, SYNTH_ALPHABET, size=(n_train + n_val, seq_len))
        y = synth_labels(x)
        return Dataset(task, x[:n_train], y[:n_train], x[n_train:], y[n_train:], SYNTH_ALPHABET, 2)
    if task == "char_lm":
        if text_path is None:
            raise ValueError("char_lm needs a text file path")
        raw = Path(text_path).read_bytes()
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        n_win = (data.size - 1) // seq_len
        if n_win < 2:
            raise ValueError(f"corpus {text_path} too small for windows of {seq_len} bytes")
        starts = np.arange(n_win) * seq_len
        idx = starts[:, None] + np.arange(seq_len)[None, :]
        x, y = data[idx], data[idx + 1]
        n_v = max(1, n_win // 10)
        return Dataset(task, x[:-n_v], y[:-n_v], x[-n_v:], y[-n_v:], 256, None)
    raise ValueError(f"unknown task {task!r}")


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic minibatch for a step, independent of any earlier steps."""
    gen = np.random.Generator(np.random.Philox(key=[int(seed), 0xBA7C0000 + int(step)]))
    return gen.choice(n, size=min(batch_size, n), replace=False)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, tc.Tensor]) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def _decays(name: str, p: tc.Tensor) -> bool:
    return p.data.ndim >= 2


def adamw_step(params: dict[str, tc.Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               decay=_decays) -> OptimState:
    """Decoupled weight-decay Adam, updating ``params`` and ``state`` in place.

    Weight decay applies to matrices only (biases and norm gains are exempt).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise tc.NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise tc.ShapeError(f"moment shape {m.shape} != parameter shape {p.shape} for {name}")
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        if wd and decay(name, p):
            p.data *= dt(1 - lr * wd)
        update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
        p.data -= dt(lr) * update
    return state


def lr_schedule(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return total


# ---------------------------------------------------------------------------
# loop


def toy_model_config(**changes) -> ModelConfig:
    """Desk-scale model used by the training presets.

    Projections use fan-in scaling rather than the 0.02 default: at d_model=64 the
    smaller init leaves first-batch membranes so small that the calibrated alpha no
    longer tracks the trained distribution.
    """
    return replace(ModelConfig(init_std=None), **changes)


@dataclass
class TrainConfig:
    task: str = "synth_cls"
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 7e-5
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: toy_model_config())
    encoder_mode: str | None = None
    eval_every: int = 100
    grad_clip: float = 1.0
    seq_len: int = 16
    n_train: int = 4096
    n_val: int = 512
    text_path: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.encoder_mode is not None and self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive")
        if self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds steps {self.steps}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")

    def model_config(self, dataset: Dataset) -> ModelConfig:
        mc = replace(self.model, vocab=dataset.vocab, n_classes=dataset.n_classes,
                     max_len=max(self.model.max_len, self.seq_len) if self.model.max_len < self.seq_len
                     else self.model.max_len)
        return apply_encoder_mode(mc, self.encoder_mode)

    def dataset(self) -> Dataset:
        return make_task(self.task, self.seed, self.seq_len, self.n_train, self.n_val, self.text_path)


def apply_encoder_mode(mc: ModelConfig, mode: str | None) -> ModelConfig:
    """Map an ablation arm name onto neuron modes for every site."""
    if mode is None:
        return mc
    if mode == "elastic_bi":
        return replace(mc, linear_mode="elastic_bi", kv_mode="elastic_bi", calibrate=True)
    if mode == "bi_ste":
        return replace(mc, linear_mode="elastic_bi", kv_mode="elastic_bi", calibrate=False)
    if mode in ("lif_ste", "lif_surrogate"):
        return replace(mc, linear_mode=mode, kv_mode=mode)
    raise ValueError(f"unknown encoder mode {mode!r}")


@dataclass
class TrainState:
    model: SpikingTransformer
    opt: OptimState
    step: int = 0

    def snapshot(self) -> "TrainState":
        return TrainState(self.model.copy(),
                          OptimState({k: v.copy() for k, v in self.opt.m.items()},
                                     {k: v.copy() for k, v in self.opt.v.items()}, self.opt.step),
                          self.step)


@dataclass
class TrainResult:
    state: TrainState
    rows: list[dict]
    calibration: dict
    dataset: Dataset

    @property
    def model(self) -> SpikingTransformer:
        return self.state.model


def _loss(model: SpikingTransformer, x: np.ndarray, y: np.ndarray, instrument=None) -> tc.Tensor:
    logits = model(x, instrument)
    return tc.cross_entropy(logits, y)


def evaluate(model: SpikingTransformer, dataset: Dataset, split: str = "val", batch_size: int = 256) -> dict:
    """Loss, accuracy and firing statistics; parameters are not touched."""
    x = dataset.val_x if split == "val" else dataset.train_x
    y = dataset.val_y if split == "val" else dataset.train_y
    if len(x) == 0:
        raise ValueError(f"{split} split is empty")
    if model.config.vocab != dataset.vocab:
        raise ValueError(f"model vocab {model.config.vocab} != dataset vocab {dataset.vocab}")
    inst = Instrument()
    total_loss = 0.0
    correct = 0
    count = 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits = model(xb, inst)
        n = yb.size
        total_loss += float(tc.cross_entropy(logits, yb).data) * n
        pred = logits.data.argmax(axis=-1)
        correct += int((pred == yb).sum())
        count += n
    return {"loss": total_loss / count, "accuracy": correct / count, "firing": inst.firing}


def init_state(config: TrainConfig, dataset: Dataset) -> tuple[TrainState, dict]:
    """Fresh model, alpha calibration on the first training batch, zero moments."""
    model = SpikingTransformer(config.model_config(dataset))
    idx = batch_indices(len(dataset.train_x), config.batch_size, config.seed, 0)
    inst = Instrument()
    model(dataset.train_x[idx], inst, calibrate=True)
    model.alpha.freeze()
    calib = {
        "firing": inst.firing,
        "mean_firing_rate": inst.firing.mean_rate(),
        "val_mean_firing_rate": evaluate(model, dataset)["firing"].mean_rate(),
    }
    return TrainState(model, OptimState.zeros_like(model.params), 0), calib


def train_loop(config: TrainConfig, resume: TrainState | None = None, dataset: Dataset | None = None,
               on_row=None) -> TrainResult:
    """Optimise cross-entropy; log one row every ``eval_every`` steps.

    Passing ``resume`` continues from a saved state and reproduces the rows an
    unbroken run would have produced from that step onward.
    """
    dataset = dataset or config.dataset()
    if resume is None:
        state, calib = init_state(config, dataset)
    else:
        state, calib = resume, {}
    model = state.model
    params = model.params
    names = {id(p): k for k, p in params.items()}
    rows: list[dict] = []
    last_good = state.snapshot()
    window = []
    n_train = len(dataset.train_x)

    while state.step < config.steps:
        s = state.step
        idx = batch_indices(n_train, config.batch_size, config.seed, s)
        xb, yb = dataset.train_x[idx], dataset.train_y[idx]
        lr = lr_schedule(s + 1, config.peak_lr, config.warmup_steps, config.steps)
        try:
            with tc.Tape() as tape:
                loss = _loss(model, xb, yb)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise tc.NonFiniteError("loss is not finite")
            leaf_grads = tape.backward(loss)
            grads = {names[id(t)]: g for t, g in leaf_grads.items()}
            for p in params.values():
                p.grad = None
            clip_grad_norm(grads, config.grad_clip)
            adamw_step(params, grads, state.opt, lr, config.weight_decay)
        except tc.NonFiniteError as exc:
            raise DivergenceError(f"training diverged at step {s + 1}: {exc}", last_good, rows) from exc
        state.step = s + 1
        window.append(lval)
        if state.step % config.eval_every == 0:
            ev = evaluate(model, dataset)
            row = {
                "step": state.step,
                "lr": lr,
                "train_loss": float(np.mean(window)),
                "val_loss": ev["loss"],
                "val_metric": ev["accuracy"],
                "mean_firing_rate": ev["firing"].mean_rate(),
            }
            for site in ev["firing"].sites():
                row[f"r_{site}"] = ev["firing"].site_rate(site)
            rows.append(row)
            window = []
            last_good = state.snapshot()
            log.info("step %d loss %.4f val %.4f acc %.4f r %.3f", state.step, row["train_loss"],
                     row["val_loss"], row["val_metric"], row["mean_firing_rate"])
            if on_row is not None:
                on_row(row, state)
    return TrainResult(state, rows, calib, dataset)
