"""Finite-difference and Monte-Carlo checks of every gradient in the package.

Three families of checks, each producing named :class:`CheckResult` rows:

* ``op:<name>``    -- tape gradients of smooth ops against central differences
* ``rule:<name>``  -- spike-encoder gradient rules against the derivative of
  their relaxed forward, and ``mc:<name>`` sampling-mean checks
* ``model:<param>`` -- full-model parameter gradients of a small relaxed model

``perturbed(name)`` corrupts one op backward or gradient rule so the harness
can be shown to catch it.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import neurons
from . import tensorcore as tc
from .model import Instrument, ModelConfig, SpikingTransformer, spike_matmul
from .neurons import CounterRNG, NeuronConfig, SpikeCode

OP_TOL = 1e-4
MODEL_TOL = 1e-3
MC_N = 100_000
MC_TOL = 0.013
MC_GRID = np.round(np.arange(-0.9, 0.9 + 1e-9, 0.1), 10)
_PERTURB = 1.5


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:28s} err={self.error:.3e}  tol={self.tolerance:.0e}{extra}"


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# ------------------------------------------------------------------- perturb

RULES = {
    "lif_surrogate": lambda m: neurons.GRAD_RULES["lif_surrogate"](m, NeuronConfig("lif_surrogate"), 1.0),
    "lif_ste": lambda m: neurons.GRAD_RULES["lif_ste"](m, NeuronConfig("lif_ste"), 1.0),
    "elastic_bi": lambda m: neurons.GRAD_RULES["elastic_bi"](m, NeuronConfig("elastic_bi"), 0.7),
    "bi_spike": lambda m: _BI_SPIKE_GRAD[0](m),
}
_BI_SPIKE_GRAD = [neurons.bi_spike_grad]
# relaxed forwards whose derivative each rule must equal (away from kinks)
_RELAXED = {
    "lif_surrogate": lambda m: neurons.surrogate_forward_arctan(m, 1.0, 2.0),
    "lif_ste": lambda m: np.clip(m, 0.0, 1.0),
    "elastic_bi": lambda m: np.clip(m, -0.7, 0.7),
    "bi_spike": lambda m: np.clip(m, -1.0, 1.0),
}
_KINKS = {"lif_surrogate": (), "lif_ste": (0.0, 1.0), "elastic_bi": (-0.7, 0.7), "bi_spike": (-1.0, 1.0)}


def perturbable() -> list[str]:
    ops = ["abs", "add", "add_bias", "clip", "cross_entropy", "custom_grad", "embedding", "exp",
           "layer_norm", "matmul", "mean", "mul", "reshape", "scale", "softmax", "spike_matmul",
           "square", "sub", "sum", "transpose"]
    return ops + list(RULES)


@contextlib.contextmanager
def perturbed(name: str | None):
    """Scale one op's backward (or one gradient rule) by 1.5 for the duration."""
    if name is None:
        yield
        return
    if name not in perturbable():
        raise ValueError(f"cannot perturb {name!r}; choose from {perturbable()}")
    if name in neurons.GRAD_RULES:
        orig = neurons.GRAD_RULES[name]
        neurons.GRAD_RULES[name] = lambda m, cfg, alpha: _PERTURB * orig(m, cfg, alpha)
        try:
            yield
        finally:
            neurons.GRAD_RULES[name] = orig
        return
    if name == "bi_spike":
        orig = _BI_SPIKE_GRAD[0]
        _BI_SPIKE_GRAD[0] = lambda m: _PERTURB * orig(m)
        try:
            yield
        finally:
            _BI_SPIKE_GRAD[0] = orig
        return
    orig_record = tc.record

    def record(op, value, inputs, backward):
        if op == name:
            inner = backward

            def backward(g):
                return tuple(None if x is None else _PERTURB * x for x in inner(g))
        return orig_record(op, value, inputs, backward)

    tc.record = record
    try:
        yield
    finally:
        tc.record = orig_record


# ----------------------------------------------------------------- smooth ops

def _away(rng, shape, points, gap=0.05):
    x = rng.uniform(-2.0, 2.0, size=shape)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] += np.where(x[close] >= p, gap, -gap)
    return x


def _op_cases(rng):
    """name -> (function of input Tensors returning a Tensor, input arrays)."""
    ids = rng.integers(0, 7, size=(3, 4))
    targets = rng.integers(0, 5, size=6)
    codes = rng.integers(-1, 2, size=(4, 6)).astype(np.int8)
    return {
        "matmul": (lambda a, b: tc.matmul(a, b), [rng.uniform(-2, 2, size=(4, 5)), rng.uniform(-2, 2, size=(5, 3))]),
        "matmul_batched": (lambda a, b: tc.matmul(a, b), [rng.uniform(-2, 2, size=(2, 4, 5)), rng.uniform(-2, 2, size=(2, 5, 3))]),
        "add": (lambda a, b: tc.add(a, b), [rng.uniform(-2, 2, size=(3, 4)), rng.uniform(-2, 2, size=(3, 4))]),
        "sub": (lambda a, b: tc.sub(a, b), [rng.uniform(-2, 2, size=(3, 4)), rng.uniform(-2, 2, size=(3, 4))]),
        "mul": (lambda a, b: tc.mul(a, b), [rng.uniform(-2, 2, size=(3, 4)), rng.uniform(-2, 2, size=(3, 4))]),
        "scale": (lambda a: tc.scale(a, -1.7), [rng.uniform(-2, 2, size=(3, 4))]),
        "square": (lambda a: tc.square(a), [rng.uniform(-2, 2, size=(3, 4))]),
        "exp": (lambda a: tc.exp(a), [rng.uniform(-2, 2, size=(3, 4))]),
        "abs": (lambda a: tc.tabs(a), [_away(rng, (3, 4), [0.0])]),
        "clip": (lambda a: tc.clip(a, -0.5, 0.8), [_away(rng, (3, 4), [-0.5, 0.8])]),
        "sum": (lambda a: tc.tsum(a, axis=0), [rng.uniform(-2, 2, size=(3, 4))]),
        "mean": (lambda a: tc.mean(a, axis=1), [rng.uniform(-2, 2, size=(3, 4))]),
        "add_bias": (lambda a, b: tc.add_bias(a, b), [rng.uniform(-2, 2, size=(3, 4)), rng.uniform(-2, 2, size=4)]),
        "reshape": (lambda a: tc.reshape(a, (4, 3)), [rng.uniform(-2, 2, size=(3, 4))]),
        "transpose": (lambda a: tc.transpose(a, (2, 0, 1)), [rng.uniform(-2, 2, size=(2, 3, 4))]),
        "embedding": (lambda w: tc.embedding(w, ids), [rng.uniform(-2, 2, size=(7, 5))]),
        "softmax": (lambda a: tc.softmax(a), [rng.uniform(-2, 2, size=(3, 5))]),
        "layer_norm": (lambda a, g, b: tc.layer_norm(a, g, b),
                       [rng.uniform(-2, 2, size=(3, 6)), rng.normal(1.0, 0.3, size=6), rng.uniform(-2, 2, size=6)]),
        "cross_entropy": (lambda a: tc.cross_entropy(a, targets), [rng.uniform(-2, 2, size=(6, 5))]),
        "spike_matmul": (lambda w: spike_matmul(SpikeCode(codes, 0.6), w)[0], [rng.uniform(-2, 2, size=(6, 3))]),
        # custom_grad is only as good as the Jacobian handed to it; check the plumbing
        "custom_grad": (lambda a: tc.custom_grad(a, np.sin(a.data), np.cos(a.data)), [rng.uniform(-2, 2, size=(3, 4))]),
    }


def _check_op(name, fn, arrays, rng, h=1e-3) -> CheckResult:
    with tc.default_dtype(np.float64):
        probe = None

        def loss(*ts):
            nonlocal probe
            out = fn(*ts)
            if probe is None:
                probe = rng.normal(size=out.shape)
            return tc.tsum(tc.mul(out, tc.tensor(probe)))

        leaves = [tc.parameter(a.copy()) for a in arrays]
        with tc.Tape() as tape:
            L = loss(*leaves)
        grads = tape.backward(L)
        analytic = [grads.get(t, np.zeros(t.shape)) for t in leaves]
        work = [a.copy() for a in arrays]
        numeric = tc.central_difference(lambda: loss(*[tc.tensor(a) for a in work]).data, work, h)
    err = max(rel_error(g, n) for g, n in zip(analytic, numeric))
    return CheckResult(f"op:{name}", err, OP_TOL)


def check_ops(rng) -> list[CheckResult]:
    return [_check_op(name, fn, arrays, rng) for name, (fn, arrays) in _op_cases(rng).items()]


# ------------------------------------------------------------- encoder rules

def check_rules(rng, h=1e-6) -> list[CheckResult]:
    """Each gradient rule equals the derivative of its relaxed forward off the kinks."""
    out = []
    for name, rule in RULES.items():
        m = _away(rng, 400, _KINKS[name], gap=1e-3)
        fd = (_RELAXED[name](m + h) - _RELAXED[name](m - h)) / (2 * h)
        out.append(CheckResult(f"rule:{name}", rel_error(rule(m), fd), OP_TOL))
    return out


def check_monte_carlo(seed: int, n: int = MC_N) -> list[CheckResult]:
    """Sample means of the stochastic encoders match their expectations (4-sigma bound)."""
    bound = MC_TOL if n == MC_N else 4 * math.sqrt(0.25 / n)
    rng = CounterRNG(seed)
    m = np.repeat(MC_GRID[:, None], n, axis=1)
    sp, _ = neurons.bi_spike_sample(m, rng, layer=0, timestep=0)
    dev_bi = float(np.max(np.abs(sp.codes.mean(axis=1) - np.clip(MC_GRID, -1, 1))))
    grid01 = np.round(np.arange(0.05, 1.0, 0.1), 10)
    m01 = np.repeat(grid01[:, None], n, axis=1)
    sb = neurons.binary_spike_sample(m01, rng, layer=1, timestep=0)
    dev_bin = float(np.max(np.abs(sb.codes.mean(axis=1) - grid01)))
    return [CheckResult("mc:bi_spike", dev_bi, bound, f"N={n}"),
            CheckResult("mc:binary_spike", dev_bin, bound, f"N={n}")]


# --------------------------------------------------------------- full model

def small_model_config(mode: str = "elastic_bi", seed: int = 0) -> ModelConfig:
    return ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, T=2, vocab=11, n_classes=3,
                       max_len=8, linear_mode=mode, kv_mode=mode, init_std=None, relaxed=True, seed=seed)


class _CodeLog(Instrument):
    """Instrument that also keeps every spike code pattern of a pass."""

    def __init__(self):
        super().__init__()
        self.codes = []

    def spike(self, site, t, spike, m, alpha):
        self.codes.append(spike.codes.tobytes())


def check_model(seed: int, mode: str = "elastic_bi", per_param: int = 6, h=1e-6) -> list[CheckResult]:
    """Parameter gradients of a relaxed float64 model against central differences.

    The relaxed forward replaces each hard spike by the smooth function whose
    derivative the spike's gradient rule is.  An entry whose +/-h perturbation
    flips any spike code straddles a clip kink, so it is skipped and another
    entry is drawn; elsewhere the tape gradient is the exact derivative.
    """
    rng = np.random.default_rng(seed)
    cfg = small_model_config(mode, seed)
    model = SpikingTransformer(cfg).astype(np.float64)
    tokens = rng.integers(0, cfg.vocab, size=(3, 6))
    targets = rng.integers(0, cfg.n_classes, size=3)
    out = []
    with tc.default_dtype(np.float64):
        model(tokens, calibrate=model.needs_calibration())
        with tc.Tape() as tape:
            L = tc.cross_entropy(model(tokens), targets)
        grads = tape.backward(L)

        def f():
            log = _CodeLog()
            loss = float(tc.cross_entropy(model(tokens, log), targets).data)
            return loss, log.codes

        _, base_codes = f()
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            gflat = grads.get(p, np.zeros(p.shape)).reshape(-1)
            g, fd, skipped = [], [], 0
            for i in rng.permutation(flat.size):
                if len(g) == per_param:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp, cp = f()
                flat[i] = orig - h
                fm, cm = f()
                flat[i] = orig
                if cp != base_codes or cm != base_codes:
                    skipped += 1
                    continue
                g.append(gflat[i])
                fd.append((fp - fm) / (2 * h))
            detail = f"{len(g)} entries" + (f", {skipped} at breakpoints skipped" if skipped else "")
            out.append(CheckResult(f"model:{mode}:{name}", rel_error(np.array(g), np.array(fd)),
                                   MODEL_TOL, detail))
    return out


def run_gradcheck(seed: int = 0, perturb: str | None = None, mc_n: int = MC_N) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    with perturbed(perturb):
        results = check_ops(rng)
        results += check_rules(rng)
        results += check_monte_carlo(seed, mc_n)
        for mode in ("elastic_bi", "lif_surrogate"):
            results += check_model(seed, mode)
    return results
