"""Toy spike-driven transformer encoder.

Every product except the query projection and the output head consumes a
spike operand and is evaluated by :func:`spike_accumulate`, which only adds
or subtracts rows of the real-valued operand.

Spiking sites per block (``block{i}.<site>``):

* ``attn_in``  - encodes the normalised input before the key/value projections
* ``k``, ``v`` - encode keys and values (memoryless, beta = 0)
* ``attn_out`` - encodes the attention context before the output projection
* ``ff_in``    - encodes the normalised input before the first FF linear
* ``ff_hidden`` - encodes the FF hidden layer before the second FF linear
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .calibration import AlphaTable, FiringStats, calibrate_alpha
from .neurons import NeuronConfig, NeuronState, SpikeCode, fire, lif_charge, reset_after_fire
from .tensorcore import Tensor

SITE_KINDS = ("attn_in", "k", "v", "attn_out", "ff_in", "ff_hidden")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    T: int = 1
    vocab: int = 16
    n_classes: int | None = 2
    max_len: int = 128
    linear_mode: str = "elastic_bi"
    kv_mode: str = "elastic_bi"
    k: float = 2.0
    calibrate: bool = True
    beta_linear: float = 0.25
    beta_kv: float = 0.0
    theta: float = 1.0
    sg_alpha: float = 2.0
    v_reset: float = 0.0
    reset_rule: str = "literal"
    init_std: float | None = 0.02
    relaxed: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "T", "vocab", "max_len"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_classes is not None and self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")

    def site_config(self, kind: str) -> NeuronConfig:
        kv = kind in ("k", "v")
        return NeuronConfig(
            mode=self.kv_mode if kv else self.linear_mode,
            beta=self.beta_kv if kv else self.beta_linear,
            v_reset=self.v_reset,
            theta=self.theta,
            k=self.k,
            T=self.T,
            sg_alpha=self.sg_alpha,
            reset_rule=self.reset_rule,
            relaxed=self.relaxed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# kernels


def spike_accumulate(codes: np.ndarray, amplitude: float, weight: np.ndarray) -> tuple[np.ndarray, int]:
    """``(codes * amplitude) @ weight`` using only signed row accumulation.

    ``codes`` is (R, C) with ``weight`` (C, N), or batched (B, R, C) with
    (B, C, N).  Each gathered weight row is scaled by ``amplitude`` before it
    is accumulated, so pre-scaling the weights gives bit-identical output.
    Returns the product and the number of accumulate operations.
    """
    if codes.ndim == 3:
        B, R, C = codes.shape
        if weight.ndim != 3 or weight.shape[0] != B or weight.shape[1] != C:
            raise tc.ShapeError(f"spike product: codes {codes.shape} vs weight {weight.shape}")
    elif codes.ndim == 2:
        R, C = codes.shape
        if weight.ndim != 2 or weight.shape[0] != C:
            raise tc.ShapeError(f"spike product: codes {codes.shape} vs weight {weight.shape}")
    else:
        raise tc.ShapeError(f"spike product: unsupported code rank {codes.shape}")
    N = weight.shape[-1]
    flat = codes.reshape(-1, C)
    rows, cols = np.nonzero(flat)
    w2 = weight.reshape(-1, N)
    idx = cols + (rows // R) * C if codes.ndim == 3 else cols
    gathered = w2[idx]
    if amplitude != 1.0:
        gathered *= weight.dtype.type(amplitude)
    neg = flat[rows, cols] < 0
    gathered[neg] = -gathered[neg]
    out = np.zeros((flat.shape[0], N), dtype=weight.dtype)
    if rows.size:
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        out[rows[starts]] = np.add.reduceat(gathered, starts, axis=0)
    return out.reshape(codes.shape[:-1] + (N,)), int(rows.size) * N


def spike_matmul(spike: SpikeCode, weight: Tensor) -> tuple[Tensor, int]:
    """Tape op: spike values times a real matrix.  Relaxed spikes fall back to dense."""
    val = spike.as_tensor()
    wv = weight.data
    if spike.exact:
        out, n_ac = spike_accumulate(spike.codes, spike.amplitude, wv)
    else:
        out = val.data @ wv
        n_ac = int(np.count_nonzero(spike.codes)) * wv.shape[-1]
    sv = val.data

    def backward(g):
        if wv.ndim == 2:
            return g @ wv.T, sv.T @ g
        return g @ wv.transpose(0, 2, 1), sv.transpose(0, 2, 1) @ g

    return tc.record("spike_matmul", out, (val, weight), backward), n_ac


def merge_alpha_into_weights(W, alpha: float):
    """alpha * W (same dtype), for use with unit-amplitude codes."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if isinstance(W, Tensor):
        return tc.tensor(W.data * W.dtype.type(alpha), dtype=W.dtype)
    W = np.asarray(W)
    return W * W.dtype.type(alpha)


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class OpRecord:
    name: str
    t: int
    kind: str  # "ac" or "mac"
    spike_operand: bool
    rows: int
    in_dim: int
    out_dim: int
    count: int
    nnz: int = 0


@dataclass
class Instrument:
    """Collects firing statistics, membranes and the product log of a forward pass."""

    keep_membranes: bool = False
    firing: FiringStats = field(default_factory=FiringStats)
    ops: list = field(default_factory=list)
    membranes: dict = field(default_factory=dict)

    def spike(self, site: str, t: int, spike: SpikeCode, m: Tensor, alpha: float) -> None:
        self.firing.add(site, t, spike)
        if self.keep_membranes:
            self.membranes.setdefault((site, t), []).append((np.array(m.data), alpha))

    def op(self, rec: OpRecord) -> None:
        self.ops.append(rec)


@dataclass
class _Pass:
    states: dict
    instrument: Instrument | None
    calibrate: bool


# ---------------------------------------------------------------------------
# model


class SpikingTransformer:
    """Parameters, site configs and the alpha table of a toy spiking encoder."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 alpha: AlphaTable | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.alpha = alpha if alpha is not None else AlphaTable()
        self.sites = {f"block{i}.{kind}": config.site_config(kind)
                      for i in range(config.n_layers) for kind in SITE_KINDS}
        self.merged: dict | None = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def needs_alpha(self, site: str) -> bool:
        return self.sites[site].mode == "elastic_bi" and self.config.calibrate

    def alpha_for(self, site: str, t: int) -> float:
        if not self.needs_alpha(site):
            return 1.0
        return self.alpha[(site, t)]

    def is_calibrated(self) -> bool:
        return all((s, t) in self.alpha for s in self.sites if self.needs_alpha(s)
                   for t in range(self.config.T))

    def needs_calibration(self) -> bool:
        """True for a fresh elastic model whose next forward pass should calibrate alpha."""
        return not self.alpha.frozen and not self.is_calibrated()

    def astype(self, dtype) -> "SpikingTransformer":
        params = {k: tc.parameter(v.data.astype(dtype), dtype=dtype, name=k) for k, v in self.params.items()}
        return SpikingTransformer(self.config, params, self.alpha.copy())

    def with_config(self, **changes) -> "SpikingTransformer":
        """Same parameters and alpha table under a modified config (e.g. relaxed=True)."""
        return SpikingTransformer(replace(self.config, **changes), self.params, self.alpha)

    def copy(self) -> "SpikingTransformer":
        params = {k: tc.parameter(v.data.copy(), dtype=v.dtype, name=k) for k, v in self.params.items()}
        return SpikingTransformer(self.config, params, self.alpha.copy())

    def __call__(self, tokens, instrument: Instrument | None = None, calibrate: bool = False) -> Tensor:
        return model_forward(tokens, self, instrument=instrument, calibrate=calibrate)


def init_params(config: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Normal init; ``init_std=None`` scales projections by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(config.seed)
    D, F = config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {}

    def table(*shape):
        return rng.normal(0.0, 0.02 if config.init_std is None else config.init_std, size=shape)

    def proj(*shape):
        std = 1.0 / math.sqrt(shape[0]) if config.init_std is None else config.init_std
        return rng.normal(0.0, std, size=shape)

    p["tok_emb"] = table(config.vocab, D)
    p["pos_emb"] = table(config.max_len, D)
    for i in range(config.n_layers):
        b = f"block{i}"
        p[f"{b}.ln1.g"] = np.ones(D)
        p[f"{b}.ln1.b"] = np.zeros(D)
        for name in ("q", "k", "v", "o"):
            p[f"{b}.{name}.w"] = proj(D, D)
            p[f"{b}.{name}.b"] = np.zeros(D)
        p[f"{b}.ln2.g"] = np.ones(D)
        p[f"{b}.ln2.b"] = np.zeros(D)
        p[f"{b}.ff1.w"] = proj(D, F)
        p[f"{b}.ff1.b"] = np.zeros(F)
        p[f"{b}.ff2.w"] = proj(F, D)
        p[f"{b}.ff2.b"] = np.zeros(D)
    p["ln_f.g"] = np.ones(D)
    p["ln_f.b"] = np.zeros(D)
    n_out = config.n_classes or config.vocab
    p["head.w"] = proj(D, n_out)
    p["head.b"] = np.zeros(n_out)
    return {k: tc.parameter(v, dtype=dtype, name=k) for k, v in p.items()}


def _encode(model: SpikingTransformer, site: str, x: Tensor, t: int, ctx: _Pass) -> SpikeCode:
    cfg = model.sites[site]
    state = ctx.states.setdefault(site, NeuronState())
    m = lif_charge(state, x)
    if model.needs_alpha(site):
        key = (site, t)
        if key not in model.alpha:
            if not ctx.calibrate:
                raise RuntimeError(f"no alpha for {key}; run a calibration pass first")
            # stored at float32 so checkpoints hold alpha exactly
            model.alpha[key] = float(np.float32(calibrate_alpha(m.data, cfg.k)))
        alpha = model.alpha[key]
    else:
        alpha = 1.0
    spike = fire(cfg, m, alpha)
    ctx.states[site] = NeuronState(v=reset_after_fire(cfg, m, spike, alpha, t), m=m)
    if ctx.instrument is not None:
        ctx.instrument.spike(site, t, spike, m, alpha)
    if model.merged is not None and spike.amplitude != 1.0:
        # amplitude lives in the consuming weights; the neuron state above keeps it
        unit = SpikeCode(spike.codes, 1.0, tc.scale(spike.value, 1.0 / spike.amplitude))
        unit._exact = spike.exact
        return unit
    return spike


def _weight(model: SpikingTransformer, name: str, t: int) -> Tensor:
    if model.merged is not None and (name, t) in model.merged:
        return model.merged[(name, t)]
    return model.params[name]


def spiking_linear_forward(spikes: SpikeCode, W: Tensor, bias: Tensor | None = None,
                           instrument: Instrument | None = None, name: str = "linear", t: int = 0) -> Tensor:
    """(codes * amplitude) @ W + bias by signed row accumulation."""
    if spikes.codes.ndim != 2 or spikes.shape[1] != W.shape[0]:
        raise tc.ShapeError(f"{name}: spikes {spikes.shape} do not match weight {W.shape}")
    out, n_ac = spike_matmul(spikes, W)
    if instrument is not None:
        rows, c = spikes.shape
        instrument.op(OpRecord(name, t, "ac", True, rows, c, W.shape[1], n_ac,
                               int(np.count_nonzero(spikes.codes))))
    return out if bias is None else tc.add_bias(out, bias)


def _dense_linear(x: Tensor, W: Tensor, bias: Tensor, instrument, name: str, t: int) -> Tensor:
    out = tc.add_bias(tc.matmul(x, W), bias)
    if instrument is not None:
        rows, c = x.shape
        instrument.op(OpRecord(name, t, "mac", False, rows, c, W.shape[1], rows * c * W.shape[1]))
    return out


def spiking_attention_forward(h: Tensor, model: SpikingTransformer, i: int, t: int, ctx: _Pass) -> Tensor:
    """Real queries against spike-encoded keys and values; h is (B, S, D)."""
    cfg = model.config
    B, S, D = h.shape
    H = cfg.n_heads
    dh = D // H
    blk = f"block{i}"
    inst = ctx.instrument
    p = model.params

    h2 = tc.reshape(h, (B * S, D))
    s_in = _encode(model, f"{blk}.attn_in", h2, t, ctx)
    wq, bq = _weight(model, f"{blk}.q.w", t), _weight(model, f"{blk}.q.b", t)
    q = _dense_linear(h2, wq, bq, inst, f"{blk}.q", t)
    k_pre = spiking_linear_forward(s_in, _weight(model, f"{blk}.k.w", t), p[f"{blk}.k.b"], inst, f"{blk}.k", t)
    v_pre = spiking_linear_forward(s_in, _weight(model, f"{blk}.v.w", t), p[f"{blk}.v.b"], inst, f"{blk}.v", t)
    k_sp = _encode(model, f"{blk}.k", k_pre, t, ctx)
    v_sp = _encode(model, f"{blk}.v", v_pre, t, ctx)

    def heads(x: Tensor) -> Tensor:
        return tc.reshape(tc.transpose(tc.reshape(x, (B, S, H, dh)), (0, 2, 1, 3)), (B * H, S, dh))

    qh = heads(q)
    kh = k_sp.reshape((B, S, H, dh)).transpose((0, 2, 1, 3)).reshape((B * H, S, dh))
    vh = v_sp.reshape((B, S, H, dh)).transpose((0, 2, 1, 3)).reshape((B * H, S, dh))

    # scores^T = K_spike @ Q^T, accumulated over spiking keys
    qt = tc.transpose(qh, (0, 2, 1))
    scores_t, n_ac = spike_matmul(kh, qt)
    if inst is not None:
        inst.op(OpRecord(f"{blk}.qk", t, "ac", True, B * H * S, dh, S, n_ac, int(np.count_nonzero(kh.codes))))
    scores = tc.scale(tc.transpose(scores_t, (0, 2, 1)), 1.0 / math.sqrt(dh))
    attn = tc.softmax(scores)

    # context^T = V_spike^T @ A^T
    vt = vh.transpose((0, 2, 1))
    ctx_t, n_ac = spike_matmul(vt, tc.transpose(attn, (0, 2, 1)))
    if inst is not None:
        inst.op(OpRecord(f"{blk}.av", t, "ac", True, B * H * dh, S, S, n_ac, int(np.count_nonzero(vt.codes))))
    context = tc.transpose(ctx_t, (0, 2, 1))
    if model.merged is not None:
        a_v = model.alpha_for(f"{blk}.v", t)
        if a_v != 1.0:
            context = tc.scale(context, a_v)
    context = tc.reshape(tc.transpose(tc.reshape(context, (B, H, S, dh)), (0, 2, 1, 3)), (B * S, D))

    s_o = _encode(model, f"{blk}.attn_out", context, t, ctx)
    out = spiking_linear_forward(s_o, _weight(model, f"{blk}.o.w", t), p[f"{blk}.o.b"], inst, f"{blk}.o", t)
    return tc.reshape(out, (B, S, D))


def encoder_block_forward(x: Tensor, model: SpikingTransformer, i: int, t: int, ctx: _Pass) -> Tensor:
    """Pre-norm residual block: x + Attn(LN(x)), then x + FF(LN(x))."""
    B, S, D = x.shape
    p = model.params
    blk = f"block{i}"
    inst = ctx.instrument
    h = tc.layer_norm(x, p[f"{blk}.ln1.g"], p[f"{blk}.ln1.b"])
    x = tc.add(x, spiking_attention_forward(h, model, i, t, ctx))
    h = tc.reshape(tc.layer_norm(x, p[f"{blk}.ln2.g"], p[f"{blk}.ln2.b"]), (B * S, D))
    s_f = _encode(model, f"{blk}.ff_in", h, t, ctx)
    u = spiking_linear_forward(s_f, _weight(model, f"{blk}.ff1.w", t), p[f"{blk}.ff1.b"], inst, f"{blk}.ff1", t)
    s_h = _encode(model, f"{blk}.ff_hidden", u, t, ctx)
    y = spiking_linear_forward(s_h, _weight(model, f"{blk}.ff2.w", t), p[f"{blk}.ff2.b"], inst, f"{blk}.ff2", t)
    return tc.add(x, tc.reshape(y, (B, S, D)))


def model_forward(tokens, model: SpikingTransformer, instrument: Instrument | None = None,
                  calibrate: bool = False) -> Tensor:
    """Logits of shape (B, n_classes) for classification or (B, S, vocab) for LM.

    ``calibrate=True`` fills missing alpha entries from this pass, in forward
    order, and freezes the table afterwards.
    """
    cfg = model.config
    tokens = np.atleast_2d(np.asarray(tokens))
    B, S = tokens.shape
    if S > cfg.max_len:
        raise ValueError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token index outside vocabulary of size {cfg.vocab}")
    if calibrate and model.alpha.frozen:
        raise RuntimeError("alpha table already frozen")
    p = model.params
    pos = np.broadcast_to(np.arange(S), (B, S))
    emb = tc.add(tc.embedding(p["tok_emb"], tokens), tc.embedding(p["pos_emb"], pos))
    ctx = _Pass(states={}, instrument=instrument, calibrate=calibrate)

    finals = []
    for t in range(cfg.T):
        x = emb
        for i in range(cfg.n_layers):
            x = encoder_block_forward(x, model, i, t, ctx)
        finals.append(x)
    h = finals[0]
    for x in finals[1:]:
        h = tc.add(h, x)
    if cfg.T > 1:
        h = tc.scale(h, 1.0 / cfg.T)
    if calibrate:
        model.alpha.freeze()

    h = tc.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
    D = cfg.d_model
    if cfg.n_classes is not None:
        pooled = tc.mean(h, axis=1)
        logits = _dense_linear(pooled, p["head.w"], p["head.b"], instrument, "head", -1)
        return logits
    logits = _dense_linear(tc.reshape(h, (B * S, D)), p["head.w"], p["head.b"], instrument, "head", -1)
    return tc.reshape(logits, (B, S, cfg.vocab))


def merged_model(model: SpikingTransformer) -> SpikingTransformer:
    """Copy of ``model`` with spike amplitudes folded into the consuming weights.

    Linear-site amplitudes scale the weight they feed (one copy per timestep);
    the key amplitude scales the query projection; the value amplitude
    reweights the attention context after the unit-amplitude product.
    """
    if not model.is_calibrated():
        raise RuntimeError("model must be calibrated before merging")
    out = SpikingTransformer(model.config, model.params, model.alpha)
    merged = {}
    feeds = {"attn_in": ("k.w", "v.w"), "attn_out": ("o.w",), "ff_in": ("ff1.w",), "ff_hidden": ("ff2.w",)}
    for i in range(model.config.n_layers):
        blk = f"block{i}"
        for t in range(model.config.T):
            for kind, names in feeds.items():
                a = model.alpha_for(f"{blk}.{kind}", t)
                for n in names:
                    merged[(f"{blk}.{n}", t)] = merge_alpha_into_weights(model.params[f"{blk}.{n}"], a)
            a_k = model.alpha_for(f"{blk}.k", t)
            for n in ("q.w", "q.b"):
                merged[(f"{blk}.{n}", t)] = merge_alpha_into_weights(model.params[f"{blk}.{n}"], a_k)
    out.merged = merged
    return out
