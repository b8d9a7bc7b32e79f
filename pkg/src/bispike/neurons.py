"""Spike encoders and the gradients they register on the tape.

Three neuron modes share one charge/fire/reset loop:

``lif_surrogate``
    binary LIF, arctangent surrogate gradient around the threshold.
``lif_ste``
    binary LIF, gradient of ``clip(m, 0, 1)`` (expectation of a stochastic
    {0, 1} spike).
``elastic_bi``
    ternary spikes ``{-a, 0, +a}`` with threshold and amplitude ``a``; gradient
    of ``a * clip(m / a, -1, 1)``.

The encoders work on plain arrays; :func:`neuron_step` wires them onto the
tape with :func:`bispike.tensorcore.custom_grad`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

MODES = ("lif_surrogate", "lif_ste", "elastic_bi")
RESET_RULES = ("literal", "symmetric")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class NeuronConfig:
    """Constants for one spiking site.

    For ``elastic_bi`` the reset follows the amplitude-aware rule and ``beta``
    is only consulted for ``beta == 0``, which makes the site memoryless
    (key/value sites).
    """

    mode: str = "elastic_bi"
    beta: float = 0.25
    v_reset: float = 0.0
    theta: float = 1.0
    k: float = 2.0
    T: int = 1
    sg_alpha: float = 2.0
    reset_rule: str = "literal"
    relaxed: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reset_rule not in RESET_RULES:
            raise ValueError(f"reset_rule must be one of {RESET_RULES}, got {self.reset_rule!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be an integer >= 1, got {self.T}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.sg_alpha <= 0:
            raise ValueError(f"sg_alpha must be positive, got {self.sg_alpha}")


@dataclass
class NeuronState:
    """Membrane potential after (``v``) and before (``m``) encoding."""

    v: Tensor | None = None
    m: Tensor | None = None


@dataclass
class SpikeCode:
    """Ternary codes plus a scalar amplitude.

    ``value`` is the realised spike tensor on the tape (``codes * amplitude``
    for hard forwards); it is None for codes produced outside a neuron step.
    """

    codes: np.ndarray
    amplitude: float = 1.0
    value: Tensor | None = None

    def __post_init__(self):
        if self.amplitude <= 0 or not math.isfinite(self.amplitude):
            raise ValueError(f"spike amplitude must be positive and finite, got {self.amplitude}")

    @property
    def shape(self):
        return self.codes.shape

    @property
    def exact(self) -> bool:
        """True when ``value`` is exactly ``codes * amplitude`` (not a relaxed forward)."""
        return getattr(self, "_exact", True)

    def realized(self) -> np.ndarray:
        dt = self.codes.dtype if self.codes.dtype.kind == "f" else tc.get_default_dtype()
        return self.codes.astype(dt, copy=False) * dt.type(self.amplitude)

    def as_tensor(self) -> Tensor:
        if self.value is not None:
            return self.value
        r = self.realized()
        return tc.tensor(r, dtype=r.dtype)

    def reshape(self, shape) -> "SpikeCode":
        out = SpikeCode(self.codes.reshape(shape), self.amplitude,
                        None if self.value is None else tc.reshape(self.value, shape))
        out._exact = self.exact
        return out

    def transpose(self, axes) -> "SpikeCode":
        out = SpikeCode(np.ascontiguousarray(self.codes.transpose(axes)), self.amplitude,
                        None if self.value is None else tc.transpose(self.value, axes))
        out._exact = self.exact
        return out


@dataclass
class TernaryProbs:
    p_plus: np.ndarray
    p_zero: np.ndarray
    p_minus: np.ndarray


# ---------------------------------------------------------------------------
# counter-based randomness


class CounterRNG:
    """Uniform draws keyed by (seed, layer, timestep, element index).

    Each (layer, timestep) pair gets its own Philox key, and element ``i`` of a
    request always receives the ``i``-th draw of that stream, so results do not
    depend on evaluation order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def uniform(self, layer: int, timestep: int, shape) -> np.ndarray:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF,
                        ((int(layer) & 0xFFFFFFFF) << 32) | (int(timestep) & 0xFFFFFFFF)],
                       dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.random(size=shape)


# ---------------------------------------------------------------------------
# LIF pieces


def lif_charge(state: NeuronState, x_t: Tensor) -> Tensor:
    """m(t) = v(t-1) + x(t)."""
    if state.v is None:
        return x_t
    if state.v.shape != x_t.shape:
        raise tc.ShapeError(f"membrane {state.v.shape} vs input {x_t.shape}")
    return tc.add(state.v, x_t)


def lif_fire_binary(m, theta: float) -> SpikeCode:
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    mv = _arr(m)
    return SpikeCode((mv >= theta).astype(mv.dtype), 1.0)


def lif_reset(m: Tensor, s: SpikeCode, beta: float, v_reset: float) -> Tensor:
    """v = beta * m * (1 - s) + v_reset * s."""
    if s.codes.size and s.codes.min() < 0:
        raise ValueError("lif_reset received negative spike codes; LIF spikes are binary")
    st = s.as_tensor()
    keep = tc.scale(tc.mul(m, tc.add(tc.scale(st, -1.0), 1.0)), beta)
    if v_reset == 0.0:
        return keep
    return tc.add(keep, tc.scale(st, v_reset))


def surrogate_grad_arctan(m, theta: float, sg_alpha: float) -> np.ndarray:
    """(a/2) / (1 + (pi/2 * a * (m - theta))^2)."""
    if sg_alpha <= 0:
        raise ValueError(f"sg_alpha must be positive, got {sg_alpha}")
    mv = _arr(m)
    z = (math.pi / 2) * sg_alpha * (mv - theta)
    return ((sg_alpha / 2) / (1 + z * z)).astype(mv.dtype)


def surrogate_forward_arctan(m, theta: float, sg_alpha: float) -> np.ndarray:
    """Smooth stand-in whose derivative is :func:`surrogate_grad_arctan`."""
    mv = _arr(m)
    return (np.arctan((math.pi / 2) * sg_alpha * (mv - theta)) / math.pi + 0.5).astype(mv.dtype)


def ste_grad_unidirectional(m) -> np.ndarray:
    """d/dm clip(m, 0, 1): 1 on (0, 1), else 0."""
    mv = _arr(m)
    return ((mv > 0) & (mv < 1)).astype(mv.dtype)


def binary_spike_sample(m, rng: CounterRNG, layer: int = 0, timestep: int = 0) -> SpikeCode:
    """Stochastic {0, 1} spike with P(1) = clip(m, 0, 1)."""
    mv = _arr(m)
    u = rng.uniform(layer, timestep, mv.shape)
    return SpikeCode((u < np.clip(mv, 0, 1)).astype(mv.dtype), 1.0)


# ---------------------------------------------------------------------------
# bidirectional / elastic pieces


def bi_spike_sample(m, rng: CounterRNG, layer: int = 0, timestep: int = 0) -> tuple[SpikeCode, TernaryProbs]:
    mv = _arr(m)
    p_plus = np.clip(mv, 0, 1)
    p_minus = np.clip(-mv, 0, 1)
    p_zero = 1 - p_plus - p_minus
    u = rng.uniform(layer, timestep, mv.shape)
    codes = np.where(mv >= 0, (u < p_plus).astype(mv.dtype), -(u < p_minus).astype(mv.dtype))
    return SpikeCode(codes.astype(mv.dtype), 1.0), TernaryProbs(p_plus, p_zero, p_minus)


def bi_spike_forward(m) -> SpikeCode:
    """Deterministic ternary spike with thresholds at -1 and +1 (|m| = 1 fires)."""
    mv = _arr(m)
    codes = (mv >= 1).astype(mv.dtype) - (mv <= -1).astype(mv.dtype)
    return SpikeCode(codes, 1.0)


def bi_spike_grad(m) -> np.ndarray:
    """d/dm clip(m, -1, 1): 1 on (-1, 1), else 0."""
    mv = _arr(m)
    return ((mv > -1) & (mv < 1)).astype(mv.dtype)


def elastic_spike_forward(m, alpha: float) -> SpikeCode:
    """Codes of ``m / alpha`` under the ternary rule, carried with amplitude ``alpha``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    mv = _arr(m)
    a = mv.dtype.type(alpha)
    codes = (mv >= a).astype(mv.dtype) - (mv <= -a).astype(mv.dtype)
    return SpikeCode(codes, float(alpha))


def elastic_spike_grad(m, alpha: float) -> np.ndarray:
    mv = _arr(m)
    a = mv.dtype.type(alpha)
    return ((mv > -a) & (mv < a)).astype(mv.dtype)


def elastic_reset(m: Tensor, s: SpikeCode, alpha: float, v_reset: float, rule: str = "literal") -> Tensor:
    """Amplitude-aware reset.

    literal:   v = m * (alpha - s) + v_reset * s
    symmetric: v = m * (alpha - |s|) + v_reset * s
    """
    if not math.isclose(s.amplitude, alpha, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(f"spike amplitude {s.amplitude} does not match alpha {alpha}")
    if rule not in RESET_RULES:
        raise ValueError(f"unknown reset rule {rule!r}")
    st = s.as_tensor()
    gate = st if rule == "literal" else tc.tabs(st)
    v = tc.mul(m, tc.add(tc.scale(gate, -1.0), alpha))
    if v_reset == 0.0:
        return v
    return tc.add(v, tc.scale(st, v_reset))


# ---------------------------------------------------------------------------
# composition

# Gradient rules keyed by mode. Kept in a table so gradcheck can swap one out.
GRAD_RULES = {
    "lif_surrogate": lambda m, cfg, alpha: surrogate_grad_arctan(m, cfg.theta, cfg.sg_alpha),
    "lif_ste": lambda m, cfg, alpha: ste_grad_unidirectional(m),
    "elastic_bi": lambda m, cfg, alpha: elastic_spike_grad(m, alpha),
}


def _relaxed_forward(m: np.ndarray, cfg: NeuronConfig, alpha: float) -> np.ndarray:
    if cfg.mode == "lif_surrogate":
        return surrogate_forward_arctan(m, cfg.theta, cfg.sg_alpha)
    if cfg.mode == "lif_ste":
        return np.clip(m, 0, 1)
    a = m.dtype.type(alpha)
    return np.clip(m, -a, a)


def fire(config: NeuronConfig, m: Tensor, alpha: float = 1.0) -> SpikeCode:
    """Encode ``m`` and attach the mode's gradient rule."""
    mv = m.data
    if config.mode == "elastic_bi":
        spike = elastic_spike_forward(mv, alpha)
    else:
        spike = lif_fire_binary(mv, config.theta)
    jac = GRAD_RULES[config.mode](mv, config, alpha)
    if config.relaxed:
        spike.value = tc.custom_grad(m, _relaxed_forward(mv, config, alpha), jac)
        spike._exact = False
    else:
        spike.value = tc.custom_grad(m, spike.realized(), jac)
    return spike


def reset_after_fire(config: NeuronConfig, m: Tensor, spike: SpikeCode, alpha: float, t: int) -> Tensor | None:
    """Post-encoding potential v(t); None when nothing will read it."""
    if t == config.T - 1:
        return None
    if config.mode == "elastic_bi":
        if config.beta == 0.0:
            return tc.scale(spike.as_tensor(), config.v_reset) if config.v_reset else None
        return elastic_reset(m, spike, alpha, config.v_reset, config.reset_rule)
    if config.beta == 0.0 and config.v_reset == 0.0:
        return None
    return lif_reset(m, spike, config.beta, config.v_reset)


def neuron_step(config: NeuronConfig, state: NeuronState, x_t: Tensor, alpha: float = 1.0,
                t: int = 0) -> tuple[SpikeCode, NeuronState]:
    """Charge, fire, reset.  Returns the spike and the next state."""
    if not 0 <= t < config.T:
        raise ValueError(f"timestep {t} outside [0, {config.T})")
    m = lif_charge(state, x_t)
    spike = fire(config, m, alpha)
    return spike, NeuronState(v=reset_after_fire(config, m, spike, alpha, t), m=m)
