"""Jacobian-moment (isometry) statistics and an operation-count energy model.

The isometry helpers work on local Jacobian diagonals of elementwise
encoders; for such encoders J J^T is diagonal with the squared entries, so
its first two spectral moments come straight from the samples.

Energy is estimated from counted accumulate (AC) and multiply-accumulate
(MAC) operations at 45 nm per-op costs.  Softmax and normalization are not
priced, matching the linear-layer-only accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Instrument, SpikingTransformer, model_forward
from .neurons import GRAD_RULES

# picojoules per operation
ENERGY_CONSTANTS = {
    "fp32": {"E_AC": 0.9, "E_MAC": 4.6},
    "fp16": {"E_AC": 0.4, "E_MAC": 1.5},
}
PRECISIONS = tuple(ENERGY_CONSTANTS)


def _check_unit(name: str, x: float) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return x


# ---------------------------------------------------------------- isometry

def jacobian_stats_empirical(grad_diag_samples) -> tuple[float, float]:
    """First and second spectral moments (phi, varphi) of diagonal Jacobian samples.

    phi = mean(z) and varphi = mean(z^2) - phi^2.  The samples are normally
    the 0/1 straight-through diagonal, but any real values are accepted.
    """
    z = np.asarray(getattr(grad_diag_samples, "data", grad_diag_samples), dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("need at least one Jacobian sample")
    if not np.all(np.isfinite(z)):
        raise ValueError("Jacobian samples must be finite")
    phi = float(z.mean())
    varphi = float(np.mean(z * z) - phi * phi)
    return phi, max(varphi, 0.0)


def relu_isometry_analytic(p: float) -> tuple[float, float]:
    """(phi, varphi) for ReLU with activation probability p."""
    p = _check_unit("p", p)
    return p, p - p * p


def spike_isometry_analytic(r: float) -> tuple[float, float]:
    """(phi, varphi) for the elastic bi-spike encoder at firing rate r."""
    r = _check_unit("r", r)
    return 1.0 - r, r - r * r


@dataclass(frozen=True)
class IsometryComparison:
    better: bool
    phi_margin: float     # phi_spike - phi_relu, positive is better
    varphi_margin: float  # varphi_relu - varphi_spike, positive is better

    def __bool__(self):
        return self.better


def theorem1_compare(p: float, r: float) -> IsometryComparison:
    """Whether the spike encoder is strictly closer to isometry than ReLU on both moments."""
    phi_r, var_r = relu_isometry_analytic(p)
    phi_s, var_s = spike_isometry_analytic(r)
    return IsometryComparison(phi_s > phi_r and var_s < var_r, phi_s - phi_r, var_r - var_s)


@dataclass
class IsometryRow:
    site: str
    t: int
    r: float
    phi_emp: float
    varphi_emp: float
    phi_analytic: float
    varphi_analytic: float
    n: int
    better_than_relu: bool
    phi_margin: float
    varphi_margin: float


@dataclass
class IsometryReport:
    relu_p: float
    relu_phi: float
    relu_varphi: float
    rows: list[IsometryRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "relu_reference": {"p": self.relu_p, "phi": self.relu_phi, "varphi": self.relu_varphi},
            "layers": [vars(r).copy() for r in self.rows],
        }


def isometry_report(model: SpikingTransformer, tokens, relu_p: float = 0.5) -> IsometryReport:
    """Empirical vs analytic Jacobian moments for every spike site on a sample batch."""
    inst = Instrument(keep_membranes=True)
    model_forward(tokens, model, inst, calibrate=model.needs_calibration())
    phi_relu, var_relu = relu_isometry_analytic(relu_p)
    report = IsometryReport(relu_p, phi_relu, var_relu)
    for (site, t), chunks in inst.membranes.items():
        cfg = model.sites[site]
        z = np.concatenate([GRAD_RULES[cfg.mode](m, cfg, a).ravel() for m, a in chunks])
        phi, varphi = jacobian_stats_empirical(z)
        r = inst.firing.entry(site, t).r
        phi_a, var_a = spike_isometry_analytic(r)
        cmp = theorem1_compare(relu_p, r)
        report.rows.append(IsometryRow(site, t, r, phi, varphi, phi_a, var_a, int(z.size),
                                       cmp.better, cmp.phi_margin, cmp.varphi_margin))
    return report


# ------------------------------------------------------------------ energy

def energy_linear(m: int, n: int, mode: str, T: int | None = None, r: float | None = None,
                  precision: str = "fp32") -> float:
    """Energy in pJ of an m x n linear layer: m*n*E_MAC (ann) or m*n*E_AC*T*r (snn)."""
    if precision not in ENERGY_CONSTANTS:
        raise ValueError(f"precision must be one of {PRECISIONS}, got {precision!r}")
    if m < 0 or n < 0:
        raise ValueError("layer dims must be non-negative")
    c = ENERGY_CONSTANTS[precision]
    if mode == "ann":
        return m * n * c["E_MAC"]
    if mode == "snn":
        if T is None or r is None:
            raise ValueError("snn energy needs both T and r")
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        r = _check_unit("r", r)
        return m * n * c["E_AC"] * T * r
    raise ValueError(f"mode must be 'ann' or 'snn', got {mode!r}")


@dataclass
class LayerEnergy:
    name: str
    kind: str          # "ac" for spike-driven, "mac" for real-valued operands
    rows: int          # input vectors per timestep
    in_dim: int
    out_dim: int
    T: int             # timesteps the layer ran
    r: float           # input firing rate pooled over timesteps (1.0 for mac layers)
    mac_count: int
    ac_count: int
    energy_pj: dict = field(default_factory=dict)


@dataclass
class EnergyProfile:
    layers: list[LayerEnergy]
    constants: dict
    total_pj: dict
    spike_pj: dict
    mac_pj: dict
    dense_equivalent_pj: dict  # same products priced as MACs throughout

    @property
    def mac_count(self) -> int:
        return sum(l.mac_count for l in self.layers)

    @property
    def ac_count(self) -> int:
        return sum(l.ac_count for l in self.layers)

    def recompute(self) -> dict:
        """Totals rebuilt from the stored counts and constants only."""
        out = {}
        for prec, c in self.constants.items():
            total = 0.0
            for l in self.layers:
                total += l.mac_count * c["E_MAC"] + l.ac_count * c["E_AC"]
            out[prec] = total
        return out

    def to_dict(self) -> dict:
        return {
            "constants_pj": self.constants,
            "total_pj": self.total_pj,
            "spike_pj": self.spike_pj,
            "mac_pj": self.mac_pj,
            "dense_equivalent_pj": self.dense_equivalent_pj,
            "mac_count": self.mac_count,
            "ac_count": self.ac_count,
            "layers": [vars(l).copy() for l in self.layers],
        }


def energy_from_ops(ops) -> EnergyProfile:
    """Group an instrument's product log by layer name and price it."""
    groups: dict[str, list] = {}
    for rec in ops:
        groups.setdefault(rec.name, []).append(rec)
    layers = []
    for name, recs in groups.items():
        first = recs[0]
        kinds = {r.kind for r in recs}
        if len(kinds) != 1:
            raise ValueError(f"layer {name} logged both AC and MAC products")
        kind = first.kind
        T = len({r.t for r in recs})
        rows = sum(r.rows for r in recs) // T
        mac = sum(r.count for r in recs) if kind == "mac" else 0
        ac = sum(r.count for r in recs) if kind == "ac" else 0
        if kind == "ac":
            slots = sum(r.rows * r.in_dim for r in recs)
            rate = sum(r.nnz for r in recs) / slots if slots else 0.0
        else:
            rate = 1.0
        energy = {p: mac * c["E_MAC"] + ac * c["E_AC"] for p, c in ENERGY_CONSTANTS.items()}
        layers.append(LayerEnergy(name, kind, rows, first.in_dim, first.out_dim, T, rate, mac, ac, energy))
    constants = {p: dict(c) for p, c in ENERGY_CONSTANTS.items()}
    total, spike, macs, dense = {}, {}, {}, {}
    for p, c in ENERGY_CONSTANTS.items():
        total[p] = spike[p] = macs[p] = dense[p] = 0.0
        for l in layers:
            total[p] += l.mac_count * c["E_MAC"] + l.ac_count * c["E_AC"]
            spike[p] += l.ac_count * c["E_AC"]
            macs[p] += l.mac_count * c["E_MAC"]
            dense[p] += l.T * l.rows * l.in_dim * l.out_dim * c["E_MAC"]
    return EnergyProfile(layers, constants, total, spike, macs, dense)


def model_energy_report(model: SpikingTransformer, tokens) -> EnergyProfile:
    """Run the sample through an instrumented forward pass and price every product."""
    tokens = np.atleast_2d(np.asarray(tokens))
    if tokens.size == 0:
        raise ValueError("energy report needs a nonempty sample")
    inst = Instrument()
    model_forward(tokens, model, inst, calibrate=model.needs_calibration())
    return energy_from_ops(inst.ops)


# ------------------------------------------------------------------ firing

def firing_report(model: SpikingTransformer, tokens) -> dict:
    """Per-(site, timestep) firing table plus per-site and mean rates."""
    inst = Instrument()
    model_forward(tokens, model, inst, calibrate=model.needs_calibration())
    fs = inst.firing
    return {
        "table": fs.table(),
        "per_site": {s: fs.site_rate(s) for s in fs.sites()},
        "mean_firing_rate": fs.mean_rate(),
        "k": {s: model.sites[s].k for s in fs.sites()},
    }


def binomial_bound(n: int, sigmas: float = 4.0) -> float:
    """sigmas * sqrt(0.25 / n): worst-case binomial deviation of a sample mean."""
    return sigmas * math.sqrt(0.25 / n)
