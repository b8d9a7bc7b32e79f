"""Scaling-factor calibration, firing-rate bookkeeping and spike entropy."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .neurons import SpikeCode

DEFAULT_K = 2.0


class CalibrationError(ValueError):
    pass


class FrozenAlphaError(RuntimeError):
    pass


class AlphaTable(Mapping):
    """Per-(site, timestep) scaling factors; immutable once frozen."""

    def __init__(self, entries: Mapping | None = None, frozen: bool = False):
        self._entries: dict[tuple[str, int], float] = {}
        self.frozen = False
        for key, value in (entries or {}).items():
            self[key] = value
        self.frozen = frozen

    def __setitem__(self, key, value):
        if self.frozen:
            raise FrozenAlphaError(f"alpha table is frozen; cannot set {key}")
        value = float(value)
        if not (value > 0 and math.isfinite(value)):
            raise CalibrationError(f"alpha for {key} must be positive and finite, got {value}")
        site, t = key
        self._entries[(str(site), int(t))] = value

    def __delitem__(self, key):
        if self.frozen:
            raise FrozenAlphaError(f"alpha table is frozen; cannot delete {key}")
        del self._entries[key]

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def freeze(self) -> None:
        self.frozen = True

    def copy(self, frozen: bool | None = None) -> "AlphaTable":
        return AlphaTable(self._entries, self.frozen if frozen is None else frozen)

    def __repr__(self):
        return f"AlphaTable({len(self)} entries, frozen={self.frozen})"


def calibrate_alpha(membrane_first_batch, k: float = DEFAULT_K) -> float:
    """alpha = k * mean(|m|) over every element of the first-batch membrane."""
    m = np.asarray(getattr(membrane_first_batch, "data", membrane_first_batch))
    if m.size == 0:
        raise CalibrationError("cannot calibrate on an empty membrane tensor")
    if k <= 0:
        raise CalibrationError(f"k must be positive, got {k}")
    alpha = float(k) * float(np.mean(np.abs(m), dtype=np.float64))
    if not alpha > 0:
        raise CalibrationError(
            "membrane potentials are all zero, so alpha would be 0; calibrate on a larger "
            "batch or use a nonzero initialisation")
    return alpha


def expected_alpha_closed_form(dist: str, scale: float, k: float = DEFAULT_K) -> float:
    """k * E|m| for zero-mean ``gaussian`` (scale = sigma) or ``laplacian`` (scale = b)."""
    if scale <= 0:
        raise ValueError(f"distribution scale must be positive, got {scale}")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if dist == "gaussian":
        return math.sqrt(2 / math.pi) * scale * k
    if dist in ("laplacian", "laplace"):
        return scale * k
    raise ValueError(f"unknown distribution {dist!r}")


@dataclass(frozen=True)
class FiringEntry:
    r: float
    r_plus: float
    r_minus: float
    n: int


def measure_firing_rate(spikes) -> FiringEntry:
    codes = spikes.codes if isinstance(spikes, SpikeCode) else np.asarray(spikes)
    n = int(codes.size)
    if n == 0:
        return FiringEntry(0.0, 0.0, 0.0, 0)
    n_plus = int(np.count_nonzero(codes > 0))
    n_minus = int(np.count_nonzero(codes < 0))
    return FiringEntry((n_plus + n_minus) / n, n_plus / n, n_minus / n, n)


class FiringStats:
    """Accumulates spike counts per (site, timestep) across forward passes."""

    def __init__(self):
        self._counts: dict[tuple[str, int], list[int]] = {}

    def add(self, site: str, t: int, spikes) -> None:
        codes = spikes.codes if isinstance(spikes, SpikeCode) else np.asarray(spikes)
        c = self._counts.setdefault((site, int(t)), [0, 0, 0])
        c[0] += int(np.count_nonzero(codes > 0))
        c[1] += int(np.count_nonzero(codes < 0))
        c[2] += int(codes.size)

    def entry(self, site: str, t: int) -> FiringEntry:
        p, q, n = self._counts[(site, t)]
        return FiringEntry((p + q) / n, p / n, q / n, n)

    def keys(self):
        return list(self._counts)

    def sites(self) -> list[str]:
        seen = []
        for site, _ in self._counts:
            if site not in seen:
                seen.append(site)
        return seen

    def site_rate(self, site: str) -> float:
        """Firing rate of a site pooled over timesteps."""
        fired = total = 0
        for (s, _), (p, q, n) in self._counts.items():
            if s == site:
                fired += p + q
                total += n
        return fired / total if total else 0.0

    def mean_rate(self) -> float:
        """Unweighted mean over sites of the pooled per-site rate."""
        sites = self.sites()
        return float(np.mean([self.site_rate(s) for s in sites])) if sites else 0.0

    def table(self) -> list[dict]:
        rows = []
        for (site, t) in self._counts:
            e = self.entry(site, t)
            rows.append({"site": site, "t": t, "r": e.r, "r_plus": e.r_plus, "r_minus": e.r_minus, "n": e.n})
        return rows


def _plogp(p: float) -> float:
    return 0.0 if p <= 0.0 else p * math.log2(p)


def spike_entropy(r: float) -> tuple[float, float]:
    """Entropy in bits of a {0,1} spike and a balanced {-1,0,1} spike at firing rate r."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"firing rate must lie in [0, 1], got {r}")
    h_uni = -_plogp(r) - _plogp(1 - r)
    h_bi = -2 * _plogp(r / 2) - _plogp(1 - r)
    return h_uni, h_bi
