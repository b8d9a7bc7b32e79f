"""Gradient flow and energy of a toy spiking transformer.

The first half measures the Jacobian moments of every spike site and compares
them to the ReLU reference. The second half prices one forward pass in
accumulate and multiply-accumulate operations.

Run with ``python demos/02_isometry_and_energy.py``.
"""

# %% setup
import numpy as np

from bispike import analysis as an
from bispike.model import SpikingTransformer
from bispike.train import make_task, toy_model_config

tokens = make_task("synth_cls", 0).val_x
model = SpikingTransformer(toy_model_config())

# %% per-site Jacobian moments; phi near 1 and varphi near 0 keep gradients stable
report = an.isometry_report(model, tokens)
print(f"{'site':18s}    r    phi   varphi   beats ReLU")
for row in report.rows:
    verdict = an.theorem1_compare(0.5, row.r)
    print(f"{row.site:18s} {row.r:5.3f}  {row.phi_emp:5.3f}  {row.varphi_emp:6.3f}   {bool(verdict)}")
print("ReLU reference at p = 0.5:", an.relu_isometry_analytic(0.5))

# %% the spiking rate region where the bi-spike beats ReLU on both moments
wins = [r for r in np.linspace(0.01, 0.99, 99) if an.theorem1_compare(0.5, float(r))]
print(f"\nspike beats ReLU(p=0.5) for r in [{min(wins):.2f}, {max(wins):.2f}]")

# %% energy: only the query projection and the head multiply
prof = an.model_energy_report(model, tokens[:64])
print(f"\n{'layer':18s} kind     count      fp32 pJ")
for layer in prof.layers:
    count = layer.mac_count if layer.kind == "mac" else layer.ac_count
    e = layer.mac_count * an.ENERGY_CONSTANTS["fp32"]["E_MAC"] + layer.ac_count * an.ENERGY_CONSTANTS["fp32"]["E_AC"]
    print(f"{layer.name:18s} {layer.kind:4s} {count:10d} {e:12.1f}")
for p in an.PRECISIONS:
    ratio = prof.dense_equivalent_pj[p] / prof.total_pj[p]
    print(f"{p}: {prof.total_pj[p] / 1e6:.2f} uJ spiking vs {prof.dense_equivalent_pj[p] / 1e6:.2f} uJ dense "
          f"({ratio:.1f}x)")
