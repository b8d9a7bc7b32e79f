"""Short training run, firing-rate trace and alpha merging.

Trains the toy model on the synthetic parity task for a few hundred steps,
prints the metrics rows, then folds every alpha into the weights that consume
its spikes and confirms the outputs do not move.

Run with ``python demos/03_train_and_merge.py`` (about half a minute).
"""

# %% train
import numpy as np

from bispike.model import merged_model
from bispike.train import TrainConfig, train_loop

cfg = TrainConfig(steps=300, warmup_steps=30, eval_every=50, peak_lr=3e-4)
res = train_loop(cfg)
print(f"calibration: mean firing rate {res.calibration['val_mean_firing_rate']:.3f} on validation")
print(" step   train_loss  val_loss  val_acc  firing")
for row in res.rows:
    print(f"{row['step']:5d}   {row['train_loss']:10.4f}  {row['val_loss']:8.4f}  {row['val_metric']:7.4f}"
          f"  {row['mean_firing_rate']:6.3f}")

# %% per-site firing after training
last = res.rows[-1]
for key in sorted(k for k in last if k.startswith("r_")):
    print(f"  {key[2:]:18s} {last[key]:.3f}")

# %% merge: spikes become plain {-1, 0, 1} codes and weights absorb alpha
x = res.dataset.val_x[:32]
before = res.model(x).data
after = merged_model(res.model)(x).data
print(f"\nmax |merged - unmerged| logits: {np.max(np.abs(after - before)):.2e}")
