# %% [markdown]
# # Training DAC and its ablations
#
# A tiny run of the deconfounding actor-critic next to the imitation baseline.
# Sizes come from the smoke config so the whole script finishes in a few minutes.

# %%
from dacrl.config import load_config
from dacrl.pipeline import VARIANTS, prepare_synthetic, run_variants

# swap in ../configs/desk.cfg for meaningful numbers (minutes per model on one CPU)
cfg = load_config("../configs/smoke.cfg")
ds = prepare_synthetic(cfg.synthetic, cfg.run, V=cfg.V)
results, snaps, pre = run_variants(ds, cfg, VARIANTS)

# %% [markdown]
# Test-fold scores. ACC is agreement with the oracle; WIS uses the true behavior policy.

# %%
for name, r in results.items():
    print(f"{name:10s} ACC-3 {r['acc3']:.3f}  ACC-1 {r['acc1']:.3f}  WIS {r['wis']:+.2f}")

# %% [markdown]
# The recommendation distribution of the full model on the test fold.

# %%
import numpy as np

rec = snaps["DAC"].recommend(ds.test)
counts = np.bincount(rec[ds.test.step_mask], minlength=ds.n_actions)
print("distinct settings recommended:", int((counts > 0).sum()))
