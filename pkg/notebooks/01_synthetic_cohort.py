# %% [markdown]
# # A synthetic ventilation cohort
#
# We simulate a small confounded cohort, look at how outcomes and actions are
# distributed, and check how often the logged clinician agrees with the oracle.

# %%
import numpy as np

from dacrl.config import load_config
from dacrl.pipeline import prepare_synthetic
from dacrl.evaluation import acc_from_flat, action_histograms

cfg = load_config("../configs/smoke.cfg")
ds = prepare_synthetic(cfg.synthetic, cfg.run, V=cfg.V)
print("patients per part:", {k: len(v) for k, v in ds.rows.items()})
print("mortality in train:", ds.train.outcome.mean().round(3))

# %% [markdown]
# Each step carries one of 343 ventilator settings. Marginal level counts per
# setting show how unevenly the behavior policy explores.

# %%
hist = action_histograms(ds.train.actions, ds.train.step_mask, ds.levels)
print(hist)

# %% [markdown]
# How close is the behavior policy to the oracle?

# %%
acc3, acc1 = acc_from_flat(ds.train.actions, ds.oracle("train"), ds.train.step_mask, ds.levels)
print(f"clinician ACC-3 {acc3:.3f}  ACC-1 {acc1:.3f}")
