# %% [markdown]
# # Carrying a policy to a new cohort
#
# The target cohort has mirrored treatment effects. We compare the source policy
# used as is, the adapted policy and a policy trained on target data alone.

# %%
from dacrl.config import load_config
from dacrl.pipeline import adaptation_study

# swap in ../configs/desk.cfg for meaningful numbers (minutes per model on one CPU)
cfg = load_config("../configs/smoke.cfg")
study = adaptation_study(cfg, fractions=(0.1, 0.5))

# %%
for frac, row in study.items():
    print(
        f"fraction {frac}: zero-shot {row['zero_shot']:+.2f}  adapted {row['adapted']:+.2f}  "
        f"scratch {row['scratch']:+.2f}  agreement {row['agreement']:.2f}"
    )
