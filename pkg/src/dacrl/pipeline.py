"""End-to-end synthetic experiments: data preparation, pre-training, DAC variants,
evaluation and the cross-domain adaptation study."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptedPolicy, SharedSpace, run_adaptation, shared_variables, train_dynamics, transition_pairs
from .config import AdaptConfig, RunConfig, build_config
from .data import CohortArrays, CohortSplit, PatientTrajectory, ValueBins, fit_value_bins, pack_cohort, split_cohort
from .encoder import EmbeddingConfig
from .evaluation import acc_from_flat, smooth_deterministic, wis
from .rewards import clone_outputs, terminal_rewards
from .synthetic import SyntheticConfig, SyntheticGroundTruth, behavior_action_distribution, simulate_cohort
from .trainer import PolicySnapshot, Pretrained, pretrain, train_dac

VARIANTS = {
    "DAC": (),
    "DAC-rsp": ("rsp",),
    "DAC-dcf": ("dcf",),
    "DAC-short": ("short",),
    "DAC-long": ("long",),
}

# Desk experiment settings layered over the library defaults (mirrored by configs/desk.cfg).
DESK_OVERRIDES: dict[str, object] = {
    "name": "desk",
    "synthetic.treatment_sd": 1.0,
    "train.lr": 1e-3,
    "train.epochs": 30,
    "train.batches_per_epoch": 40,
}


def desk_config(seed: int = 0, **overrides) -> RunConfig:
    return build_config({**DESK_OVERRIDES, "seed": seed, **overrides})


@dataclass
class Datasets:
    train: CohortArrays
    validation: CohortArrays
    test: CohortArrays
    bins: ValueBins
    split: CohortSplit
    gt: SyntheticGroundTruth | None = None
    rows: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def levels(self) -> int:
        return 7 if self.gt is None else self.gt.config.num_levels

    @property
    def n_actions(self) -> int:
        return self.levels**3

    def oracle(self, part: str) -> np.ndarray | None:
        return None if self.gt is None else self.gt.oracle[self.rows[part]]

    def true_behavior(self, part: str) -> np.ndarray:
        """Exact behavior-policy probabilities (synthetic cohorts only)."""
        cfg, rows = self.gt.config, self.rows[part]
        return behavior_action_distribution(self.gt.q[rows, : cfg.T], cfg.kappa, self.gt.coef.theta)


def build_datasets(
    trajectories: list[PatientTrajectory],
    gt: SyntheticGroundTruth | None,
    split: CohortSplit,
    run: int = 0,
    V: int = 20,
    bins: ValueBins | None = None,
    levels: int = 7,
) -> Datasets:
    """Designate folds, fit value bins on the training folds (unless given) and pack."""
    parts = split.designate(run)
    pos = {tr.patient_id: i for i, tr in enumerate(trajectories)}
    rows = {k: np.array(sorted(pos[p] for p in v), dtype=np.int64) for k, v in parts.items()}
    if bins is None:
        bins = fit_value_bins([trajectories[i] for i in rows["train"]], V)
    packed = {k: pack_cohort([trajectories[i] for i in r], bins, levels) for k, r in rows.items()}
    return Datasets(packed["train"], packed["validation"], packed["test"], bins, split, gt, rows)


def prepare_synthetic(cfg: SyntheticConfig, run: int = 0, split_seed: int | None = None, V: int = 20) -> Datasets:
    trajectories, gt = simulate_cohort(cfg)
    split = split_cohort(gt.patient_ids, cfg.seed if split_seed is None else split_seed)
    return build_datasets(trajectories, gt, split, run, V, levels=cfg.num_levels)


def embedding_for(ds: Datasets, k: int = 64) -> EmbeddingConfig:
    n_vars = int(max(c.var_ids.max() for c in (ds.train, ds.validation, ds.test))) + 1
    return EmbeddingConfig(k=k, V=ds.bins.V, n_variables=n_vars)


@dataclass
class ClonePolicy:
    """Imitation-learning baseline: the frozen behavior clone's action head."""

    pre: Pretrained

    def action_probs(self, cohort: CohortArrays) -> np.ndarray:
        return clone_outputs(self.pre.clone, cohort, self.pre.levels).action_probs

    def recommend(self, cohort: CohortArrays) -> np.ndarray:
        return self.action_probs(cohort).argmax(-1)


def policy_wis(policy, cohort: CohortArrays, behavior: np.ndarray, gamma: float = 0.99) -> float:
    rec = policy.recommend(cohort)
    rewards = terminal_rewards(cohort.outcome, cohort.step_mask)
    return wis(cohort.actions, cohort.step_mask, rewards, smooth_deterministic(rec, behavior.shape[-1]), behavior, gamma)


def evaluate_policy(policy, ds: Datasets, part: str = "test", gamma: float = 0.99) -> dict:
    cohort = getattr(ds, part)
    rec = policy.recommend(cohort)
    acc3, acc1 = acc_from_flat(rec, ds.oracle(part), cohort.step_mask, ds.levels)
    return {"acc3": acc3, "acc1": acc1, "wis": policy_wis(policy, cohort, ds.true_behavior(part), gamma)}


def run_variants(
    ds: Datasets,
    cfg: RunConfig,
    variants: dict[str, tuple[str, ...]] = VARIANTS,
    pre: Pretrained | None = None,
    train_overrides: dict[str, dict] | None = None,
) -> tuple[dict[str, dict], dict[str, PolicySnapshot], Pretrained]:
    """Train the requested DAC variants on shared pre-trained components and score them on test.

    The behavior clone is scored as "IL".
    """
    emb = embedding_for(ds, cfg.k)
    if pre is None:
        pre = pretrain(ds.train, emb, ds.n_actions, cfg.pretrain, ds.levels)
    val_pi0 = ds.true_behavior("validation")
    results, snaps = {"IL": evaluate_policy(ClonePolicy(pre), ds)}, {}
    for name, ablations in variants.items():
        tc = cfg.train.ablate(*ablations)
        if train_overrides and name in train_overrides:
            tc = tc.replace(**train_overrides[name])
        res = train_dac(ds.train, pre, tc, emb, ds.n_actions, ds.validation, val_pi0)
        snaps[name] = res.best
        results[name] = evaluate_policy(res.best, ds)
    return results, snaps, pre


# ---------------------------------------------------------------------------
# Adaptation study


def target_synthetic(cfg: RunConfig) -> SyntheticConfig:
    """Same draws as the source cohort except mirrored treatment coefficients and new patients."""
    return cfg.synthetic.replace(
        treatment_scale=cfg.synthetic.treatment_scale * cfg.adapt.target_treatment_scale,
        patient_seed=cfg.seed + cfg.adapt.target_patient_seed_offset,
    )


@dataclass
class TargetCohort:
    trajectories: list[PatientTrajectory]
    gt: SyntheticGroundTruth
    test: CohortArrays
    test_rows: np.ndarray
    pool_rows: np.ndarray  # shuffled non-test patients, consumed in order by target fractions
    bins: ValueBins

    def training_rows(self, fraction: float) -> np.ndarray:
        n = int(round(fraction * len(self.gt.patient_ids)))
        if n > len(self.pool_rows):
            raise ValueError(f"fraction {fraction} exceeds the non-test pool")
        return np.sort(self.pool_rows[:n])

    def training(self, fraction: float) -> CohortArrays | None:
        rows = self.training_rows(fraction)
        if len(rows) == 0:
            return None
        return pack_cohort([self.trajectories[i] for i in rows], self.bins, self.gt.config.num_levels)

    def behavior(self, rows: np.ndarray) -> np.ndarray:
        c = self.gt.config
        return behavior_action_distribution(self.gt.q[rows, : c.T], c.kappa, self.gt.coef.theta)


def prepare_target(cfg: RunConfig, bins: ValueBins, trajectories=None, gt=None) -> TargetCohort:
    """Target cohort discretized with the source bins so the source encoder applies unchanged."""
    if gt is None:
        trajectories, gt = simulate_cohort(target_synthetic(cfg))
    split = split_cohort(gt.patient_ids, cfg.seed + cfg.adapt.target_patient_seed_offset)
    pos = {p: i for i, p in enumerate(gt.patient_ids)}
    test_ids = set(split.designate(cfg.run)["test"])
    test_rows = np.array(sorted(pos[p] for p in test_ids), dtype=np.int64)
    rng = np.random.default_rng([cfg.seed, 7])
    pool = np.array([pos[p] for p in gt.patient_ids if p not in test_ids], dtype=np.int64)
    pool = pool[rng.permutation(len(pool))]
    test = pack_cohort([trajectories[i] for i in test_rows], bins, gt.config.num_levels)
    return TargetCohort(trajectories, gt, test, test_rows, pool, bins)


def fit_source_dynamics(policy, cohort: CohortArrays, space: SharedSpace, n_actions: int, adapt: AdaptConfig, seed: int = 0):
    states = policy.states(cohort)
    x, xm = space.transform(cohort)
    s, a, tgt, m = transition_pairs(states, cohort.actions, x, xm, cohort.step_mask)
    return train_dynamics(s, a, tgt, m, n_actions, epochs=adapt.epochs, lr=adapt.lr, seed=seed)


def adapt_to_target(
    policy, f_source, target_train: CohortArrays | None, source_train: CohortArrays, cfg: RunConfig, n_actions: int
) -> AdaptedPolicy:
    """f_T starts as f_S and is fine-tuned on ``target_train`` (None or empty keeps f_S)."""
    if target_train is None or len(target_train) == 0:
        return run_adaptation(policy, f_source, None, None, n_actions, cfg.adapt.epochs, cfg.adapt.lr, cfg.seed)
    space = SharedSpace.fit(target_train, shared_variables(source_train, target_train))
    return run_adaptation(policy, f_source, target_train, space, n_actions, cfg.adapt.epochs, cfg.adapt.lr, cfg.seed)


def train_from_scratch(target_train: CohortArrays, behavior: np.ndarray, cfg: RunConfig, emb: EmbeddingConfig, n_actions: int, levels: int):
    """Target-only DAC; a fifth of the target training patients is held out for selection."""
    n = len(target_train)
    rng = np.random.default_rng([cfg.seed, 11])
    order = rng.permutation(n)
    n_val = max(1, n // 5)
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    tr, val = target_train.subset(tr_idx), target_train.subset(val_idx)
    pre = pretrain(tr, emb, n_actions, cfg.pretrain, levels)
    return train_dac(tr, pre, cfg.train, emb, n_actions, val, behavior[val_idx]).best


def adaptation_study(
    cfg: RunConfig,
    fractions=(0.1, 0.3, 0.5),
    ds: Datasets | None = None,
    source: PolicySnapshot | None = None,
    scratch: bool = True,
) -> dict[str, dict]:
    """WIS on the target test fold for the zero-shot source policy, the adapted policy and
    (optionally) a target-only policy at each target-training fraction."""
    if ds is None:
        ds = prepare_synthetic(cfg.synthetic, cfg.run, V=cfg.V)
    emb = embedding_for(ds, cfg.k)
    if source is None:
        _, snaps, _ = run_variants(ds, cfg, {"DAC": ()})
        source = snaps["DAC"]
    tgt = prepare_target(cfg, ds.bins)
    variables = shared_variables(ds.train, tgt.test)
    f_source = fit_source_dynamics(source, ds.train, SharedSpace.fit(ds.train, variables), ds.n_actions, cfg.adapt, cfg.seed)
    pi0_test = tgt.behavior(tgt.test_rows)
    zero_shot = policy_wis(source, tgt.test, pi0_test, cfg.train.gamma)
    out = {}
    for frac in fractions:
        rows = tgt.training_rows(frac)
        target_train = tgt.training(frac)
        adapted = adapt_to_target(source, f_source, target_train, ds.train, cfg, ds.n_actions)
        row = {"zero_shot": zero_shot, "adapted": policy_wis(adapted, tgt.test, pi0_test, cfg.train.gamma)}
        if scratch:
            own = train_from_scratch(target_train, tgt.behavior(rows), cfg, emb, ds.n_actions, ds.levels)
            row["scratch"] = policy_wis(own, tgt.test, pi0_test, cfg.train.gamma)
        row["agreement"] = float((adapted.recommend(tgt.test) == source.recommend(tgt.test))[tgt.test.step_mask].mean())
        out[f"{frac:g}"] = row
    return out


__all__ = [
    "VARIANTS",
    "DESK_OVERRIDES",
    "Datasets",
    "ClonePolicy",
    "TargetCohort",
    "desk_config",
    "build_datasets",
    "prepare_synthetic",
    "prepare_target",
    "target_synthetic",
    "embedding_for",
    "policy_wis",
    "evaluate_policy",
    "run_variants",
    "fit_source_dynamics",
    "adapt_to_target",
    "train_from_scratch",
    "adaptation_study",
]
