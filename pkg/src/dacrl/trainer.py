"""Deconfounding actor-critic: heads, losses, and the resampled, weighted training loop."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import CohortArrays, ValidationError, change_codes
from .encoder import EmbeddingConfig, StateEncoder, cohort_tensors
from .evaluation import wis
from .nn_utils import freeze, param_hash, seed_everything
from .resampling import PatientPools, RiskScorer, sample_balanced_batch, train_risk_model
from .rewards import (
    BehaviorClone,
    NumeratorModel,
    clone_outputs,
    combined_reward,
    iptw_weights,
    numerator_probs,
    short_term_reward,
    terminal_rewards,
    train_behavior_clone,
    train_numerator,
)

log = logging.getLogger(__name__)

MORTALITY_FLOOR = 1e-7

ABLATIONS = {"rsp": "no_resample", "dcf": "no_iptw", "short": "no_short", "long": "no_long"}


class NumericalAbort(RuntimeError):
    """A training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 10
    batches_per_epoch: int | None = None
    no_resample: bool = False
    no_iptw: bool = False
    no_short: bool = False
    no_long: bool = False
    n_sync: int = 100
    clip: tuple[float, float] = (0.1, 10.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValidationError("alpha must be in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must be in (0, 1]")
        if self.no_short and self.no_long:
            raise ValidationError("no_short and no_long together leave no reward")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValidationError("batch_size must be even and >= 2")

    @property
    def effective_alpha(self) -> float:
        if self.no_short:
            return 1.0
        if self.no_long:
            return 0.0
        return self.alpha

    def ablate(self, *names: str) -> "TrainConfig":
        return dataclasses.replace(self, **{ABLATIONS[n]: True for n in names})

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# Model


class DACModel(nn.Module):
    def __init__(self, emb: EmbeddingConfig, n_actions: int):
        super().__init__()
        self.emb = emb
        self.n_actions = n_actions
        self.encoder = StateEncoder(emb)
        self.actor = nn.Linear(emb.k, n_actions)
        self.long_term = nn.Linear(emb.k, n_actions)
        self.mortality = nn.Linear(emb.k, n_actions)
        self.target_long_term = copy.deepcopy(self.long_term)
        for p in self.target_long_term.parameters():
            p.requires_grad_(False)

    def states(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        return self.encoder(batch["var_ids"], batch["subranges"], batch["event_mask"])

    def policy(self, s: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.actor(s), dim=-1)

    def long_term_values(self, s: torch.Tensor) -> torch.Tensor:
        return self.long_term(s)

    def mortality_probs(self, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mortality(s))

    def sync_target(self) -> None:
        self.target_long_term.load_state_dict(self.long_term.state_dict())


def select(values: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Coordinate ``actions`` of an (..., A) tensor; coordinate i is flat action i."""
    return values.gather(-1, actions[..., None]).squeeze(-1)


def _last_step(step_mask: torch.Tensor) -> torch.Tensor:
    lengths = step_mask.sum(1)
    t = torch.arange(step_mask.shape[1], device=step_mask.device)[None]
    return t == (lengths[:, None] - 1)


def td_targets(
    model: DACModel, states: torch.Tensor, rewards: torch.Tensor, step_mask: torch.Tensor, gamma: float
) -> torch.Tensor:
    """z_t = R^m_t + gamma * max_a R^l_target(s_{t+1}, a); terminal steps keep R^m alone."""
    with torch.no_grad():
        nxt = model.target_long_term(states[:, 1:].detach()).max(dim=-1).values
        boot = torch.zeros_like(rewards)
        boot[:, :-1] = nxt
        boot = torch.where(_last_step(step_mask) | ~step_mask, torch.zeros_like(boot), boot)
        return rewards + gamma * boot


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp(min=1)


def critic_td_loss(model, states, actions, rewards, step_mask, gamma) -> torch.Tensor:
    z = td_targets(model, states, rewards, step_mask, gamma)
    pred = select(model.long_term_values(states), actions)
    return _masked_mean((pred - z) ** 2, step_mask)


def mortality_loss(model, states, actions, outcome, step_mask) -> torch.Tensor:
    p = select(model.mortality_probs(states), actions)
    y = outcome[:, None].to(p.dtype)
    bce = -y * torch.log(p.clamp(min=MORTALITY_FLOOR)) - (1 - y) * torch.log((1 - p).clamp(min=MORTALITY_FLOOR))
    return _masked_mean(bce, step_mask)


def actor_loss(model, states, actions, q, step_mask) -> torch.Tensor:
    """Negative policy-gradient surrogate; ``q`` is treated as a constant."""
    logp = torch.log_softmax(model.actor(states), dim=-1)
    return -_masked_mean(select(logp, actions) * q.detach(), step_mask)


def reward_bundle(
    model: DACModel, states: torch.Tensor, actions: torch.Tensor, weights: torch.Tensor, alpha: float
) -> dict[str, torch.Tensor]:
    with torch.no_grad():
        s = states.detach()
        r_long = select(model.long_term_values(s), actions)
        r_short = short_term_reward(model.policy(s), model.mortality_probs(s), actions)
        q = combined_reward(weights, r_long, r_short, alpha)
    return {"w": weights, "r_long": r_long, "r_short": r_short, "q": q}


# ---------------------------------------------------------------------------
# Pre-trained components


@dataclass
class Pretrained:
    risk: RiskScorer
    numerator: NumeratorModel
    clone: BehaviorClone
    max_risk: np.ndarray
    pools: PatientPools
    weights: np.ndarray  # (N, T) clipped balancing weights for the training cohort
    levels: int = 7

    def weights_for(self, cohort: CohortArrays, clip=(0.1, 10.0)) -> np.ndarray:
        codes = change_codes(cohort.actions, self.levels)
        num = numerator_probs(self.numerator, codes, cohort.step_mask)
        den = clone_outputs(self.clone, cohort, self.levels).change_prob_taken
        return iptw_weights(num, den, clip, step_mask=cohort.step_mask)


@dataclass(frozen=True)
class PretrainConfig:
    risk_epochs: int = 8
    clone_epochs: int = 8
    numerator_epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 256
    clip: tuple[float, float] = (0.1, 10.0)
    seed: int = 0


def pretrain(
    train: CohortArrays, emb: EmbeddingConfig, n_actions: int, cfg: PretrainConfig = PretrainConfig(), levels: int = 7
) -> Pretrained:
    """Risk model, numerator model and behavior clone, each trained once and frozen."""
    risk = train_risk_model(train, emb, cfg.risk_epochs, cfg.batch_size, cfg.lr, cfg.seed)
    codes = change_codes(train.actions, levels)
    numerator = train_numerator(codes, train.step_mask, epochs=cfg.numerator_epochs, seed=cfg.seed + 1)
    clone = train_behavior_clone(train, emb, n_actions, levels, cfg.clone_epochs, cfg.batch_size, cfg.lr, cfg.seed + 2)
    return assemble_pretrained(risk, numerator, clone, train, levels, cfg.clip)


def assemble_pretrained(
    risk: RiskScorer, numerator: NumeratorModel, clone: BehaviorClone, train: CohortArrays, levels: int = 7, clip=(0.1, 10.0)
) -> Pretrained:
    """Derive pools and balancing weights from frozen (possibly reloaded) components."""
    max_risk = risk.max_risk(train)
    pools = PatientPools.build(train.outcome, max_risk)
    pre = Pretrained(risk, numerator, clone, max_risk, pools, np.ones(train.step_mask.shape), levels)
    pre.weights = pre.weights_for(train, clip)
    return pre


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class PolicySnapshot:
    model: DACModel
    config: TrainConfig
    epoch: int
    val_wis: float = float("nan")

    def _forward(self, cohort: CohortArrays):
        tt = cohort_tensors(cohort)
        with torch.no_grad():
            return self.model.states(tt)

    def states(self, cohort: CohortArrays) -> np.ndarray:
        return self._forward(cohort).numpy()

    def action_probs(self, cohort: CohortArrays) -> np.ndarray:
        with torch.no_grad():
            return self.model.policy(self._forward(cohort)).numpy()

    def recommend(self, cohort: CohortArrays) -> np.ndarray:
        return self.action_probs(cohort).argmax(-1)

    def long_term_values(self, cohort: CohortArrays) -> np.ndarray:
        with torch.no_grad():
            return self.model.long_term_values(self._forward(cohort)).numpy()

    def param_hash(self) -> str:
        return param_hash(self.model)


@dataclass
class TrainResult:
    best: PolicySnapshot
    history: list[dict] = field(default_factory=list)
    last: PolicySnapshot | None = None


def sample_batch(
    cfg: TrainConfig, pre: Pretrained, n: int, rng: np.random.Generator
) -> np.ndarray:
    if cfg.no_resample:
        return rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    return sample_balanced_batch(pre.pools, cfg.batch_size, rng).reshape(-1)


def train_step(
    model: DACModel,
    opt: torch.optim.Optimizer,
    batch: dict[str, torch.Tensor],
    weights: torch.Tensor,
    rewards: torch.Tensor,
    cfg: TrainConfig,
) -> dict[str, float]:
    states = model.states(batch)
    bundle = reward_bundle(model, states, batch["actions"], weights, cfg.effective_alpha)
    losses = {
        "actor": actor_loss(model, states, batch["actions"], bundle["q"], batch["step_mask"]),
        "critic": critic_td_loss(model, states, batch["actions"], rewards, batch["step_mask"], cfg.gamma),
        "mortality": mortality_loss(model, states, batch["actions"], batch["outcome"], batch["step_mask"]),
    }
    total = losses["actor"] + losses["critic"] + losses["mortality"]
    if not torch.isfinite(total):
        raise NumericalAbort({k: float(v.detach()) for k, v in losses.items()})
    opt.zero_grad()
    total.backward()
    opt.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def _improves(new: PolicySnapshot, old: PolicySnapshot | None) -> bool:
    """Strictly higher validation WIS wins; without validation the latest epoch wins."""
    if old is None:
        return True
    if np.isnan(new.val_wis):
        return bool(np.isnan(old.val_wis))
    return bool(np.isnan(old.val_wis) or new.val_wis > old.val_wis)


def train_dac(
    train: CohortArrays,
    pre: Pretrained,
    cfg: TrainConfig,
    emb: EmbeddingConfig,
    n_actions: int,
    validation: CohortArrays | None = None,
    val_behavior_probs: np.ndarray | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    init_state: dict | None = None,
    start_epoch: int = 0,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Alternate actor, critic and mortality updates on (re)sampled batches.

    Each epoch ends with a validation WIS of the actor's distribution when a validation
    cohort and its behavior-policy probabilities are given; the best epoch is returned.
    Resuming (``init_state`` + ``start_epoch``) runs the remaining epochs up to ``cfg.epochs``.
    """
    seed_everything(cfg.seed)
    model = DACModel(emb, n_actions)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, start_epoch])
    tt = cohort_tensors(train)
    dtype = model.actor.weight.dtype
    weights_all = torch.ones(train.step_mask.shape, dtype=dtype)
    if not cfg.no_iptw:
        weights_all = torch.as_tensor(pre.weights, dtype=dtype)
    rewards_all = torch.as_tensor(terminal_rewards(train.outcome, train.step_mask), dtype=dtype)
    n_batches = cfg.batches_per_epoch or max(1, int(np.ceil(len(train) / cfg.batch_size)))
    val_rewards = None
    if validation is not None:
        val_rewards = terminal_rewards(validation.outcome, validation.step_mask)

    history: list[dict] = []
    best: PolicySnapshot | None = None
    updates = 0
    snap = None
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        sums: dict[str, float] = {}
        for _ in range(n_batches):
            idx = torch.as_tensor(sample_batch(cfg, pre, len(train), rng))
            batch = {k: v[idx] for k, v in tt.items()}
            out = train_step(model, opt, batch, weights_all[idx], rewards_all[idx], cfg)
            for k, v in out.items():
                sums[k] = sums.get(k, 0.0) + v / n_batches
            updates += 1
            if updates % cfg.n_sync == 0:
                model.sync_target()
        snap = PolicySnapshot(freeze(copy.deepcopy(model)), cfg, epoch + 1)
        if validation is not None and val_behavior_probs is not None:
            pi1 = snap.action_probs(validation)
            snap.val_wis = wis(validation.actions, validation.step_mask, val_rewards, pi1, val_behavior_probs, cfg.gamma)
        record = {"epoch": epoch + 1, **sums, "val_wis": snap.val_wis}
        history.append(record)
        log.debug("epoch %s", record)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        if checkpoint_dir is not None:
            from .checkpoint import save_module

            meta = {**(checkpoint_meta or {}), "epoch": epoch + 1, "train_config": dataclasses.asdict(cfg)}
            save_module(Path(checkpoint_dir) / f"dac_epoch{epoch + 1:03d}.npz", snap.model, meta)
        if _improves(snap, best):
            best = snap
    if best is None:
        raise ValidationError(f"nothing to train: start_epoch {start_epoch} >= epochs {cfg.epochs}")
    return TrainResult(best, history, snap)
