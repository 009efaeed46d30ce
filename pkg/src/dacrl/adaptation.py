"""Transfer a source-domain policy by matching predicted next covariates across domains."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import CohortArrays, ValidationError
from .nn_utils import freeze, param_hash, seed_everything


@dataclass(frozen=True)
class SharedSpace:
    """Common covariate coordinates: a variable list with per-cohort z-scoring."""

    variables: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, cohort: CohortArrays, variables) -> "SharedSpace":
        x, m = dense_values(cohort, variables)
        mean = np.array([x[..., j][m[..., j]].mean() if m[..., j].any() else 0.0 for j in range(len(variables))])
        std = np.array([x[..., j][m[..., j]].std() if m[..., j].any() else 1.0 for j in range(len(variables))])
        return cls(tuple(int(v) for v in variables), mean, np.where(std > 0, std, 1.0))

    def transform(self, cohort: CohortArrays) -> tuple[np.ndarray, np.ndarray]:
        x, m = dense_values(cohort, self.variables)
        return np.where(m, (x - self.mean) / self.std, 0.0), m


def shared_variables(a: CohortArrays, b: CohortArrays) -> tuple[int, ...]:
    va = set(np.unique(a.var_ids[a.event_mask]).tolist())
    vb = set(np.unique(b.var_ids[b.event_mask]).tolist())
    return tuple(sorted(va & vb))


def dense_values(cohort: CohortArrays, variables) -> tuple[np.ndarray, np.ndarray]:
    """(N, T, |O|) raw values and observed mask for the listed variables."""
    if cohort.values is None:
        raise ValidationError("cohort carries no raw values")
    N, T, _ = cohort.var_ids.shape
    x = np.zeros((N, T, len(variables)))
    m = np.zeros((N, T, len(variables)), bool)
    for j, var in enumerate(variables):
        hit = cohort.event_mask & (cohort.var_ids == var)
        m[..., j] = hit.any(-1)
        x[..., j] = np.where(hit, cohort.values, 0.0).sum(-1)
    return x, m


class DynamicsModel(nn.Module):
    """f(s, a) = [s ; E[a]] W + b, predicting the next shared-space covariates."""

    def __init__(self, k: int, n_actions: int, n_out: int, action_dim: int = 8):
        super().__init__()
        self.action_embed = nn.Embedding(n_actions, action_dim)
        self.linear = nn.Linear(k + action_dim, n_out)
        self.k = k

    def forward(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.cat([s, self.action_embed(a)], dim=-1))

    def all_actions(self, s: torch.Tensor) -> torch.Tensor:
        """Predictions for every action: (..., A, |O|)."""
        w = self.linear.weight
        state_part = s @ w[:, : self.k].T
        action_part = self.action_embed.weight @ w[:, self.k :].T + self.linear.bias
        return state_part[..., None, :] + action_part

    def effective_map(self) -> tuple[np.ndarray, np.ndarray]:
        """State weights (k, |O|) and per-action offsets (A, |O|)."""
        with torch.no_grad():
            w = self.linear.weight
            offsets = self.action_embed.weight @ w[:, self.k :].T + self.linear.bias
            return w[:, : self.k].T.numpy().copy(), offsets.numpy().copy()


def dynamics_loss(model: DynamicsModel, s, a, target, mask) -> torch.Tensor:
    """Mean squared error over observed next-step coordinates."""
    err = (model(s, a) - target) ** 2
    m = mask.to(err.dtype)
    return (err * m).sum() / m.sum().clamp(min=1)


def transition_pairs(states: np.ndarray, actions: np.ndarray, x: np.ndarray, x_mask: np.ndarray, step_mask: np.ndarray):
    """Flatten (s_t, a_t) -> x_{t+1} pairs for every step with a successor."""
    valid = step_mask[:, :-1] & step_mask[:, 1:]
    s = states[:, :-1][valid]
    a = actions[:, :-1][valid]
    tgt = x[:, 1:][valid]
    m = x_mask[:, 1:][valid]
    return s, a, tgt, m


def train_dynamics(
    s: np.ndarray,
    a: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    n_actions: int,
    init: DynamicsModel | None = None,
    epochs: int = 300,
    lr: float = 1e-2,
    batch_size: int | None = None,
    seed: int = 0,
    action_dim: int = 8,
) -> DynamicsModel:
    """Least-squares fit by Adam; starts from a copy of ``init`` when given."""
    if init is None and len(s) == 0:
        raise ValidationError("no transitions: every trajectory has length 1")
    seed_everything(seed)
    if init is not None:
        model = copy.deepcopy(init)
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        model = DynamicsModel(s.shape[-1], n_actions, target.shape[-1], action_dim).to(torch.float64)
    dtype = model.linear.weight.dtype
    if len(s) == 0:
        return freeze(model)
    s_t = torch.as_tensor(s, dtype=dtype)
    a_t = torch.as_tensor(a)
    y_t = torch.as_tensor(target, dtype=dtype)
    m_t = torch.as_tensor(mask)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    bs = batch_size or len(s)
    for _ in range(epochs):
        for start in range(0, len(s), bs):
            idx = torch.as_tensor(rng.permutation(len(s))[:bs] if bs < len(s) else np.arange(len(s)))
            loss = dynamics_loss(model, s_t[idx], a_t[idx], y_t[idx], m_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return freeze(model)


def adapt_action(
    distances_or_state,
    f_source: DynamicsModel | None = None,
    f_target: DynamicsModel | None = None,
    source_action=None,
) -> np.ndarray:
    """argmin_a ||f_T(s, a) - f_S(s, a_S)||^2 with ties to the lowest flat index.

    Pass a precomputed (..., A) distance array alone, or states with both dynamics
    models and the source actions.
    """
    if f_source is None:
        return np.argmin(np.asarray(distances_or_state), axis=-1)
    return np.argmin(state_distances(distances_or_state, f_source, f_target, source_action), axis=-1)


def state_distances(states, f_source: DynamicsModel, f_target: DynamicsModel, source_action) -> np.ndarray:
    dtype = f_source.linear.weight.dtype
    s = torch.as_tensor(np.asarray(states), dtype=dtype)
    a_src = torch.as_tensor(np.asarray(source_action))
    with torch.no_grad():
        src_all = f_source.all_actions(s)
        ref = src_all.gather(-2, a_src[..., None, None].expand(*a_src.shape, 1, src_all.shape[-1]))
        tgt_all = f_target.all_actions(s)
        return ((tgt_all - ref) ** 2).sum(-1).numpy()


@dataclass
class AdaptedPolicy:
    """Source policy re-targeted through the two dynamics models; pure in (s, f_S, f_T, pi_S)."""

    source: object  # PolicySnapshot-like: states(cohort), recommend(cohort)
    f_source: DynamicsModel
    f_target: DynamicsModel

    def decide(self, states: np.ndarray, source_actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = state_distances(states, self.f_source, self.f_target, source_actions)
        return np.argmin(d, axis=-1), d

    def recommend(self, cohort: CohortArrays) -> np.ndarray:
        return self.decide(self.source.states(cohort), self.source.recommend(cohort))[0]

    def report_rows(self, cohort: CohortArrays) -> list[dict]:
        """Per-state decision with the margin to the runner-up action."""
        src = self.source.recommend(cohort)
        act, d = self.decide(self.source.states(cohort), src)
        part = np.sort(d, axis=-1)
        rows = []
        for n, pid in enumerate(cohort.patient_ids):
            for t in range(cohort.step_mask.shape[1]):
                if cohort.step_mask[n, t]:
                    rows.append(
                        {
                            "patient_id": pid,
                            "t": t + 1,
                            "source_action": int(src[n, t]),
                            "adapted_action": int(act[n, t]),
                            "distance": float(part[n, t, 0]),
                            "margin": float(part[n, t, 1] - part[n, t, 0]),
                        }
                    )
        return rows


def run_adaptation(
    source_policy,
    f_source: DynamicsModel,
    target_train: CohortArrays | None,
    space: SharedSpace | None,
    n_actions: int,
    epochs: int = 300,
    lr: float = 1e-2,
    seed: int = 0,
) -> AdaptedPolicy:
    """Initialise f_T from f_S, fine-tune it on target transitions, and wrap the adapted policy."""
    if source_policy is None or f_source is None:
        raise ValidationError("source policy and dynamics are required")
    src_hash = param_hash(f_source)
    if target_train is None or len(target_train) == 0:
        f_target = freeze(copy.deepcopy(f_source))
    else:
        states = source_policy.states(target_train)
        x, xm = space.transform(target_train)
        s, a, tgt, m = transition_pairs(states, target_train.actions, x, xm, target_train.step_mask)
        f_target = train_dynamics(s, a, tgt, m, n_actions, init=f_source, epochs=epochs, lr=lr, seed=seed)
    assert param_hash(f_source) == src_hash
    return AdaptedPolicy(source_policy, f_source, f_target)
