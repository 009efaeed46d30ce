"""Confounding-balance weights, behavior clone, and the short/long-term reward terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import INITIAL_CODE, N_CHANGE_CLASSES, CohortArrays, ValidationError, change_codes
from .encoder import EmbeddingConfig, StateEncoder, cohort_tensors
from .nn_utils import fit, freeze, seed_everything

TERMINAL_REWARD = 15.0
PROB_FLOOR = 1e-4
DEFAULT_CLIP = (0.1, 10.0)


# ---------------------------------------------------------------------------
# Numerator f(a_t | A_{t-1}) over change classes


class NumeratorModel(nn.Module):
    """LSTM over previous change classes; predicts the next class (27-way)."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.embed = nn.Embedding(N_CHANGE_CLASSES + 1, hidden)
        self.rnn = nn.LSTM(hidden, hidden, batch_first=True)
        self.head = nn.Linear(hidden, N_CHANGE_CLASSES)

    def logits(self, codes: torch.Tensor) -> torch.Tensor:
        """Row t scores the class at step t from codes[:, :t]; the first input is INITIAL."""
        prev = torch.cat([torch.full_like(codes[:, :1], INITIAL_CODE), codes[:, :-1]], dim=1)
        out, _ = self.rnn(self.embed(prev))
        return self.head(out)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(codes), dim=-1)


def _change_targets(codes: torch.Tensor, step_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    valid = step_mask & (codes != INITIAL_CODE)
    return codes.clamp(max=N_CHANGE_CLASSES - 1), valid


def numerator_nll(model: NumeratorModel, codes: torch.Tensor, step_mask: torch.Tensor) -> torch.Tensor:
    target, valid = _change_targets(codes, step_mask)
    logp = torch.log_softmax(model.logits(codes), dim=-1)
    nll = -logp.gather(-1, target[..., None]).squeeze(-1)
    w = valid.to(nll.dtype)
    return (nll * w).sum() / w.sum().clamp(min=1)


def train_numerator(
    codes: np.ndarray,
    step_mask: np.ndarray | None = None,
    hidden: int = 32,
    epochs: int = 10,
    batch_size: int = 256,
    lr: float = 1e-2,
    seed: int = 0,
) -> NumeratorModel:
    codes_t = torch.as_tensor(codes)
    if codes_t.numel() == 0:
        raise ValidationError("no change-class sequences")
    mask_t = torch.ones_like(codes_t, dtype=torch.bool) if step_mask is None else torch.as_tensor(step_mask)
    seed_everything(seed)
    model = NumeratorModel(hidden)
    fit(model, lambda idx: numerator_nll(model, codes_t[idx], mask_t[idx]), len(codes_t), epochs, batch_size, lr, seed)
    return freeze(model)


def numerator_probs(model: NumeratorModel, codes: np.ndarray, step_mask: np.ndarray) -> np.ndarray:
    """f(observed class | previous classes) per step; INITIAL and padding steps give 1."""
    codes_t = torch.as_tensor(codes)
    target, valid = _change_targets(codes_t, torch.as_tensor(step_mask))
    with torch.no_grad():
        p = model(codes_t).gather(-1, target[..., None]).squeeze(-1)
    return np.where(valid.numpy(), p.numpy(), 1.0)


# ---------------------------------------------------------------------------
# Behavior clone pi^c


class BehaviorClone(nn.Module):
    """Actor-shaped imitation policy: encoder, then affine + softmax heads.

    ``action_head`` covers the full action space (baseline recommendations and the
    evaluation behavior policy); ``change_head`` covers the 27 change classes used
    by the balancing weights.
    """

    def __init__(self, emb: EmbeddingConfig, n_actions: int):
        super().__init__()
        self.encoder = StateEncoder(emb)
        self.action_head = nn.Linear(emb.k, n_actions)
        self.change_head = nn.Linear(emb.k, N_CHANGE_CLASSES)

    def forward(self, var_ids, subranges, event_mask) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.encoder(var_ids, subranges, event_mask)
        return self.action_head(s), self.change_head(s)


def clone_nll(model: BehaviorClone, batch: dict[str, torch.Tensor], codes: torch.Tensor) -> torch.Tensor:
    a_logit, c_logit = model(batch["var_ids"], batch["subranges"], batch["event_mask"])
    mask = batch["step_mask"].to(a_logit.dtype)
    a_nll = -torch.log_softmax(a_logit, -1).gather(-1, batch["actions"][..., None]).squeeze(-1)
    target, valid = _change_targets(codes, batch["step_mask"])
    c_nll = -torch.log_softmax(c_logit, -1).gather(-1, target[..., None]).squeeze(-1)
    vw = valid.to(a_logit.dtype)
    return (a_nll * mask).sum() / mask.sum() + (c_nll * vw).sum() / vw.sum().clamp(min=1)


@dataclass
class CloneOutputs:
    action_probs: np.ndarray  # (N, T, A)
    change_prob_taken: np.ndarray  # (N, T); 1 at INITIAL/padding
    change_codes: np.ndarray


def train_behavior_clone(
    cohort: CohortArrays,
    emb: EmbeddingConfig,
    n_actions: int,
    levels: int = 7,
    epochs: int = 10,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
) -> BehaviorClone:
    if len(cohort) == 0:
        raise ValidationError("empty training set")
    seed_everything(seed)
    model = BehaviorClone(emb, n_actions)
    tt = cohort_tensors(cohort)
    codes = torch.as_tensor(change_codes(cohort.actions, levels))
    fit(
        model,
        lambda idx: clone_nll(model, {k: v[idx] for k, v in tt.items()}, codes[idx]),
        len(cohort),
        epochs,
        batch_size,
        lr,
        seed,
    )
    return freeze(model)


def clone_outputs(model: BehaviorClone, cohort: CohortArrays, levels: int = 7) -> CloneOutputs:
    tt = cohort_tensors(cohort)
    codes = change_codes(cohort.actions, levels)
    with torch.no_grad():
        a_logit, c_logit = model(tt["var_ids"], tt["subranges"], tt["event_mask"])
        a_prob = torch.softmax(a_logit, -1).numpy()
        c_prob = torch.softmax(c_logit, -1)
        target, valid = _change_targets(torch.as_tensor(codes), tt["step_mask"])
        taken = c_prob.gather(-1, target[..., None]).squeeze(-1).numpy()
    return CloneOutputs(a_prob, np.where(valid.numpy(), taken, 1.0), codes)


# ---------------------------------------------------------------------------
# Weights and rewards


def iptw_weights(
    numerator: np.ndarray,
    denominator: np.ndarray,
    clip: tuple[float, float] = DEFAULT_CLIP,
    floor: float = PROB_FLOOR,
    step_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Running product of floored numerator/denominator ratios, clipped per step.

    Steps outside ``step_mask`` contribute a factor of 1 (pass 1/1 for the INITIAL step).
    """
    num = np.maximum(np.asarray(numerator, float), floor)
    den = np.maximum(np.asarray(denominator, float), floor)
    log_ratio = np.log(num) - np.log(den)
    if step_mask is not None:
        log_ratio = np.where(step_mask, log_ratio, 0.0)
    w = np.exp(np.cumsum(log_ratio, axis=-1))
    return np.clip(w, clip[0], clip[1])


def short_term_reward(pi: torch.Tensor, p_m: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Policy-averaged mortality minus the mortality of the taken action."""
    expected = (pi * p_m).sum(-1)
    taken = p_m.gather(-1, actions[..., None]).squeeze(-1)
    return expected - taken


def terminal_reward(y: int) -> float:
    if y not in (0, 1):
        raise ValidationError("outcome must be 0 or 1")
    return -TERMINAL_REWARD if y == 1 else TERMINAL_REWARD


def terminal_rewards(outcome: np.ndarray, step_mask: np.ndarray) -> np.ndarray:
    """(N, T) rewards: zero except +-15 at each patient's last step."""
    step_mask = np.asarray(step_mask, bool)
    out = np.zeros(step_mask.shape)
    last = step_mask.sum(1) - 1
    rows = np.arange(len(last))
    out[rows, last] = np.where(np.asarray(outcome) == 1, -TERMINAL_REWARD, TERMINAL_REWARD)
    return out


def combined_reward(w, r_long, r_short, alpha: float):
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must be in [0, 1]")
    return w * (alpha * r_long + (1 - alpha) * r_short)
