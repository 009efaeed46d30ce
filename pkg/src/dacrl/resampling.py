"""Stand-alone mortality-risk model and risk-matched survivor/non-survivor batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import CohortArrays, ValidationError
from .encoder import EmbeddingConfig, StateEncoder, cohort_tensors
from .nn_utils import fit, freeze, seed_everything


class RiskModel(nn.Module):
    """Recurrent encoder followed by an affine + sigmoid head, one risk per step."""

    def __init__(self, cfg: EmbeddingConfig):
        super().__init__()
        self.encoder = StateEncoder(cfg)
        self.head = nn.Linear(cfg.k, 1)

    def logits(self, var_ids, subranges, event_mask) -> torch.Tensor:
        return self.head(self.encoder(var_ids, subranges, event_mask)).squeeze(-1)

    def forward(self, var_ids, subranges, event_mask) -> torch.Tensor:
        return torch.sigmoid(self.logits(var_ids, subranges, event_mask))


def risk_loss(model: RiskModel, batch: dict[str, torch.Tensor]) -> torch.Tensor:
    """Binary cross-entropy of the patient outcome at every observed step."""
    logits = model.logits(batch["var_ids"], batch["subranges"], batch["event_mask"])
    y = batch["outcome"][:, None].expand_as(logits).to(logits.dtype)
    mask = batch["step_mask"].to(logits.dtype)
    per = nn.functional.binary_cross_entropy_with_logits(logits, y, reduction="none")
    return (per * mask).sum() / mask.sum()


@dataclass
class RiskScorer:
    model: RiskModel

    def step_risk(self, cohort: CohortArrays) -> np.ndarray:
        tt = cohort_tensors(cohort)
        with torch.no_grad():
            p = self.model(tt["var_ids"], tt["subranges"], tt["event_mask"]).numpy()
        return np.where(cohort.step_mask, p, 0.0)

    def max_risk(self, cohort: CohortArrays) -> np.ndarray:
        return self.step_risk(cohort).max(axis=1)


def train_risk_model(
    cohort: CohortArrays,
    emb: EmbeddingConfig,
    epochs: int = 10,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
) -> RiskScorer:
    if len(np.unique(cohort.outcome)) < 2:
        raise ValidationError("risk model needs both outcome classes")
    seed_everything(seed)
    model = RiskModel(emb)
    tt = cohort_tensors(cohort)
    fit(model, lambda idx: risk_loss(model, {k: v[idx] for k, v in tt.items()}), len(cohort), epochs, batch_size, lr, seed)
    return RiskScorer(freeze(model))


@dataclass(frozen=True)
class PatientPools:
    """Indices into the training cohort split by outcome, each sorted by (max_risk, index)."""

    survivors: np.ndarray
    survivor_risk: np.ndarray
    nonsurvivors: np.ndarray
    nonsurvivor_risk: np.ndarray

    @classmethod
    def build(cls, outcome: np.ndarray, max_risk: np.ndarray) -> "PatientPools":
        outcome = np.asarray(outcome)
        max_risk = np.asarray(max_risk, float)
        pools = []
        for label in (0, 1):
            idx = np.nonzero(outcome == label)[0]
            order = np.lexsort((idx, max_risk[idx]))
            pools += [idx[order], max_risk[idx][order]]
        return cls(*pools)


def nearest_survivor(pools: PatientPools, risk: np.ndarray) -> np.ndarray:
    """Position in ``pools.survivors`` of the closest max_risk; ties go to the lower index."""
    r = pools.survivor_risk
    risk = np.atleast_1d(np.asarray(risk, float))
    above = np.searchsorted(r, risk, side="left")
    # snap both neighbours to the first member of their equal-risk run
    hi = np.searchsorted(r, r[np.clip(above, 0, len(r) - 1)], side="left")
    lo = np.searchsorted(r, r[np.clip(above - 1, 0, len(r) - 1)], side="left")
    d_hi = np.abs(r[hi] - risk)
    d_lo = np.abs(r[lo] - risk)
    pick_lo = (d_lo < d_hi) | ((d_lo == d_hi) & (pools.survivors[lo] < pools.survivors[hi]))
    return np.where(pick_lo, lo, hi)


def sample_balanced_batch(pools: PatientPools, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """(batch_size/2, 2) array of (non-survivor, survivor) cohort indices, drawn with replacement."""
    if batch_size % 2:
        raise ValidationError("batch_size must be even")
    if len(pools.survivors) == 0 or len(pools.nonsurvivors) == 0:
        raise ValidationError("both pools must be non-empty")
    pick = rng.integers(0, len(pools.nonsurvivors), size=batch_size // 2)
    match = nearest_survivor(pools, pools.nonsurvivor_risk[pick])
    return np.stack([pools.nonsurvivors[pick], pools.survivors[match]], axis=1)
