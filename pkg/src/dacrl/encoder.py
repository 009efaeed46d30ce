"""Event embeddings, max-pooled step vectors and the recurrent health-state encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import CohortArrays, ValidationError


@dataclass(frozen=True)
class EmbeddingConfig:
    k: int = 64
    V: int = 20
    n_variables: int = 48

    def __post_init__(self):
        if self.k < 1 or self.V < 1 or self.n_variables < 1:
            raise ValidationError("k, V and n_variables must be >= 1")


def positional_code(v: int | np.ndarray, V: int, k: int) -> np.ndarray:
    """Sinusoidal code of sub-range ``v``: sin(v j / (V k)) for j < k, then the cosines."""
    v_arr = np.asarray(v)
    if np.any(v_arr < 1) or np.any(v_arr > V):
        raise ValidationError(f"sub-range {v} outside [1, {V}]")
    j = np.arange(k)
    arg = v_arr[..., None] * j / (V * k)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class EventEmbedding(nn.Module):
    """e^{iv} = Linear([e^i ; e'^v]) for observed (variable, sub-range) pairs."""

    def __init__(self, cfg: EmbeddingConfig):
        super().__init__()
        self.cfg = cfg
        self.variable = nn.Embedding(cfg.n_variables, cfg.k)
        self.proj = nn.Linear(3 * cfg.k, cfg.k)
        # row 0 is padding; rows 1..V are the sinusoidal codes
        table = np.zeros((cfg.V + 1, 2 * cfg.k))
        table[1:] = positional_code(np.arange(1, cfg.V + 1), cfg.V, cfg.k)
        self.register_buffer("value_code", torch.tensor(table, dtype=torch.get_default_dtype()))

    def concat(self, var_ids: torch.Tensor, subranges: torch.Tensor) -> torch.Tensor:
        if var_ids.numel() and (var_ids.min() < 0 or var_ids.max() >= self.cfg.n_variables):
            raise ValidationError("unknown variable id")
        if subranges.numel() and (subranges.min() < 1 or subranges.max() > self.cfg.V):
            raise ValidationError("sub-range outside [1, V]")
        code = self.value_code[subranges].to(self.variable.weight.dtype)
        return torch.cat([self.variable(var_ids), code], dim=-1)

    def forward(self, var_ids: torch.Tensor, subranges: torch.Tensor) -> torch.Tensor:
        return self.proj(self.concat(var_ids, subranges))


def encode_step(embeddings: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Elementwise max over the event axis (-2); fully masked rows give zeros."""
    if embeddings.shape[-2] == 0:
        raise ValidationError("step has no events")
    if mask is None:
        return embeddings.max(dim=-2).values
    filled = embeddings.masked_fill(~mask[..., None], float("-inf"))
    pooled = filled.max(dim=-2).values
    return torch.where(mask.any(dim=-1, keepdim=True), pooled, torch.zeros_like(pooled))


class StateEncoder(nn.Module):
    """Maps per-step event sets to health states s_1..s_T with a single-layer LSTM."""

    def __init__(self, cfg: EmbeddingConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = EventEmbedding(cfg)
        self.rnn = nn.LSTM(cfg.k, cfg.k, batch_first=True)
        bound = 1.0 / math.sqrt(cfg.k)
        for name, param in self.named_parameters():
            if name != "embed.value_code":
                nn.init.uniform_(param, -bound, bound)

    def step_vectors(self, var_ids, subranges, event_mask) -> torch.Tensor:
        return encode_step(self.embed(var_ids, subranges), event_mask)

    def encode_sequence(self, e: torch.Tensor) -> torch.Tensor:
        """Causal recurrence over (N, T, k) step vectors from a zero initial state."""
        out, _ = self.rnn(e)
        return out

    def forward(self, var_ids, subranges, event_mask) -> torch.Tensor:
        return self.encode_sequence(self.step_vectors(var_ids, subranges, event_mask))


def cohort_tensors(c: CohortArrays, dtype=None) -> dict[str, torch.Tensor]:
    return {
        "var_ids": torch.as_tensor(c.var_ids),
        "subranges": torch.as_tensor(c.subranges),
        "event_mask": torch.as_tensor(c.event_mask),
        "actions": torch.as_tensor(c.actions),
        "step_mask": torch.as_tensor(c.step_mask),
        "outcome": torch.as_tensor(c.outcome, dtype=dtype or torch.get_default_dtype()),
    }


def encode_cohort(encoder: StateEncoder, c: CohortArrays, batch_size: int = 1024) -> torch.Tensor:
    """Health states for a whole cohort without gradients; shape (N, T, k)."""
    out = []
    with torch.no_grad():
        for start in range(0, len(c), batch_size):
            sub = c.subset(np.arange(start, min(start + batch_size, len(c))))
            tt = cohort_tensors(sub)
            out.append(encoder(tt["var_ids"], tt["subranges"], tt["event_mask"]))
    return torch.cat(out)
