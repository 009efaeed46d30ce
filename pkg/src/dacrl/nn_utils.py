from __future__ import annotations

import hashlib
import random
from typing import Callable, Iterator

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit(
    module: torch.nn.Module,
    loss_fn: Callable[[np.ndarray], torch.Tensor],
    n: int,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> list[float]:
    """Plain Adam loop over shuffled index minibatches; returns per-epoch mean loss."""
    opt = torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in minibatches(n, batch_size, rng):
            loss = loss_fn(idx)
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    return history


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    ref = module.state_dict()
    module.load_state_dict({k: torch.as_tensor(arrays[k], dtype=ref[k].dtype) for k in ref})


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
