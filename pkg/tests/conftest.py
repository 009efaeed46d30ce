import numpy as np
import pytest
import torch

from dacrl.data import CohortArrays


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def toy_cohort(N=6, T=3, E=2, n_var=5, V=4, n_actions=3, seed=0, outcome=None) -> CohortArrays:
    """Random padded cohort; every patient has at least one step and every step one event."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, T + 1, size=N)
    lengths[0] = T
    step_mask = np.arange(T)[None] < lengths[:, None]
    event_mask = rng.random((N, T, E)) < 0.7
    event_mask[..., 0] = True
    event_mask &= step_mask[..., None]
    var_ids = np.where(event_mask, rng.integers(0, n_var, size=(N, T, E)), 0)
    subranges = np.where(event_mask, rng.integers(1, V + 1, size=(N, T, E)), 1)
    values = rng.normal(size=(N, T, E)) * event_mask
    actions = np.where(step_mask, rng.integers(0, n_actions, size=(N, T)), 0)
    if outcome is None:
        outcome = np.arange(N) % 2
    return CohortArrays(
        [f"p{i}" for i in range(N)], var_ids, subranges, event_mask, actions, step_mask, np.asarray(outcome), values
    )


def finite_difference_error(loss_fn, params, h=1e-6) -> float:
    """max over parameter tensors of ||autograd - central difference|| / max(norms)."""
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
            scale = max(g.norm().item(), fd.norm().item())
            if scale > 1e-10:
                worst = max(worst, (g - fd).norm().item() / scale)
    return worst


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
