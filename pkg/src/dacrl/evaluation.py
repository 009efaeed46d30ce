"""Off-policy evaluation (WIS), calibrated estimated mortality, oracle accuracy and
descriptive tables for learned ventilation policies."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import atomic_write_bytes
from .data import CohortArrays, ValidationError, flat_to_levels
from .encoder import EmbeddingConfig, StateEncoder, cohort_tensors
from .nn_utils import fit, freeze, seed_everything

BEHAVIOR_FLOOR = 1e-4
SMOOTHING_EPS = 0.01
CALIBRATION_WIDTH = 0.02
CALIBRATION_MIN_COUNT = 20


# ---------------------------------------------------------------------------
# Weighted importance sampling


def smooth_deterministic(actions: np.ndarray, n_actions: int, eps: float = SMOOTHING_EPS) -> np.ndarray:
    """One-hot policy with ``eps`` mass spread evenly over the other actions."""
    actions = np.asarray(actions)
    probs = np.full(actions.shape + (n_actions,), eps / (n_actions - 1))
    np.put_along_axis(probs, actions[..., None], 1.0 - eps, axis=-1)
    return probs


def importance_ratios(
    actions: np.ndarray, step_mask: np.ndarray, pi1: np.ndarray, pi0: np.ndarray, floor: float = BEHAVIOR_FLOOR
) -> np.ndarray:
    """rho_t = pi1(a_t|s_t) / pi0(a_t|s_t), both floored; padding steps give 1."""
    a = np.asarray(actions)[..., None]
    p1 = np.maximum(np.take_along_axis(np.asarray(pi1), a, -1)[..., 0], floor)
    p0 = np.maximum(np.take_along_axis(np.asarray(pi0), a, -1)[..., 0], floor)
    return np.where(step_mask, p1 / p0, 1.0)


def wis_from_ratios(ratios: np.ndarray, rewards: np.ndarray, step_mask: np.ndarray, gamma: float) -> float:
    """Trajectory-wise WIS: mean over patients of rho_{1:H}/w_H times the discounted return.

    w_t is the cohort mean of the cumulative ratio at horizon t; a finished trajectory
    carries its final cumulative ratio forward.
    """
    ratios = np.asarray(ratios, float)
    if ratios.shape[0] == 0:
        raise ValidationError("empty dataset")
    step_mask = np.asarray(step_mask, bool)
    cum = np.cumprod(np.where(step_mask, ratios, 1.0), axis=1)
    w = cum.mean(axis=0)
    H = step_mask.sum(1) - 1
    rows = np.arange(len(H))
    disc = gamma ** np.arange(ratios.shape[1])
    ret = (np.where(step_mask, rewards, 0.0) * disc).sum(1)
    return float(np.mean(cum[rows, H] / w[H] * ret))


def wis(
    actions: np.ndarray,
    step_mask: np.ndarray,
    rewards: np.ndarray,
    pi1: np.ndarray,
    pi0: np.ndarray,
    gamma: float = 0.99,
    floor: float = BEHAVIOR_FLOOR,
) -> float:
    return wis_from_ratios(importance_ratios(actions, step_mask, pi1, pi0, floor), rewards, step_mask, gamma)


def discounted_returns(rewards: np.ndarray, step_mask: np.ndarray, gamma: float) -> np.ndarray:
    disc = gamma ** np.arange(rewards.shape[1])
    return (np.where(step_mask, rewards, 0.0) * disc).sum(1)


# ---------------------------------------------------------------------------
# Calibration and estimated mortality


class ActionRiskModel(nn.Module):
    """Mortality risk from the patient state and the next action (per-action sigmoid)."""

    def __init__(self, emb: EmbeddingConfig, n_actions: int):
        super().__init__()
        self.encoder = StateEncoder(emb)
        self.head = nn.Linear(emb.k, n_actions)

    def forward(self, var_ids, subranges, event_mask) -> torch.Tensor:
        return torch.sigmoid(self.head(self.encoder(var_ids, subranges, event_mask)))

    def predict(self, cohort: CohortArrays) -> np.ndarray:
        """(N, T, A) risk for every candidate action."""
        tt = cohort_tensors(cohort)
        with torch.no_grad():
            return self(tt["var_ids"], tt["subranges"], tt["event_mask"]).numpy()


def train_action_risk_model(
    cohort: CohortArrays, emb: EmbeddingConfig, n_actions: int, epochs: int = 8, batch_size: int = 256, lr: float = 1e-3, seed: int = 0
) -> ActionRiskModel:
    if len(np.unique(cohort.outcome)) < 2:
        raise ValidationError("risk model needs both outcome classes")
    seed_everything(seed)
    model = ActionRiskModel(emb, n_actions)
    tt = cohort_tensors(cohort)

    def loss(idx):
        b = {k: v[idx] for k, v in tt.items()}
        logit = model.head(model.encoder(b["var_ids"], b["subranges"], b["event_mask"]))
        taken = logit.gather(-1, b["actions"][..., None]).squeeze(-1)
        y = b["outcome"][:, None].expand_as(taken).to(taken.dtype)
        m = b["step_mask"].to(taken.dtype)
        return (nn.functional.binary_cross_entropy_with_logits(taken, y, reduction="none") * m).sum() / m.sum()

    fit(model, loss, len(cohort), epochs, batch_size, lr, seed)
    return freeze(model)


@dataclass(frozen=True)
class CalibrationCurve:
    """Empirical mortality at merged-bin centres, linearly interpolated between them."""

    centers: np.ndarray
    values: np.ndarray
    counts: np.ndarray = field(default=None)

    def __call__(self, p) -> np.ndarray:
        return np.interp(np.asarray(p, float), self.centers, self.values)

    def to_json(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "values": self.values.tolist(),
            "counts": None if self.counts is None else self.counts.tolist(),
        }


def fit_calibration_curve(
    predicted: np.ndarray,
    outcome: np.ndarray,
    width: float = CALIBRATION_WIDTH,
    min_count: int = CALIBRATION_MIN_COUNT,
) -> CalibrationCurve:
    """Bin predictions in steps of ``width`` on [0, 1]; bins with fewer than ``min_count``
    samples are merged forward (a short tail merges into the previous group)."""
    predicted = np.asarray(predicted, float).ravel()
    outcome = np.asarray(outcome, float).ravel()
    if len(np.unique(outcome)) < 2:
        raise ValidationError("held-out outcomes are all one class")
    n_bins = int(round(1.0 / width))
    b = np.clip((predicted / width).astype(int), 0, n_bins - 1)
    groups: list[list[int]] = []
    current: list[int] = []
    count = 0
    for i in range(n_bins):
        current.append(i)
        count += int((b == i).sum())
        if count >= min_count:
            groups.append(current)
            current, count = [], 0
    if current:
        if groups and count < min_count:
            groups[-1].extend(current)
        else:
            groups.append(current)
    centers, values, counts = [], [], []
    for g in groups:
        sel = np.isin(b, g)
        if not sel.any():
            continue
        centers.append(predicted[sel].mean())
        values.append(outcome[sel].mean())
        counts.append(int(sel.sum()))
    return CalibrationCurve(np.asarray(centers), np.asarray(values), np.asarray(counts))


def fit_calibration(cohort: CohortArrays, risk_model: ActionRiskModel) -> CalibrationCurve:
    """Every step's predicted risk for the clinician's action is paired with the patient outcome."""
    risk = risk_model.predict(cohort)
    taken = np.take_along_axis(risk, cohort.actions[..., None], -1)[..., 0]
    y = np.broadcast_to(cohort.outcome[:, None], taken.shape)
    return fit_calibration_curve(taken[cohort.step_mask], y[cohort.step_mask])


def estimated_mortality(
    policy_actions: np.ndarray, action_risk: np.ndarray, step_mask: np.ndarray, curve: CalibrationCurve
) -> float:
    """Mean calibrated mortality of the risk predicted for the policy's action at each visited state."""
    p = np.take_along_axis(action_risk, np.asarray(policy_actions)[..., None], -1)[..., 0]
    return float(curve(p[np.asarray(step_mask, bool)]).mean())


# ---------------------------------------------------------------------------
# Oracle accuracy


def acc_metrics(recommended: np.ndarray, oracle: np.ndarray, step_mask: np.ndarray | None = None) -> tuple[float, float]:
    """ACC-3 and ACC-1 for (N, T, 3) level arrays, averaged per patient then over patients."""
    if oracle is None:
        raise ValidationError("oracle actions missing")
    recommended = np.asarray(recommended)
    oracle = np.asarray(oracle)
    if step_mask is None:
        step_mask = np.ones(recommended.shape[:2], bool)
    hit = recommended == oracle
    m = np.asarray(step_mask, float)
    per3 = (hit.all(-1) * m).sum(1) / m.sum(1)
    per1 = (hit.mean(-1) * m).sum(1) / m.sum(1)
    return float(per3.mean()), float(per1.mean())


def acc_from_flat(recommended: np.ndarray, oracle: np.ndarray, step_mask=None, levels: int = 7) -> tuple[float, float]:
    return acc_metrics(flat_to_levels(recommended, levels), flat_to_levels(oracle, levels), step_mask)


# ---------------------------------------------------------------------------
# Descriptive analyses

PARAMETERS = ("vt", "peep", "fio2")


def action_histograms(actions: np.ndarray, step_mask: np.ndarray, levels: int = 7) -> np.ndarray:
    """(3, levels) marginal level frequencies over visited steps."""
    lv = flat_to_levels(np.asarray(actions)[np.asarray(step_mask, bool)], levels)
    return np.stack([np.bincount(lv[:, j] - 1, minlength=levels) / len(lv) for j in range(3)])


def dose_difference_table(
    recommended: np.ndarray, actual: np.ndarray, outcome: np.ndarray, step_mask: np.ndarray, levels: int = 7
) -> dict[str, dict[str, list]]:
    """Counts and mortality by (recommended - actual) level offset for each parameter."""
    mask = np.asarray(step_mask, bool)
    diff = flat_to_levels(recommended, levels) - flat_to_levels(actual, levels)
    y = np.broadcast_to(np.asarray(outcome)[:, None], mask.shape)[mask]
    offsets = np.arange(-(levels - 1), levels)
    out = {}
    for j, name in enumerate(PARAMETERS):
        d = diff[..., j][mask]
        counts = np.array([(d == o).sum() for o in offsets])
        rate = [float(y[d == o].mean()) if c else None for o, c in zip(offsets, counts)]
        out[name] = {"offset": offsets.tolist(), "count": counts.tolist(), "mortality": rate}
    return out


def return_mortality_curve(expected_return: np.ndarray, outcome: np.ndarray, n_bins: int = 10) -> dict[str, list]:
    """Mortality rate by expected-return quantile bin."""
    expected_return = np.asarray(expected_return, float)
    edges = np.quantile(expected_return, np.linspace(0, 1, n_bins + 1))
    b = np.clip(np.searchsorted(edges, expected_return, side="right") - 1, 0, n_bins - 1)
    centers, rates, counts = [], [], []
    for i in range(n_bins):
        sel = b == i
        if sel.any():
            centers.append(float(expected_return[sel].mean()))
            rates.append(float(np.asarray(outcome)[sel].mean()))
            counts.append(int(sel.sum()))
    return {"expected_return": centers, "mortality": rates, "count": counts}


def descriptive_reports(
    policy_actions: np.ndarray,
    cohort: CohortArrays,
    expected_return: np.ndarray | None = None,
    levels: int = 7,
) -> dict:
    out = {
        "histograms": {
            "clinician": action_histograms(cohort.actions, cohort.step_mask, levels).tolist(),
            "policy": action_histograms(policy_actions, cohort.step_mask, levels).tolist(),
        },
        "dose_difference": dose_difference_table(policy_actions, cohort.actions, cohort.outcome, cohort.step_mask, levels),
    }
    if expected_return is not None:
        out["return_mortality"] = return_mortality_curve(expected_return, cohort.outcome)
    return out


@dataclass
class EvalReport:
    policy: str
    wis: float
    em: float | None = None
    acc3: float | None = None
    acc1: float | None = None
    descriptive: dict = field(default_factory=dict)
    calibration: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**{k: d.get(k) for k in ("policy", "wis", "em", "acc3", "acc1", "calibration")}, descriptive=d.get("descriptive") or {})

    def headline(self) -> str:
        def f(x):
            return "   -  " if x is None else f"{x:6.3f}"

        return f"{self.policy:<16} EM {f(self.em)}  WIS {f(self.wis)}  ACC-3 {f(self.acc3)}  ACC-1 {f(self.acc1)}"


def render_figures(
    report: EvalReport, out_dir: str | Path, run_id: str, curve: CalibrationCurve | None = None, tag: str = ""
) -> list[Path]:
    """PNG figures named ``<run_id>[_<tag>]_<figure>.png``; output is a pure function of the inputs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None, "Description": json.dumps({"run_id": run_id})}
    paths = []
    d = report.descriptive

    def save(fig, name):
        buf = io.BytesIO()
        fig.savefig(buf, format="png", metadata=meta, dpi=80)
        plt.close(fig)
        stem = f"{run_id}_{tag}_{name}" if tag else f"{run_id}_{name}"
        paths.append(atomic_write_bytes(out_dir / f"{stem}.png", buf.getvalue()))

    if "histograms" in d:
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for j, ax in enumerate(axes):
            lv = np.arange(1, len(d["histograms"]["clinician"][j]) + 1)
            ax.bar(lv - 0.2, d["histograms"]["clinician"][j], width=0.4, label="clinician")
            ax.bar(lv + 0.2, d["histograms"]["policy"][j], width=0.4, label=report.policy)
            ax.set_title(PARAMETERS[j])
        axes[0].legend()
        save(fig, "histogram")
    if "dose_difference" in d:
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for ax, name in zip(axes, PARAMETERS):
            t = d["dose_difference"][name]
            xs = [o for o, r in zip(t["offset"], t["mortality"]) if r is not None]
            ys = [r for r in t["mortality"] if r is not None]
            ax.plot(xs, ys, marker="o")
            ax.set_title(f"{name}: recommended - actual")
        save(fig, "dose_difference")
    if "return_mortality" in d:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(d["return_mortality"]["expected_return"], d["return_mortality"]["mortality"], marker="o")
        ax.set_xlabel("expected return")
        ax.set_ylabel("mortality")
        save(fig, "return_mortality")
    if curve is None and report.calibration:
        curve = CalibrationCurve(np.asarray(report.calibration["centers"]), np.asarray(report.calibration["values"]))
    if curve is not None:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(curve.centers, curve.values, marker=".")
        ax.plot([0, 1], [0, 1], ls=":", c="grey")
        ax.set_xlabel("predicted mortality")
        ax.set_ylabel("observed mortality")
        save(fig, "calibration")
    return paths
