"""Confounded semi-synthetic ventilation cohort with a known optimal-action oracle.

Covariates ``o`` and hidden states ``s`` follow p-order autoregressions driven by the
scalar treatment ``a``; the behavior policy picks actions from the confounder ``q``
(running mean of hidden states plus a linear image of the covariates), and the
outcome is a linear read-out of ``q`` one transition after the final action.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ActionTriple,
    ObservationEvent,
    PatientTrajectory,
    Step,
    ValidationError,
    flat_to_levels,
    unflatten,
)


@dataclass(frozen=True)
class SyntheticConfig:
    p: int = 3
    T: int = 6
    dim_o: int = 8
    dim_s: int = 8
    num_levels: int = 7
    kappa: float = 2.0
    n_survivor: int = 1000
    n_nonsurvivor: int = 3000
    treatment_sd: float = 0.02
    noise_sd: float = 0.01
    init_sd: float = 1.0
    outcome_bias_sd: float = 0.1
    theta_scale: float = 1.0
    observe_prob: float = 1.0
    # multiplies the drawn treatment coefficients; -1 mirrors the action effects
    treatment_scale: float = 1.0
    seed: int = 0
    # patients are drawn from this stream; None reuses ``seed``
    patient_seed: int | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError("p must be >= 1")
        if self.T < self.p:
            raise ValidationError("T must be >= p")
        if self.kappa < 0:
            raise ValidationError("kappa must be >= 0")
        for name in ("dim_o", "dim_s", "num_levels", "n_survivor", "n_nonsurvivor"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0 < self.observe_prob <= 1:
            raise ValidationError("observe_prob must be in (0, 1]")

    @property
    def n_actions(self) -> int:
        return self.num_levels**3

    @property
    def n_patients(self) -> int:
        return self.n_survivor + self.n_nonsurvivor

    @property
    def mortality_fraction(self) -> float:
        return self.n_nonsurvivor / self.n_patients

    def replace(self, **kw) -> "SyntheticConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Coefficients:
    alpha: np.ndarray  # (p, dim_o); row r-1 multiplies o_{t-r}
    mu: np.ndarray  # (p, dim_s)
    beta: np.ndarray  # (p,)
    upsilon: np.ndarray  # (p,)
    G: np.ndarray  # (dim_s, dim_o), g(o) = G o
    w: np.ndarray  # (dim_s,)
    b: float
    theta: np.ndarray  # (n_actions, dim_s)


def draw_coefficients(config: SyntheticConfig) -> Coefficients:
    rng = np.random.default_rng([config.seed, 1])
    p = config.p
    r = np.arange(1, p + 1)[:, None]
    alpha = rng.normal(1 - r / p, 1 / p, size=(p, config.dim_o))
    mu = rng.normal(1 - r / p, 1 / p, size=(p, config.dim_s))
    beta = rng.normal(0, config.treatment_sd, size=p) * config.treatment_scale
    upsilon = rng.normal(0, config.treatment_sd, size=p) * config.treatment_scale
    G = rng.uniform(-1, 1, size=(config.dim_s, config.dim_o))
    w = rng.uniform(-1, 1, size=config.dim_s)
    b = float(rng.normal(0, config.outcome_bias_sd))
    theta = rng.normal(0, config.theta_scale, size=(config.n_actions, config.dim_s))
    return Coefficients(alpha, mu, beta, upsilon, G, w, b, theta)


def action_scalar(flat: np.ndarray | int, n_actions: int) -> np.ndarray:
    """Centered flat index scaled to [-1, 1]."""
    return 2.0 * np.asarray(flat, float) / (n_actions - 1) - 1.0


def autoregressive_step(lags: np.ndarray, lag_actions: np.ndarray, coef: np.ndarray, treat: np.ndarray) -> np.ndarray:
    """Noise-free mean of x_t = (1/p) sum_r (coef_r * x_{t-r} + treat_r * a_{t-r}).

    ``lags`` is (..., p, d) with index r-1 holding x_{t-r}; ``lag_actions`` is (..., p)
    holding a_{t-r}.
    """
    p = coef.shape[0]
    return (np.sum(coef * lags, axis=-2) + np.sum(treat * lag_actions, axis=-1)[..., None]) / p


def behavior_action_distribution(q: np.ndarray, kappa: float, theta: np.ndarray) -> np.ndarray:
    """P(a = j | q) proportional to exp(kappa * theta_j . q); works on (..., dim_s) batches."""
    if kappa < 0:
        raise ValidationError("kappa must be >= 0")
    logits = kappa * (np.asarray(q) @ np.asarray(theta).T)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def label_outcomes(y: np.ndarray, mortality_fraction: float) -> tuple[np.ndarray, float]:
    """Binarize so that about ``mortality_fraction`` of patients are above the threshold."""
    y = np.asarray(y, float)
    if len(np.unique(y)) < 2:
        raise ValidationError("outcome values are constant")
    if not 0 <= mortality_fraction <= 1:
        raise ValidationError("mortality_fraction must be in [0, 1]")
    n = len(y)
    n_dead = int(round(mortality_fraction * n))
    ys = np.sort(y)
    threshold = float(ys[n - n_dead - 1]) if n_dead < n else float(-np.inf)
    return (y > threshold).astype(np.int64), threshold


@dataclass
class SyntheticGroundTruth:
    config: SyntheticConfig
    coef: Coefficients
    patient_ids: list[str]
    # latent paths including the p initial lags: (N, p + T + 1, d); index p + t - 1 is step t
    o: np.ndarray
    s: np.ndarray
    q: np.ndarray  # (N, T + 1, dim_s), q_1..q_{T+1}
    actions: np.ndarray  # (N, T) flat indices
    observed: np.ndarray  # (N, T, dim_o) bool
    y_raw: np.ndarray
    labels: np.ndarray
    threshold: float
    oracle: np.ndarray = field(default=None)  # (N, T) flat indices

    def oracle_levels(self) -> np.ndarray:
        return flat_to_levels(self.oracle, self.config.num_levels)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        from .checkpoint import save_arrays

        c = self.coef
        arrays = dict(
            patient_ids=np.asarray(self.patient_ids),
            o=self.o,
            s=self.s,
            q=self.q,
            actions=self.actions,
            observed=self.observed,
            y_raw=self.y_raw,
            labels=self.labels,
            oracle=self.oracle,
            threshold=np.asarray(self.threshold),
            alpha=c.alpha,
            mu=c.mu,
            beta=c.beta,
            upsilon=c.upsilon,
            G=c.G,
            w=c.w,
            b=np.asarray(c.b),
            theta=c.theta,
        )
        save_arrays(path, arrays, {"config": dataclasses.asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticGroundTruth":
        from .checkpoint import load_arrays

        z, meta = load_arrays(path)
        config = SyntheticConfig(**meta["config"])
        coef = Coefficients(
            z["alpha"], z["mu"], z["beta"], z["upsilon"], z["G"], z["w"], float(z["b"]), z["theta"]
        )
        return cls(
            config,
            coef,
            [str(x) for x in z["patient_ids"]],
            z["o"],
            z["s"],
            z["q"],
            z["actions"],
            z["observed"],
            z["y_raw"],
            z["labels"],
            float(z["threshold"]),
            z["oracle"],
        )


def simulate_cohort(
    config: SyntheticConfig, coef: Coefficients | None = None
) -> tuple[list[PatientTrajectory], SyntheticGroundTruth]:
    gt = simulate_ground_truth(config, coef)
    return to_trajectories(gt), gt


def simulate_ground_truth(config: SyntheticConfig, coef: Coefficients | None = None) -> SyntheticGroundTruth:
    coef = coef if coef is not None else draw_coefficients(config)
    seed = config.seed if config.patient_seed is None else config.patient_seed
    rng = np.random.default_rng([seed, 2])
    N, T, p = config.n_patients, config.T, config.p
    n_act = config.n_actions
    o = np.zeros((N, p + T + 1, config.dim_o))
    s = np.zeros((N, p + T + 1, config.dim_s))
    o[:, :p] = rng.normal(0, config.init_sd, size=(N, p, config.dim_o))
    s[:, :p] = rng.normal(0, config.init_sd, size=(N, p, config.dim_s))
    # pre-treatment actions sit at the centre of the scale
    a_scalar = np.zeros((N, p + T + 1))
    actions = np.zeros((N, T), np.int64)
    q = np.zeros((N, T + 1, config.dim_s))
    s_sum = np.zeros((N, config.dim_s))
    for t in range(1, T + 2):
        i = p + t - 1
        o_lags = o[:, i - p : i][:, ::-1]
        s_lags = s[:, i - p : i][:, ::-1]
        a_lags = a_scalar[:, i - p : i][:, ::-1]
        o[:, i] = autoregressive_step(o_lags, a_lags, coef.alpha, coef.beta) + rng.normal(
            0, config.noise_sd, size=(N, config.dim_o)
        )
        s[:, i] = autoregressive_step(s_lags, a_lags, coef.mu, coef.upsilon) + rng.normal(
            0, config.noise_sd, size=(N, config.dim_s)
        )
        s_sum += s[:, i]
        q[:, t - 1] = s_sum / t + o[:, i] @ coef.G.T
        if t <= T:
            probs = behavior_action_distribution(q[:, t - 1], config.kappa, coef.theta)
            u = rng.random(N)[:, None]
            a = np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), n_act - 1)
            actions[:, t - 1] = a
            a_scalar[:, i] = action_scalar(a, n_act)
    y = q[:, T] @ coef.w + coef.b
    labels, threshold = label_outcomes(y, config.mortality_fraction)
    observed = rng.random((N, T, config.dim_o)) < config.observe_prob
    # keep at least one event per step
    none = ~observed.any(axis=2)
    if none.any():
        pick = rng.integers(0, config.dim_o, size=none.sum())
        observed[np.nonzero(none) + (pick,)] = True
    width = len(str(N - 1))
    ids = [f"p{i:0{width}d}" for i in range(N)]
    gt = SyntheticGroundTruth(config, coef, ids, o, s, q, actions, observed, y, labels, threshold)
    gt.oracle = oracle_actions(gt)
    return gt


def to_trajectories(gt: SyntheticGroundTruth) -> list[PatientTrajectory]:
    cfg = gt.config
    p, L = cfg.p, cfg.num_levels
    out = []
    for n, pid in enumerate(gt.patient_ids):
        steps = []
        for t in range(cfg.T):
            obs = gt.o[n, p + t]
            events = tuple(
                ObservationEvent(j, float(obs[j])) for j in range(cfg.dim_o) if gt.observed[n, t, j]
            )
            steps.append(Step(events, unflatten(int(gt.actions[n, t]), L)))
        out.append(PatientTrajectory(pid, tuple(steps), int(gt.labels[n])))
    return out


# ---------------------------------------------------------------------------
# Optimal-action oracle
#
# The oracle scores every candidate action by rolling the noise-free recursions to the
# outcome step. Later actions in the rollout follow a greedy rule: at step u pick the
# action whose constant continuation a_u = ... = a_T gives the lowest outcome.


@dataclass
class _RolloutState:
    o_lags: np.ndarray  # (B, p, dim_o), index r-1 = o_{t+1-r} after step t
    s_lags: np.ndarray
    a_lags: np.ndarray  # (B, p) scalars a_{t-r+1}.. filled as actions are taken
    s_sum: np.ndarray  # (B, dim_s)
    t: int  # last realised step

    def copy(self) -> "_RolloutState":
        return _RolloutState(self.o_lags.copy(), self.s_lags.copy(), self.a_lags.copy(), self.s_sum.copy(), self.t)

    def repeat(self, n: int) -> "_RolloutState":
        return _RolloutState(
            np.repeat(self.o_lags, n, axis=0),
            np.repeat(self.s_lags, n, axis=0),
            np.repeat(self.a_lags, n, axis=0),
            np.repeat(self.s_sum, n, axis=0),
            self.t,
        )


def _history_state(gt: SyntheticGroundTruth, n: int, t: int) -> _RolloutState:
    """State of patient ``n`` after observing step ``t`` (1-based) and before choosing a_t."""
    p = gt.config.p
    i = p + t - 1
    o_lags = gt.o[n, i - p + 1 : i + 1][::-1][None]
    s_lags = gt.s[n, i - p + 1 : i + 1][::-1][None]
    a_all = np.zeros(p + gt.config.T + 1)
    a_all[p : p + gt.config.T] = action_scalar(gt.actions[n], gt.config.n_actions)
    # a_{t-1}, ..., a_{t-p}
    a_lags = a_all[i - p : i][::-1][None].copy()
    s_sum = gt.s[n, p : i + 1].sum(axis=0)[None]
    return _RolloutState(o_lags, s_lags, a_lags, s_sum, t)


def _advance(st: _RolloutState, a: np.ndarray, coef: Coefficients) -> None:
    """Apply action scalars ``a`` (B,) at step st.t and move to st.t + 1 (noise at its mean)."""
    a_lags = np.concatenate([a[:, None], st.a_lags[:, :-1]], axis=1)
    o_new = autoregressive_step(st.o_lags, a_lags, coef.alpha, coef.beta)
    s_new = autoregressive_step(st.s_lags, a_lags, coef.mu, coef.upsilon)
    st.o_lags = np.concatenate([o_new[:, None], st.o_lags[:, :-1]], axis=1)
    st.s_lags = np.concatenate([s_new[:, None], st.s_lags[:, :-1]], axis=1)
    st.a_lags = a_lags
    st.s_sum = st.s_sum + s_new
    st.t += 1


def _final_outcome(st: _RolloutState, coef: Coefficients) -> np.ndarray:
    q = st.s_sum / st.t + st.o_lags[:, 0] @ coef.G.T
    return q @ coef.w + coef.b


def _rollout_constant(st: _RolloutState, a_values: np.ndarray, T: int, coef: Coefficients) -> np.ndarray:
    """Outcome for each state in ``st`` when every remaining action equals its ``a_values`` entry."""
    st = st.copy()
    while st.t <= T:
        _advance(st, a_values, coef)
    return _final_outcome(st, coef)


def oracle_action_rollout(gt: SyntheticGroundTruth, n: int, t: int) -> int:
    """Reference oracle: explicit rollouts for every candidate at step ``t`` (1-based)."""
    if gt.coef is None:
        raise ValidationError("oracle requires synthetic ground truth")
    cfg, coef = gt.config, gt.coef
    n_act = cfg.n_actions
    a_vals = action_scalar(np.arange(n_act), n_act)
    st = _history_state(gt, n, t).repeat(n_act)
    _advance(st, a_vals, coef)
    while st.t <= cfg.T:
        # greedy step for each candidate branch: score all constant continuations
        B = st.s_sum.shape[0]
        branch = st.repeat(n_act)
        ys = _rollout_constant(branch, np.tile(a_vals, B), cfg.T, coef).reshape(B, n_act)
        greedy = np.argmin(ys, axis=1)
        _advance(st, a_vals[greedy], coef)
    y = _final_outcome(st, coef)
    return int(np.argmin(y))


def outcome_sensitivity(config: SyntheticConfig, coef: Coefficients) -> np.ndarray:
    """d y / d a_t for t = 1..T under the noise-free linear dynamics."""
    p, T = config.p, config.T
    out = np.zeros(T)
    for t in range(1, T + 1):
        st = _RolloutState(
            np.zeros((1, p, config.dim_o)), np.zeros((1, p, config.dim_s)), np.zeros((1, p)), np.zeros((1, config.dim_s)), t
        )
        zero = st.copy()
        _advance(st, np.ones(1), coef)
        _advance(zero, np.zeros(1), coef)
        while st.t <= T:
            _advance(st, np.zeros(1), coef)
            _advance(zero, np.zeros(1), coef)
        out[t - 1] = (_final_outcome(st, coef) - _final_outcome(zero, coef))[0]
    return out


def oracle_actions(gt: SyntheticGroundTruth) -> np.ndarray:
    """Memoized oracle for the whole cohort.

    The mean dynamics are linear in the action scalars, so each candidate's final
    outcome is a patient-specific constant plus sensitivity_t * a; the future greedy
    choices add the same constant to every candidate. The argmin is therefore
    shared by all patients at a given step.
    """
    cfg = gt.config
    a_vals = action_scalar(np.arange(cfg.n_actions), cfg.n_actions)
    sens = outcome_sensitivity(cfg, gt.coef)
    best = np.array([int(np.argmin(c * a_vals)) for c in sens], np.int64)
    return np.broadcast_to(best, (len(gt.patient_ids), cfg.T)).copy()


def oracle_optimal_action(gt: SyntheticGroundTruth | None, n: int, t: int) -> ActionTriple:
    if gt is None or gt.oracle is None:
        raise ValidationError("oracle requires synthetic ground truth")
    return unflatten(int(gt.oracle[n, t - 1]), gt.config.num_levels)
