"""Patient trajectories, the ventilator action space, value bins and cohort splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .atomic import atomic_write_text

LEVELS = 7
N_ACTIONS = LEVELS**3
DEFAULT_V = 20
N_FOLDS = 10

# Upper edges of bins 1..6; values at an edge belong to the upper bin.
VT_EDGES = (2.5, 5.0, 7.5, 10.0, 12.5, 15.0)
PEEP_EDGES = (5.0, 7.0, 9.0, 11.0, 13.0, 15.0)
FIO2_EDGES = (30.0, 35.0, 40.0, 45.0, 50.0, 55.0)

TRAJECTORY_FORMAT = "dacrl-trajectories"
TRAJECTORY_VERSION = 1


class ValidationError(ValueError):
    """Input rejected by a data contract."""


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True, order=True)
class ActionTriple:
    vt_level: int
    peep_level: int
    fio2_level: int
    levels: int = field(default=LEVELS, compare=False, repr=False)

    def __post_init__(self):
        for name in ("vt_level", "peep_level", "fio2_level"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 1 <= v <= self.levels:
                raise ValidationError(f"{name}={v!r} outside [1, {self.levels}]")

    def as_tuple(self) -> tuple[int, int, int]:
        return (int(self.vt_level), int(self.peep_level), int(self.fio2_level))


def _level(value: float, edges: Sequence[float]) -> int:
    return int(np.searchsorted(edges, value, side="right")) + 1


def discretize_action(vt: float, peep: float, fio2: float) -> ActionTriple:
    """Map raw ventilator settings (mL/kg, cmH2O, %) to their 1..7 levels."""
    raw = (vt, peep, fio2)
    for name, v in zip(("vt", "peep", "fio2"), raw):
        if not math.isfinite(v) or v < 0:
            raise ValidationError(f"{name}={v!r} must be finite and >= 0")
    return ActionTriple(_level(vt, VT_EDGES), _level(peep, PEEP_EDGES), _level(fio2, FIO2_EDGES))


def flat_index(a: ActionTriple | Sequence[int], levels: int = LEVELS) -> int:
    """Row-major index with Vt most significant and FiO2 least."""
    vt, peep, fio2 = a.as_tuple() if isinstance(a, ActionTriple) else a
    for v in (vt, peep, fio2):
        if not 1 <= v <= levels:
            raise ValidationError(f"level {v} outside [1, {levels}]")
    return ((vt - 1) * levels + (peep - 1)) * levels + (fio2 - 1)


def unflatten(i: int, levels: int = LEVELS) -> ActionTriple:
    n = levels**3
    if not 0 <= i < n:
        raise ValidationError(f"flat index {i} outside [0, {n - 1}]")
    i = int(i)
    return ActionTriple(i // (levels * levels) + 1, (i // levels) % levels + 1, i % levels + 1, levels)


def flat_to_levels(flat: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    """Vectorized unflatten: (...,) ints -> (..., 3) levels in [1, levels]."""
    flat = np.asarray(flat)
    return np.stack(
        [flat // (levels * levels) + 1, (flat // levels) % levels + 1, flat % levels + 1], axis=-1
    )


def levels_to_flat(lv: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    lv = np.asarray(lv)
    return ((lv[..., 0] - 1) * levels + (lv[..., 1] - 1)) * levels + (lv[..., 2] - 1)


class Change(IntEnum):
    DECREASE = -1
    KEEP = 0
    INCREASE = 1


N_CHANGE_CLASSES = 27
INITIAL_CODE = 27


@dataclass(frozen=True)
class ChangeClass:
    """Per-parameter direction of a setting change; ``deltas is None`` marks the first step."""

    deltas: tuple[Change, Change, Change] | None

    @property
    def is_initial(self) -> bool:
        return self.deltas is None

    @property
    def code(self) -> int:
        if self.deltas is None:
            return INITIAL_CODE
        d = [int(c) + 1 for c in self.deltas]
        return d[0] * 9 + d[1] * 3 + d[2]

    @classmethod
    def from_code(cls, code: int) -> "ChangeClass":
        if code == INITIAL_CODE:
            return cls(None)
        if not 0 <= code < N_CHANGE_CLASSES:
            raise ValidationError(f"change code {code} outside [0, 27]")
        return cls((Change(code // 9 - 1), Change((code // 3) % 3 - 1), Change(code % 3 - 1)))


INITIAL = ChangeClass(None)


def action_change(prev: ActionTriple | None, cur: ActionTriple) -> ChangeClass:
    if not isinstance(cur, ActionTriple):
        raise ValidationError("cur must be an ActionTriple")
    if prev is None:
        return INITIAL
    return ChangeClass(
        tuple(Change(int(np.sign(c - p))) for p, c in zip(prev.as_tuple(), cur.as_tuple()))
    )


def change_codes(actions: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    """Change-class codes for (N, T) flat actions; column 0 is INITIAL."""
    lv = flat_to_levels(actions, levels)
    sign = np.sign(np.diff(lv, axis=1)) + 1
    codes = np.full(actions.shape, INITIAL_CODE, dtype=np.int64)
    codes[:, 1:] = sign[..., 0] * 9 + sign[..., 1] * 3 + sign[..., 2]
    return codes


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class ObservationEvent:
    variable_id: int
    value: float
    subrange: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValidationError(f"non-finite value for variable {self.variable_id}")


@dataclass(frozen=True)
class Step:
    events: tuple[ObservationEvent, ...]
    action: ActionTriple


@dataclass(frozen=True)
class PatientTrajectory:
    patient_id: str
    steps: tuple[Step, ...]
    outcome: int

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValidationError(f"patient {self.patient_id}: empty trajectory")
        if self.outcome not in (0, 1):
            raise ValidationError(f"patient {self.patient_id}: outcome must be 0 or 1")
        for t, step in enumerate(self.steps):
            if not step.events:
                raise ValidationError(f"patient {self.patient_id}: step {t + 1} has no events")

    @property
    def length(self) -> int:
        return len(self.steps)


def write_trajectories(
    path: str | Path, trajectories: Iterable[PatientTrajectory], meta: Mapping | None = None
) -> None:
    """Line-delimited JSON, one patient per line after a versioned header."""
    header = {"format": TRAJECTORY_FORMAT, "version": TRAJECTORY_VERSION, **(meta or {})}
    lines = [json.dumps(header, sort_keys=True)]
    for tr in trajectories:
        rec = {
            "patient_id": tr.patient_id,
            "outcome": int(tr.outcome),
            "steps": [
                {
                    "events": [{"var": e.variable_id, "value": e.value} for e in s.events],
                    "action": list(s.action.as_tuple()),
                }
                for s in tr.steps
            ],
        }
        lines.append(json.dumps(rec))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajectories(path: str | Path) -> tuple[list[PatientTrajectory], dict]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TRAJECTORY_FORMAT:
            raise ValidationError(f"{path}: not a trajectory file")
        if header.get("version") != TRAJECTORY_VERSION:
            raise ValidationError(f"{path}: unsupported version {header.get('version')}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps = tuple(
                Step(
                    tuple(ObservationEvent(int(e["var"]), float(e["value"])) for e in s["events"]),
                    ActionTriple(*(int(x) for x in s["action"])),
                )
                for s in rec["steps"]
            )
            out.append(PatientTrajectory(str(rec["patient_id"]), steps, int(rec["outcome"])))
    return out, header


# ---------------------------------------------------------------------------
# Value sub-ranges


@dataclass(frozen=True)
class ValueBins:
    """Equal-frequency edges per variable, fit on training data only."""

    edges: dict[int, np.ndarray]
    V: int

    def n_bins(self, variable_id: int) -> int:
        return len(self._edges(variable_id)) + 1

    def _edges(self, variable_id: int) -> np.ndarray:
        try:
            return self.edges[variable_id]
        except KeyError:
            raise ValidationError(f"unknown variable_id {variable_id}") from None

    def to_json(self) -> dict:
        return {"V": self.V, "edges": {str(k): v.tolist() for k, v in sorted(self.edges.items())}}

    @classmethod
    def from_json(cls, d: Mapping) -> "ValueBins":
        return cls({int(k): np.asarray(v, float) for k, v in d["edges"].items()}, int(d["V"]))


def equal_frequency_edges(values: np.ndarray, V: int) -> np.ndarray:
    x = np.sort(np.asarray(values, float))
    n = len(x)
    if n == 0 or V <= 1:
        return np.empty(0)
    cuts = []
    for i in range(1, V):
        pos = int(round(i * n / V))
        if 0 < pos < n:
            cuts.append(0.5 * (x[pos - 1] + x[pos]))
    edges = np.unique(np.asarray(cuts))
    # an edge at the minimum would leave bin 1 empty
    return edges[edges > x[0]]


def fit_value_bins(trajectories: Iterable[PatientTrajectory], V: int = DEFAULT_V) -> ValueBins:
    if V < 1:
        raise ValidationError("V must be >= 1")
    per_var: dict[int, list[float]] = {}
    for tr in trajectories:
        for step in tr.steps:
            for e in step.events:
                per_var.setdefault(e.variable_id, []).append(e.value)
    return ValueBins({k: equal_frequency_edges(np.asarray(v), V) for k, v in per_var.items()}, V)


def discretize_value(variable_id: int, value: float, bins: ValueBins) -> int:
    """Sub-range in [1, n_bins]; values outside the training range clamp to the end bins."""
    return int(np.searchsorted(bins._edges(variable_id), value, side="right")) + 1


def discretize_array(var_ids: np.ndarray, values: np.ndarray, mask: np.ndarray, bins: ValueBins) -> np.ndarray:
    """Vectorized ``discretize_value``; masked-out slots get sub-range 1."""
    sub = np.ones(var_ids.shape, np.int64)
    for var in np.unique(var_ids[mask]):
        sel = mask & (var_ids == var)
        sub[sel] = np.searchsorted(bins._edges(int(var)), values[sel], side="right") + 1
    return sub


def discretize_trajectory(tr: PatientTrajectory, bins: ValueBins) -> PatientTrajectory:
    steps = tuple(
        Step(
            tuple(
                ObservationEvent(e.variable_id, e.value, discretize_value(e.variable_id, e.value, bins))
                for e in s.events
            ),
            s.action,
        )
        for s in tr.steps
    )
    return PatientTrajectory(tr.patient_id, steps, tr.outcome)


# ---------------------------------------------------------------------------
# Cohort splits


@dataclass(frozen=True)
class CohortSplit:
    folds: dict[str, int]

    def fold_members(self, fold: int) -> list[str]:
        return [pid for pid, f in self.folds.items() if f == fold]

    def designate(self, run: int = 0) -> dict[str, list[str]]:
        """Run ``run`` tests on folds run, run+1, validates on run+2, trains on the other seven."""
        test = {run % N_FOLDS, (run + 1) % N_FOLDS}
        val = {(run + 2) % N_FOLDS}
        out = {"train": [], "validation": [], "test": []}
        for pid, f in self.folds.items():
            key = "test" if f in test else "validation" if f in val else "train"
            out[key].append(pid)
        return out

    def to_json(self) -> dict:
        return {"n_folds": N_FOLDS, "folds": dict(sorted(self.folds.items()))}

    @classmethod
    def from_json(cls, d: Mapping) -> "CohortSplit":
        return cls({str(k): int(v) for k, v in d["folds"].items()})


def split_cohort(patient_ids: Sequence[str], seed: int) -> CohortSplit:
    ids = list(patient_ids)
    if len(ids) < N_FOLDS:
        raise ValidationError(f"need at least {N_FOLDS} patients, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate patient ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    return CohortSplit({ids[j]: pos % N_FOLDS for pos, j in enumerate(order)})


# ---------------------------------------------------------------------------
# Dense packing for the learned models


@dataclass
class CohortArrays:
    """Padded arrays for a list of discretized trajectories.

    var_ids, subranges, event_mask have shape (N, T, E); actions and step_mask (N, T);
    outcome (N,). Padding uses variable 0 / sub-range 1 with mask False.
    """

    patient_ids: list[str]
    var_ids: np.ndarray
    subranges: np.ndarray
    event_mask: np.ndarray
    actions: np.ndarray
    step_mask: np.ndarray
    outcome: np.ndarray
    values: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.step_mask.sum(1)

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx) -> "CohortArrays":
        idx = np.asarray(idx)
        return CohortArrays(
            [self.patient_ids[i] for i in idx],
            self.var_ids[idx],
            self.subranges[idx],
            self.event_mask[idx],
            self.actions[idx],
            self.step_mask[idx],
            self.outcome[idx],
            None if self.values is None else self.values[idx],
        )

    def select_ids(self, ids: Iterable[str]) -> "CohortArrays":
        pos = {pid: i for i, pid in enumerate(self.patient_ids)}
        return self.subset([pos[p] for p in ids])


def pack_cohort(trajectories: Sequence[PatientTrajectory], bins: ValueBins, levels: int = LEVELS) -> CohortArrays:
    N = len(trajectories)
    T = max(tr.length for tr in trajectories)
    E = max(len(s.events) for tr in trajectories for s in tr.steps)
    var_ids = np.zeros((N, T, E), np.int64)
    vals = np.zeros((N, T, E))
    emask = np.zeros((N, T, E), bool)
    actions = np.zeros((N, T), np.int64)
    smask = np.zeros((N, T), bool)
    for n, tr in enumerate(trajectories):
        for t, step in enumerate(tr.steps):
            smask[n, t] = True
            actions[n, t] = flat_index(step.action, levels)
            for e, ev in enumerate(step.events):
                var_ids[n, t, e] = ev.variable_id
                vals[n, t, e] = ev.value
                emask[n, t, e] = True
    sub = discretize_array(var_ids, vals, emask, bins)
    outcome = np.array([tr.outcome for tr in trajectories], np.int64)
    return CohortArrays([tr.patient_id for tr in trajectories], var_ids, sub, emask, actions, smask, outcome, vals)
