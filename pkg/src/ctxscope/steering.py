"""Post-softmax attention steering toward user tokens, retrieval-head probing,
and the intervention-factor sweep."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRow, EmptyUserMask

DEFAULT_ALPHAS = (0.01, 0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True, eq=False)
class SteeringSpec:
    """Scale non-user attention by ``alpha`` on the ``targets`` (layer, head) pairs.

    ``user_mask`` marks key positions counted as user tokens. It may be left as
    ``None`` when handing the spec to :func:`ctxscope.model.generate`, which then
    derives it from the prompt's roles.
    """

    alpha: float
    targets: tuple
    user_mask: np.ndarray | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        object.__setattr__(self, "targets", tuple((int(l), int(h)) for l, h in self.targets))


def steer_row(row, user_mask, alpha: float) -> np.ndarray:
    """Re-weight one attention row: user entries keep their weight, the rest
    are multiplied by ``alpha``, then the row is renormalized."""
    row = np.asarray(row, dtype=np.float64)
    user_mask = np.asarray(user_mask, dtype=bool)
    if row.shape != user_mask.shape:
        raise ValueError("row and user_mask differ in shape")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return row.copy()
    user = row[user_mask].sum()
    other = row[~user_mask].sum()
    z = user + alpha * other
    if z == 0.0:
        raise DegenerateRow("row has no attention mass")
    if other == 0.0:
        return row.copy()
    return np.where(user_mask, row, alpha * row) / z


def steer_rows(rows, user_mask, alpha: float) -> np.ndarray:
    """Vectorized :func:`steer_row` over the last axis; ``user_mask`` broadcasts."""
    if alpha == 1.0:
        return np.array(rows, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    user_mask = np.broadcast_to(np.asarray(user_mask, dtype=bool), rows.shape)
    scaled = np.where(user_mask, rows, alpha * rows)
    z = scaled.sum(-1, keepdims=True)
    if np.any(z == 0.0):
        raise DegenerateRow("row has no attention mass")
    other = np.where(user_mask, 0.0, rows).sum(-1, keepdims=True)
    return np.where(other == 0.0, rows, scaled / z)


@dataclass(frozen=True)
class HeadSelection:
    heads: tuple  # heads[layer] = chosen head
    probe_id: str = ""
    probe_position: int = -1
    user_mass: tuple = field(default=(), compare=False)

    def targets(self, layers=None):
        layers = range(len(self.heads)) if layers is None else layers
        return tuple((l, self.heads[l]) for l in layers)

    def to_json(self) -> dict:
        return {"heads": {str(l): h for l, h in enumerate(self.heads)}, "probe_id": self.probe_id,
                "probe_position": self.probe_position, "user_mass": list(self.user_mass)}

    @classmethod
    def from_json(cls, obj) -> "HeadSelection":
        heads = tuple(int(obj["heads"][str(l)]) for l in range(len(obj["heads"])))
        return cls(heads, obj.get("probe_id", ""), int(obj.get("probe_position", -1)),
                   tuple(obj.get("user_mass", ())))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "HeadSelection":
        with open(path) as f:
            return cls.from_json(json.load(f))


def select_heads(record, user_mask, query_position: int = -1, probe_id: str = "") -> HeadSelection:
    """Per layer, the head whose ``query_position`` row puts the most mass on
    user keys. Ties go to the lowest head index."""
    user_mask = np.asarray(user_mask, dtype=bool)
    if not user_mask.any():
        raise EmptyUserMask("probe prompt has no user tokens")
    w = record.weights if hasattr(record, "weights") else np.asarray(record)
    mass = w[:, :, query_position, :][..., user_mask].sum(-1)  # (layers, heads)
    heads = tuple(int(np.argmax(row)) for row in mass)  # argmax returns first maximum
    pos = query_position if query_position >= 0 else w.shape[2] + query_position
    return HeadSelection(heads, probe_id, int(pos), tuple(float(mass[l, h]) for l, h in enumerate(heads)))


def probe_heads(model, seq, probe_id: str = "") -> HeadSelection:
    """Run ``seq`` with capture and select heads at its last token."""
    _, record = model.forward(seq.tokens, capture_attention=True)
    return select_heads(record, seq.user_mask(), -1, probe_id)


@dataclass
class SweepResult:
    best_alpha: float
    recall: dict  # alpha -> mean recall
    reports: dict = field(default_factory=dict, repr=False)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["alpha", "mean_recall", "mean_err"])
            for a, r in self.recall.items():
                w.writerow([repr(a), repr(r), repr(1.0 - r)])


def sweep_alpha(model, cases, alphas=DEFAULT_ALPHAS, selection: HeadSelection | None = None,
                generation_len: int = 50, layers=None) -> SweepResult:
    """Evaluate NIH mean recall for each intervention factor; return the best.

    Duplicate alphas are evaluated once; ties keep the earliest alpha in the
    given order.
    """
    from .nih import run_nih

    if not cases:
        raise ValueError("empty NIH grid")
    alphas = list(dict.fromkeys(float(a) for a in alphas))
    recall, reports = {}, {}
    for a in alphas:
        steering = None
        if a != 1.0:
            if selection is None:
                raise ValueError("a head selection is required for alpha < 1")
            steering = SteeringSpec(a, selection.targets(layers))
        rep = run_nih(model, cases, generation_len=generation_len, steering=steering)
        recall[a], reports[a] = rep.mean_recall, rep
    best = max(alphas, key=lambda a: (recall[a], -alphas.index(a)))
    return SweepResult(best, recall, reports)
