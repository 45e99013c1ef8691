"""Role-wise attention allocation, template-vs-null deltas and layer agreement."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MismatchedTurnSets
from .steering import HeadSelection, select_heads
from .tokenizer import ASSISTANT_SIDE, USER_ROLES, Role, TemplateSpec, load_template, render


def default_probe_layer(n_layers: int) -> int:
    return n_layers // 2


@dataclass(frozen=True)
class AllocationBreakdown:
    user: float
    assistant: float
    bos: float
    raw: dict = field(compare=False)  # Role -> unnormalized share
    renormalized: bool = False


def allocation(record, seq, layer: int, head: int, query_position: int = -1) -> AllocationBreakdown:
    """Split one attention row by role class.

    When the sequence contains template tokens their mass is dropped and the
    user / assistant / BOS shares are renormalized to sum to 1. Indicator
    tokens count as user; response-prefix tokens count as assistant.
    """
    w = record.weights if hasattr(record, "weights") else np.asarray(record)
    row = w[layer, head, query_position, :len(seq)]
    roles = seq.roles[:len(row)]
    raw = {r: float(row[roles == int(r)].sum()) for r in Role}
    user = sum(raw[r] for r in USER_ROLES)
    asst = sum(raw[r] for r in ASSISTANT_SIDE)
    bos = raw[Role.BOS]
    templated = bool((roles == int(Role.TEMPLATE)).any())
    if templated:
        z = user + asst + bos
        user, asst, bos = user / z, asst / z, bos / z
    return AllocationBreakdown(user, asst, bos, raw, templated)


def _null_like(template: TemplateSpec) -> TemplateSpec:
    return TemplateSpec.null(response_prefix=template.response_prefix, bos_text=template.bos_text)


@dataclass
class DeltaRow:
    case_id: str
    layer: int
    head: int
    templated: AllocationBreakdown
    null: AllocationBreakdown

    @property
    def d_user(self) -> float:
        return self.templated.user - self.null.user

    @property
    def d_assistant(self) -> float:
        return self.templated.assistant - self.null.assistant


def allocation_delta_row(model, conv, template, layer: int, head: int | None = None,
                         include_response_prefix: bool = False, case_id: str = "") -> DeltaRow:
    """Allocation on the templated and null renders of ``conv``.

    With ``head=None`` the head is chosen on the null render at its last token.
    """
    template = load_template(template)
    seq_t = render(conv, template, include_response_prefix)
    seq_n = render(conv, _null_like(template), include_response_prefix)
    _, rec_n = model.forward(seq_n.tokens, capture_attention=True)
    if head is None:
        head = select_heads(rec_n, seq_n.user_mask()).heads[layer]
    _, rec_t = model.forward(seq_t.tokens, capture_attention=True)
    return DeltaRow(case_id or conv.id, layer, head, allocation(rec_t, seq_t, layer, head),
                    allocation(rec_n, seq_n, layer, head))


def allocation_delta(model, conv, template, selection: HeadSelection | None, layer: int,
                     include_response_prefix: bool = False) -> tuple[float, float]:
    """(templated - null) user and assistant shares on the selected head of ``layer``."""
    head = selection.heads[layer] if selection is not None else None
    row = allocation_delta_row(model, conv, template, layer, head, include_response_prefix)
    return row.d_user, row.d_assistant


def allocation_deltas(model, convs, template, layer: int, selection: HeadSelection | None = None,
                      include_response_prefix: bool = False) -> tuple[list, float, float]:
    """Per-case rows plus the mean deltas over all cases, in input order."""
    rows = [allocation_delta_row(model, c, template, layer,
                                 selection.heads[layer] if selection is not None else None,
                                 include_response_prefix) for c in convs]
    if not rows:
        return rows, 0.0, 0.0
    return rows, float(np.mean([r.d_user for r in rows])), float(np.mean([r.d_assistant for r in rows]))


def write_allocation_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "layer", "head", "user", "assistant", "bos", "null_user", "null_assistant",
                    "null_bos", "d_user", "d_assistant"])
        for r in rows:
            w.writerow([r.case_id, r.layer, r.head, repr(r.templated.user), repr(r.templated.assistant),
                        repr(r.templated.bos), repr(r.null.user), repr(r.null.assistant), repr(r.null.bos),
                        repr(r.d_user), repr(r.d_assistant)])


def top_set(records, top_fraction: float) -> set:
    """Ids ``(conv_id, turn)`` of the ceil(fraction * N) highest scores; ties by ascending id."""
    items = sorted(((r.conv_id, r.turn), r.score) for r in records)
    k = math.ceil(top_fraction * len(items) - 1e-9)
    ranked = sorted(items, key=lambda it: (-it[1], it[0]))
    return {tid for tid, _ in ranked[:k]}


def layer_agreement(scores: dict, top_fraction: float = 0.1):
    """Pairwise disagreement between per-layer top sets.

    ``scores`` maps layer -> list of records with ``conv_id``, ``turn`` and
    ``score``. Returns ``(layers, matrix)`` where ``matrix[i, j]`` is
    ``|top_i - top_j| / |top_i|``.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    layers = sorted(scores)
    ids = None
    for l in layers:
        cur = sorted((r.conv_id, r.turn) for r in scores[l])
        if ids is None:
            ids = cur
        elif cur != ids:
            raise MismatchedTurnSets(f"layer {l} scored a different set of turns")
    tops = {l: top_set(scores[l], top_fraction) for l in layers}
    n = len(layers)
    mat = np.zeros((n, n))
    for i, a in enumerate(layers):
        for j, b in enumerate(layers):
            if tops[a]:
                mat[i, j] = len(tops[a] - tops[b]) / len(tops[a])
    return layers, mat


def write_agreement_csv(path, layers, mat) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer"] + list(layers))
        for l, row in zip(layers, mat):
            w.writerow([l] + [repr(float(x)) for x in row])
