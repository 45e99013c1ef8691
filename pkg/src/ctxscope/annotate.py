"""Context-dependency scoring, indicator annotation, preprocessing and corpus stats."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyResponse, MissingScores, NoUserTokens
from .probe import default_probe_layer
from .tokenizer import USER_ROLES, Role, Turn, load_template, render, role_mask

DEFAULT_BETA = 0.6
DEFAULT_TRUNCATION = 4096

DEFAULT_REFUSALS = (
    r"\bI'?m sorry\b",
    r"\bI am sorry\b",
    r"\bI apologi[sz]e\b",
    r"\bas an AI( language model)?\b",
    r"\bI (cannot|can't|can not) (help|assist|fulfill|comply|provide)\b",
    r"\bI'?m (not able|unable) to (help|assist|provide)\b",
)


@dataclass
class DependencyRecord:
    conv_id: str
    turn: int
    score: float | None
    layer: int
    annotated: bool = False
    truncated: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "DependencyRecord":
        return cls(str(obj["conv_id"]), int(obj["turn"]), obj["score"], int(obj["layer"]),
                   bool(obj.get("annotated", False)), bool(obj.get("truncated", False)))


@dataclass(frozen=True)
class AnnotationConfig:
    beta: float = DEFAULT_BETA
    layer: int | None = None
    head_mode: str = "per-token-max"
    head: int | None = None

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.head_mode not in ("per-token-max", "fixed-head"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")


def dependency_score(record, seq, turn: int, layer: int, head_mode: str = "per-token-max",
                     head: int | None = None) -> float:
    """Mean over the turn's response tokens of the head-maximal attention mass
    those tokens put on user tokens of turns 1..turn.

    ``head_mode="fixed-head"`` uses one head instead of the per-token max:
    ``head`` if given, else the head with most user mass at the last token
    before the response.
    """
    w = record.weights if hasattr(record, "weights") else np.asarray(record)
    T = w.shape[-1]
    resp = np.flatnonzero((seq.roles[:T] == Role.ASSISTANT) & (seq.turn_index[:T] == turn))
    if resp.size == 0:
        raise EmptyResponse(f"turn {turn} has no response tokens")
    user = role_mask(seq, USER_ROLES, up_to_turn=turn)[:T]
    if not user[:resp[0]].any():
        raise NoUserTokens(f"no user token precedes turn {turn}")
    mass = w[layer][:, resp, :][..., user].sum(-1)  # (heads, response tokens)
    if head_mode == "per-token-max":
        return float(mass.max(0).mean())
    if head is None:
        probe = w[layer][:, resp[0] - 1, :][:, user].sum(-1)
        head = int(np.argmax(probe))
    return float(mass[head].mean())


def _score_one(model, conv, template, layers, head_mode, head):
    seq = render(conv, template)
    limit = model.config.max_seq_len
    truncated = len(seq) > limit
    if truncated:
        seq = seq.truncate(limit)
    _, rec = model.forward(seq.tokens, capture_attention=True)
    out = {l: [] for l in layers}
    for m in range(1, conv.n_pairs + 1):
        full = seq.roles == Role.ASSISTANT
        visible = bool((full & (seq.turn_index == m)).any())
        for l in layers:
            if visible:
                s = dependency_score(rec, seq, m, l, head_mode, head)
                cut = truncated and m == int(seq.turn_index.max())
                out[l].append(DependencyRecord(conv.id, m, s, l, truncated=cut))
            else:
                out[l].append(DependencyRecord(conv.id, m, None, l, truncated=True))
    return out


def score_dataset_layers(corpus, model, template="null", layers=None, head_mode="per-token-max",
                         head=None) -> dict:
    """Scores for several probe layers from one forward pass per conversation.

    Causal attention makes the rows of a turn identical whether the
    conversation is rendered through that turn or in full, so one pass over
    the full rendering serves every turn.
    """
    template = load_template(template)
    layers = list(layers) if layers is not None else [default_probe_layer(model.config.n_layers)]
    out = {l: [] for l in layers}
    for conv in corpus:
        for l, recs in _score_one(model, conv, template, layers, head_mode, head).items():
            out[l].extend(recs)
    for l in layers:
        out[l].sort(key=lambda r: (r.conv_id, r.turn))
    return out


def score_dataset(corpus, model, template="null", layer: int | None = None, head_mode="per-token-max",
                  head=None) -> list:
    """One record per assistant turn, ordered by (conversation id, turn).

    Conversations longer than the model context are truncated; turns whose
    response is cut are flagged, and turns with no visible response get a
    ``None`` score and are never annotated.
    """
    layer = default_probe_layer(model.config.n_layers) if layer is None else layer
    return score_dataset_layers(corpus, model, template, [layer], head_mode, head)[layer]


def annotate(corpus, records, beta: float = DEFAULT_BETA):
    """Set the indicator on user turn m exactly when its response scored above ``beta``.

    Returns ``(annotated corpus, updated records, ratio report)``.
    """
    by_id = {(r.conv_id, r.turn): r for r in records}
    new_records = []
    out = []
    for conv in corpus:
        turns = []
        m = 0
        for t in conv.turns:
            if t.role == "user":
                m += 1
                rec = by_id.get((conv.id, m))
                has_response = any(tt.role == "assistant" for tt in conv.turns[2 * m - 1:2 * m])
                if rec is None and has_response:
                    raise MissingScores(f"no score for conversation {conv.id!r} turn {m}")
                flag = rec is not None and rec.score is not None and rec.score > beta
                turns.append(Turn("user", t.text, flag))
                if rec is not None:
                    new_records.append(DependencyRecord(rec.conv_id, rec.turn, rec.score, rec.layer, flag,
                                                        rec.truncated))
            else:
                turns.append(t)
        out.append(conv.with_turns(turns))
    n = len(new_records)
    k = sum(r.annotated for r in new_records)
    report = {"beta": beta, "n_instructions": n, "n_annotated": k, "ratio": k / n if n else 0.0}
    return out, new_records, report


def ratio_from_scores(records, beta: float) -> dict:
    n = len(records)
    k = sum(1 for r in records if r.score is not None and r.score > beta)
    return {"beta": beta, "n_instructions": n, "n_annotated": k, "ratio": k / n if n else 0.0}


def write_scores(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_scores(path) -> list:
    with open(path) as f:
        return [DependencyRecord.from_json(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------- preprocessing

@dataclass
class PreprocessStats:
    n_conversations_in: int = 0
    n_conversations: int = 0
    n_instructions: int = 0
    n_refusals_removed: int = 0
    n_orphans_removed: int = 0
    avg_conversation_length: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def preprocess(corpus, refusal_patterns=DEFAULT_REFUSALS, template="null"):
    """Clean a raw corpus into strictly alternating user/assistant pairs.

    Assistant turns without a preceding instruction are dropped, refusals are
    dropped together with their instruction, a user turn not answered before
    the next user turn is dropped, and conversations left empty disappear.
    Applying it twice is the same as applying it once.
    """
    pats = [re.compile(p, re.IGNORECASE) for p in refusal_patterns]
    stats = PreprocessStats(n_conversations_in=len(corpus))
    out = []
    for conv in corpus:
        pairs = []
        pending = None
        for t in conv.turns:
            if t.role == "user":
                if pending is not None:
                    stats.n_orphans_removed += 1
                pending = t
            elif pending is None:
                stats.n_orphans_removed += 1
            elif any(p.search(t.text) for p in pats):
                stats.n_refusals_removed += 1
                pending = None
            else:
                pairs.extend([pending, Turn("assistant", t.text)])
                pending = None
        if pending is not None:
            stats.n_orphans_removed += 1
        if pairs:
            out.append(conv.with_turns(pairs))
    stats.n_conversations = len(out)
    stats.n_instructions = sum(c.n_pairs for c in out)
    tmpl = load_template(template)
    if out:
        stats.avg_conversation_length = float(np.mean([len(render(c, tmpl)) for c in out]))
    return out, stats


def render_corpus(corpus, template, max_tokens: int = DEFAULT_TRUNCATION):
    """Render for training, right-truncated to ``max_tokens``; also returns the truncation count."""
    template = load_template(template)
    seqs, n_cut = [], 0
    for c in corpus:
        s = render(c, template)
        if len(s) > max_tokens:
            s = s.truncate(max_tokens)
            n_cut += 1
        seqs.append(s)
    return seqs, n_cut


# ---------------------------------------------------------------- statistics

@dataclass
class DatasetStats:
    n_conversations: int
    n_instructions: int
    avg_conversation_length: float
    avg_instruction_length: float
    n_annotated: int
    avg_annotated_length: float
    bin_width: int
    histogram: list = field(default_factory=list)  # (bin_start, bin_end, original, annotated)

    def to_json(self) -> dict:
        d = asdict(self)
        d["histogram"] = [list(h) for h in self.histogram]
        return d

    def write_histogram(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_start", "bin_end", "original", "annotated"])
            w.writerows(self.histogram)


def dataset_stats(corpus, template="null", bin_width: int = 50) -> DatasetStats:
    """Counts and mean lengths in tokens, plus an instruction-length histogram
    for all instructions versus the indicator-flagged subset."""
    tmpl = load_template(template)
    lengths = [len(t.text.encode("utf-8")) for c in corpus for t in c.turns if t.role == "user"]
    flagged = [len(t.text.encode("utf-8")) for c in corpus for t in c.turns if t.role == "user" and t.indicator]
    conv_lens = [len(render(c, tmpl)) for c in corpus]
    hist = []
    if lengths:
        n_bins = max(lengths) // bin_width + 1
        orig = np.bincount(np.array(lengths) // bin_width, minlength=n_bins)
        ann = np.bincount(np.array(flagged, dtype=np.int64) // bin_width, minlength=n_bins)
        hist = [(i * bin_width, (i + 1) * bin_width, int(orig[i]), int(ann[i])) for i in range(n_bins)]
    return DatasetStats(
        n_conversations=len(corpus),
        n_instructions=sum(1 for c in corpus for t in c.turns if t.role == "user"),
        avg_conversation_length=float(np.mean(conv_lens)) if conv_lens else 0.0,
        avg_instruction_length=float(np.mean(lengths)) if lengths else 0.0,
        n_annotated=len(flagged),
        avg_annotated_length=float(np.mean(flagged)) if flagged else 0.0,
        bin_width=bin_width,
        histogram=hist,
    )
