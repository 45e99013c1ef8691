"""Needle-in-a-haystack cases, keyword recall and the grid runner."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import EmptyKeywordSet, HaystackTooShort, InvalidGrid, SequenceTooLong
from .steering import SteeringSpec
from .tokenizer import (DEFAULT_TOKENIZER, AnnotatedSequence, Conversation, TemplateSpec, Turn, detokenize,
                        load_template, render, tokenize)

DEFAULT_NEEDLE = "The code for the blue lantern is 4817."
DEFAULT_QUESTION = "What is the code for the blue lantern?"
DEFAULT_KEYWORDS = ("4817",)


@lru_cache(maxsize=None)
def default_haystack() -> str:
    text = resources.files("ctxscope.data").joinpath("haystack.txt").read_text(encoding="utf-8")
    return " ".join(text.split())


@lru_cache(maxsize=None)
def prompt_styles() -> dict:
    return json.loads(resources.files("ctxscope.data").joinpath("prompts.json").read_text())


@dataclass(frozen=True)
class NihCase:
    context_len: int
    depth: float
    needle: str
    question: str
    keywords: tuple
    template: str = "null"
    response_prefix: bool = False
    prompt_style: str = "document"
    indicator: bool = False

    def __post_init__(self):
        object.__setattr__(self, "keywords", tuple(self.keywords))
        if not 0.0 <= self.depth <= 1.0:
            raise InvalidGrid(f"depth {self.depth} outside [0, 1]")
        if not self.keywords:
            raise EmptyKeywordSet("NIH case needs at least one keyword")
        if self.context_len < len(tokenize(self.needle)):
            raise InvalidGrid(f"context_len {self.context_len} shorter than the needle")

    @property
    def case_id(self) -> str:
        return f"L{self.context_len}_D{self.depth:.4f}"


def insertion_offset(context_len: int, needle_len: int, depth: float) -> int:
    return math.floor(depth * (context_len - needle_len))


def build_context(haystack: str, context_len: int, depth: float, needle: str,
                  spec=DEFAULT_TOKENIZER) -> tuple[str, int]:
    """Filler cut to ``context_len - |needle|`` tokens with the needle spliced in.

    The needle is joined to its neighbours by single spaces (none at the
    boundaries). Returns the context text and the needle's token offset in it.
    """
    hay = tokenize(haystack, spec)
    nd = tokenize(needle, spec)
    n_fill = context_len - len(nd)
    if n_fill < 0:
        raise InvalidGrid("context_len shorter than the needle")
    if len(hay) < n_fill:
        raise HaystackTooShort(f"haystack has {len(hay)} tokens, need {n_fill}")
    off = insertion_offset(context_len, len(nd), depth)
    left, right = hay[:off], hay[off:n_fill]
    sp = tokenize(" ", spec)
    ids = left + (sp if left else []) + nd + (sp if right else []) + right
    start = len(left) + (1 if left else 0)
    return detokenize(ids, spec).decode("utf-8", errors="replace"), start


def case_conversation(case: NihCase, haystack: str | None = None, spec=DEFAULT_TOKENIZER) -> Conversation:
    context, _ = build_context(haystack if haystack is not None else default_haystack(),
                               case.context_len, case.depth, case.needle, spec)
    prompt = prompt_styles()["nih"][case.prompt_style].format(context=context, question=case.question)
    return Conversation(case.case_id, (Turn("user", prompt, case.indicator),))


def build_case(haystack: str | None, context_len: int, depth: float, needle: str = DEFAULT_NEEDLE,
               question: str = DEFAULT_QUESTION, template="null", response_prefix: bool = False,
               keywords=DEFAULT_KEYWORDS, prompt_style: str = "document", indicator: bool = False,
               spec=DEFAULT_TOKENIZER) -> tuple[AnnotatedSequence, NihCase]:
    """Construct and render one NIH test."""
    tmpl = load_template(template)
    case = NihCase(context_len, float(depth), needle, question, tuple(keywords), tmpl.name,
                   response_prefix, prompt_style, indicator)
    seq = render_case(case, haystack, tmpl, spec)
    return seq, case


def render_case(case: NihCase, haystack: str | None = None, template: TemplateSpec | None = None,
                spec=DEFAULT_TOKENIZER) -> AnnotatedSequence:
    tmpl = template or load_template(case.template)
    return render(case_conversation(case, haystack, spec), tmpl, case.response_prefix, spec)


def grid_lengths(min_len: int, max_len: int, n_lens: int) -> list[int]:
    if n_lens == 1:
        return [min_len]
    step = (max_len - min_len) / (n_lens - 1)
    return [math.floor(min_len + i * step + 0.5) for i in range(n_lens)]


def grid_depths(n_depths: int) -> list[float]:
    if n_depths == 1:
        return [0.0]
    return [j / (n_depths - 1) for j in range(n_depths)]


def build_grid(min_len: int = 200, max_len: int = 4000, n_lens: int = 20, n_depths: int = 20,
               needle: str = DEFAULT_NEEDLE, question: str = DEFAULT_QUESTION, keywords=DEFAULT_KEYWORDS,
               template: str = "null", response_prefix: bool = False, prompt_style: str = "document",
               indicator: bool = False) -> list[NihCase]:
    """Cases over ``n_lens`` evenly spaced context lengths and ``n_depths`` depths.

    A single-length grid uses ``min_len``; a single-depth grid uses depth 0.
    """
    if n_lens < 1 or n_depths < 1:
        raise InvalidGrid("n_lens and n_depths must be >= 1")
    if n_lens > 1 and not max_len > min_len:
        raise InvalidGrid("max_len must exceed min_len")
    lengths = grid_lengths(min_len, max_len, n_lens)
    if len(set(lengths)) != len(lengths):
        raise InvalidGrid("context lengths collide after rounding; use fewer lengths")
    return [NihCase(L, d, needle, question, tuple(keywords), template, response_prefix, prompt_style, indicator)
            for L in lengths for d in grid_depths(n_depths)]


def recall(output_tokens, keywords, window: int = 100, spec=DEFAULT_TOKENIZER) -> float:
    """Fraction of keywords found as substrings of the first ``window`` output tokens."""
    keywords = list(keywords)
    if not keywords:
        raise EmptyKeywordSet("keyword set is empty")
    text = detokenize(list(output_tokens)[:window], spec)
    return sum(1 for w in keywords if w.encode("utf-8") in text) / len(keywords)


@dataclass
class CellResult:
    context_len: int
    depth: float
    recall: float
    failed: bool = False
    output: str = ""

    @property
    def err(self) -> float:
        return 1.0 - self.recall


@dataclass
class NihReport:
    cells: list = field(default_factory=list)

    @property
    def mean_recall(self) -> float:
        return float(np.mean([c.recall for c in self.cells])) if self.cells else 0.0

    @property
    def mean_err(self) -> float:
        return 1.0 - self.mean_recall

    @property
    def failures(self) -> int:
        return sum(c.failed for c in self.cells)

    def summary(self) -> dict:
        return {"mean_recall": self.mean_recall, "mean_err": self.mean_err,
                "n_cases": len(self.cells), "failures": self.failures}

    def heatmap(self):
        """(depths, lengths, matrix) with rows = depth, columns = context length."""
        lengths = sorted({c.context_len for c in self.cells})
        depths = sorted({c.depth for c in self.cells})
        mat = np.full((len(depths), len(lengths)), np.nan)
        for c in self.cells:
            mat[depths.index(c.depth), lengths.index(c.context_len)] = c.recall
        return depths, lengths, mat

    def write_heatmap(self, path):
        depths, lengths, mat = self.heatmap()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["depth"] + lengths)
            for d, row in zip(depths, mat):
                w.writerow([repr(d)] + [repr(float(x)) for x in row])

    def write_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)

    def write_cells(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["context_len", "depth", "recall", "err", "failed", "output"])
            for c in self.cells:
                w.writerow([c.context_len, repr(c.depth), repr(c.recall), repr(c.err), int(c.failed), c.output])


def run_nih(model, cases, generation_len: int = 50, steering: SteeringSpec | None = None,
            haystack: str | None = None, window: int = 100, indicator: bool | None = None,
            spec=DEFAULT_TOKENIZER) -> NihReport:
    """Generate an answer for each case and score keyword recall.

    Cases that do not fit the model's context become failed cells with recall
    0 instead of aborting the run. ``indicator`` overrides the per-case flag.
    """
    report = NihReport()
    templates = {}
    for case in cases:
        if indicator is not None and case.indicator != indicator:
            case = replace(case, indicator=indicator)
        tmpl = templates.setdefault(case.template, load_template(case.template))
        seq = render_case(case, haystack, tmpl, spec)
        per_case = None
        if steering is not None:
            per_case = SteeringSpec(steering.alpha, steering.targets, None)
        try:
            out = model.generate(seq, generation_len, per_case)
        except SequenceTooLong:
            report.cells.append(CellResult(case.context_len, case.depth, 0.0, failed=True))
            continue
        r = recall(out, case.keywords, window, spec)
        report.cells.append(CellResult(case.context_len, case.depth, r, False,
                                       detokenize(out, spec).decode("utf-8", errors="replace")))
    return report
