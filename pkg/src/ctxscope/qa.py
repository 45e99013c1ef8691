"""Contextual question answering scored by answer containment."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyAnswerSet, EmptyCaseSet, ParseError, SequenceTooLong
from .nih import prompt_styles
from .tokenizer import Conversation, Turn, decode_text, load_template, render

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


@dataclass(frozen=True)
class QaCase:
    context: str
    question: str
    answers: tuple
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise EmptyAnswerSet(f"case {self.id!r} has no answers")
        if not self.context:
            raise ValueError(f"case {self.id!r} has an empty context")

    def to_json(self) -> dict:
        return {"id": self.id, "context": self.context, "question": self.question, "answers": list(self.answers)}


def read_qa(path) -> list[QaCase]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(QaCase(obj["context"], obj["question"], tuple(obj["answers"]),
                                  str(obj.get("id", f"q{lineno - 1}"))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out


def write_qa(path, cases) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for c in cases:
            f.write(json.dumps(c.to_json(), sort_keys=True) + "\n")


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def containment(response: str, answers) -> int:
    """1 if any normalized answer occurs in the normalized response, else 0."""
    answers = list(answers)
    if not answers:
        raise EmptyAnswerSet("answer set is empty")
    r = normalize(response)
    return int(any(normalize(a) in r for a in answers))


def truncate_first_sentence(text: str) -> str:
    """Cut after the first '.', '!' or '?' followed by whitespace or end of text.

    No abbreviation handling: "E.g. x." becomes "E.g.".
    """
    m = _SENTENCE_END.search(text)
    return text[:m.end()] if m else text


def qa_prompt(case: QaCase, style: str = "instruction") -> str:
    return prompt_styles()["qa"][style].format(context=case.context, question=case.question)


@dataclass
class QaResult:
    case_id: str
    containment: int
    truncated_response: str
    failed: bool = False


@dataclass
class QaReport:
    results: list = field(default_factory=list)

    @property
    def mean_containment(self) -> float:
        return float(np.mean([r.containment for r in self.results])) if self.results else 0.0

    def summary(self) -> dict:
        return {"mean_containment": self.mean_containment, "n_cases": len(self.results),
                "failures": sum(r.failed for r in self.results)}

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case_id", "containment", "truncated_response"])
            for r in self.results:
                w.writerow([r.case_id, r.containment, r.truncated_response])

    def write_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)


def run_qa(model, cases, style: str = "instruction", template="null", generation_len: int = 100,
           indicator: bool = False) -> QaReport:
    """Render each case, generate, keep the first sentence and score containment.

    Cases too long for the model score 0 and are flagged as failures.
    """
    if not cases:
        raise EmptyCaseSet("no QA cases")
    tmpl = load_template(template)
    report = QaReport()
    for i, case in enumerate(cases):
        cid = case.id or f"q{i}"
        conv = Conversation(cid, (Turn("user", qa_prompt(case, style), indicator),))
        seq = render(conv, tmpl)
        try:
            out = model.generate(seq, generation_len)
        except SequenceTooLong:
            report.results.append(QaResult(cid, 0, "", failed=True))
            continue
        text = truncate_first_sentence(decode_text(out))
        report.results.append(QaResult(cid, containment(text, case.answers), text))
    return report
