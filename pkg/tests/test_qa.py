import pytest
from hypothesis import given, strategies as st

from ctxscope.errors import EmptyAnswerSet, EmptyCaseSet, ParseError
from ctxscope.qa import (QaCase, containment, normalize, qa_prompt, read_qa, run_qa, truncate_first_sentence,
                         write_qa)
from ctxscope.tokenizer import tokenize

from helpers import ScriptedModel, eos_model


def test_containment_examples():
    assert containment("The answer is Marlow.", ["Marlow"]) == 1
    assert containment("xyz", ["abc"]) == 0
    assert containment("the  ANSWER is   marlow", ["answer is Marlow"]) == 1
    with pytest.raises(EmptyAnswerSet):
        containment("x", [])


@given(st.text(alphabet="abAB \t\n", max_size=30), st.text(alphabet="abAB \t", min_size=1, max_size=5))
def test_containment_case_and_space_invariant(resp, ans):
    assert containment(resp, [ans]) == containment(resp.upper().replace(" ", "  "), [ans.lower()])


def test_first_sentence_examples():
    assert truncate_first_sentence("Foo bar. Baz qux.") == "Foo bar."
    assert truncate_first_sentence("No terminator here") == "No terminator here"
    assert truncate_first_sentence("E.g. sample. Next.") == "E.g."
    assert truncate_first_sentence("v1.2 is out! ok") == "v1.2 is out!"


@given(st.text(alphabet="ab .!?\n", max_size=40))
def test_first_sentence_idempotent(text):
    once = truncate_first_sentence(text)
    assert truncate_first_sentence(once) == once


def test_normalize():
    assert normalize("  A \n b  ") == "a b"


def echo_context_model():
    """Generates the context back, i.e. the text before the instruction line."""
    def fn(prompt, steering):
        text = bytes(t - 8 for t in prompt.tokens if t >= 8).decode()
        return tokenize(text.split("\n")[0])
    return ScriptedModel(fn)


def test_echo_fixture_trace():
    cases = [QaCase("Marlow is the capital. Other text.", "What is the capital?", ("Marlow",), "a"),
             QaCase("Nothing here. Marlow later.", "What is the capital?", ("Marlow",), "b")]
    rep = run_qa(echo_context_model(), cases)
    assert [r.containment for r in rep.results] == [1, 0]
    assert rep.results[1].truncated_response == "Nothing here."
    assert rep.mean_containment == 0.5


def test_empty_and_failures():
    with pytest.raises(EmptyCaseSet):
        run_qa(eos_model(), [])
    long_case = QaCase("x" * 500, "q", ("x",), "l")
    rep = run_qa(eos_model(max_seq_len=200), [long_case])
    assert rep.results[0].failed and rep.mean_containment == 0.0


def test_rerun_identical():
    cases = [QaCase("Marlow is it. More.", "Where?", ("marlow",), "a")]
    assert run_qa(echo_context_model(), cases).results == run_qa(echo_context_model(), cases).results


def test_prompt_styles():
    c = QaCase("CTX", "Q?", ("a",))
    assert qa_prompt(c, "instruction") == "CTX\nAnswer the question according to the above passage: Q?"
    assert qa_prompt(c, "plain") == "CTX Q?"


def test_case_validation_and_io(tmp_path):
    with pytest.raises(EmptyAnswerSet):
        QaCase("c", "q", ())
    cases = [QaCase("c1", "q1", ("a", "b"), "x"), QaCase("c2", "q2", ("z",), "y")]
    write_qa(tmp_path / "q.jsonl", cases)
    assert read_qa(tmp_path / "q.jsonl") == cases
    (tmp_path / "bad.jsonl").write_text('{"context": "c"}\n')
    with pytest.raises(ParseError):
        read_qa(tmp_path / "bad.jsonl")


def test_report_csv(tmp_path):
    rep = run_qa(echo_context_model(), [QaCase("Marlow. x", "q", ("Marlow",), "a")])
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["case_id,containment,truncated_response", "a,1,Marlow."]
