import json

import pytest
from hypothesis import given, settings, strategies as st

from perspectivist.data import Annotator, Instance, Rating
from perspectivist.prompts import (
    PRESET_TEMPLATES, ApproxTokenCounter, BudgetError, PromptError, PromptTemplate, build_prompt,
    load_template, render_demographics, render_example, save_template,
)


class AtCounter:
    """Counts '@' characters, so test texts have exactly chosen token sizes."""

    approximate = False

    def __call__(self, text):
        return text.count("@")


def at_template():
    return PromptTemplate("@" * 136, ["t"], include_demographics=False)


def at_history(n, size=100):
    insts = {f"h{i:03d}": Instance(f"h{i:03d}", {"t": "@" * size}) for i in range(n)}
    hist = [Rating("a", iid, 1) for iid in insts]
    return hist, insts


TARGET = Instance("target", {"t": ""})
ANN = Annotator("a", {"Gender": "Female", "Age": "26"})


def test_csc_example_render():
    t = PRESET_TEMPLATES["CSC"]
    inst = Instance("c1", {"context": "c", "response": "r", "lang": "en"})
    out = render_example(t, Rating("a", "c1", 3), inst)
    assert out == '{"context": "c", "response": "r", "lang": "en"}\n<start_of_turn>3<end_of_turn>\n'


def test_par_example_render_with_explanation():
    t = PRESET_TEMPLATES["Par"]
    inst = Instance("p1", {"question1": "q1", "question2": "q2", "lang": "en"})
    out = render_example(t, Rating("a", "p1", -1, "The companies are different."), inst)
    assert out.endswith(
        '<start_of_turn>{"paraphrase_rating": -1, "explanation": "The companies are different."}<end_of_turn>\n'
    )


def test_example_without_explanation_is_label_only():
    t = PRESET_TEMPLATES["MP"]
    inst = Instance("m1", {"post": "p", "reply": "r", "source": "s", "level": 1, "language_variety": "v", "lang": "en"})
    assert render_example(t, Rating("a", "m1", 0), inst).split("<start_of_turn>")[1] == "0<end_of_turn>\n"


def test_missing_payload_field_errors():
    with pytest.raises(PromptError, match="no payload field"):
        render_example(PRESET_TEMPLATES["CSC"], Rating("a", "c1", 3), Instance("c1", {"context": "c"}))


def test_demographics_rendering():
    t = PRESET_TEMPLATES["CSC"]
    assert render_demographics(t, ANN) == "Annotator demographics: Gender: Female; Age: 26"
    assert render_demographics(t, Annotator("b")) == "Annotator demographics:"
    assert render_demographics(t, ANN, include=False) == "Annotator demographics:"


def test_par_includes_annotator_id_first():
    out = render_demographics(PRESET_TEMPLATES["Par"], Annotator("Ann1", {"Gender": "Male"}))
    assert out == "Annotator demographics: annotator_id: Ann1; Gender: Male"


def test_packing_twenty_eight_of_fifty():
    hist, insts = at_history(50)
    p = build_prompt(at_template(), ANN, hist, TARGET, 3000, seed=1, counter=AtCounter(), instances=insts)
    # (3000 - 136 header/target - 64 headroom) // 100
    assert p.example_count == 28
    assert p.token_count == 136 + 2800


def test_budget_exactly_header_target_headroom_gives_zero_examples():
    hist, insts = at_history(5)
    p = build_prompt(at_template(), ANN, hist, TARGET, 200, counter=AtCounter(), instances=insts)
    assert p.example_count == 0
    assert p.text.endswith("<start_of_turn>")


def test_budget_shortfall_reported():
    with pytest.raises(BudgetError) as e:
        build_prompt(at_template(), ANN, [], TARGET, 150, counter=AtCounter())
    assert e.value.needed == 200
    assert "short by 50" in str(e.value)


def test_target_last_and_not_in_examples(mini_csc):
    t = PRESET_TEMPLATES["CSC"]
    train = mini_csc.split("train")
    target = train.instances["t2"]
    hist = [r for r in train.ratings if r.annotator_id == "a1"]
    p = build_prompt(t, mini_csc.annotator("a1"), hist, target, 3000, seed=3, instances=train.instances)
    assert "t2" not in p.example_ids
    assert p.example_count == 3
    target_line = json.dumps({k: target.payload[k] for k in t.input_fields})
    assert p.text.count(target_line) == 1
    assert p.text.endswith(target_line + "\n<start_of_turn>")


def test_foreign_history_rejected():
    hist, insts = at_history(1)
    with pytest.raises(PromptError):
        build_prompt(at_template(), Annotator("b"), hist, TARGET, 3000, counter=AtCounter(), instances=insts)


def test_json_template_target_ends_with_output_prefix():
    t = PRESET_TEMPLATES["VEN"]
    inst = Instance("v", {"context": "c", "statement": "s", "lang": "en"})
    p = build_prompt(t, Annotator("a"), [], inst)
    assert p.text.endswith('<start_of_turn>{"nli_label": "')


def test_max_examples_caps_count():
    hist, insts = at_history(20, size=1)
    p = build_prompt(at_template(), ANN, hist, TARGET, 3000, counter=AtCounter(), instances=insts, max_examples=1)
    assert p.example_count == 1


def test_template_round_trip(tmp_path):
    save_template(PRESET_TEMPLATES["Par"], tmp_path / "t.json")
    assert load_template(tmp_path / "t.json") == PRESET_TEMPLATES["Par"]


def test_approx_counter():
    c = ApproxTokenCounter()
    assert c("") == 0
    assert c("x" * 400) == 100
    assert c("x" * 401) == 101


sizes = st.lists(st.integers(1, 400), min_size=0, max_size=40)


@settings(max_examples=200, deadline=None)
@given(sizes, st.integers(200, 6000), st.integers(0, 2 ** 31), st.integers(0, 3000))
def test_packing_within_budget_and_monotone(example_sizes, budget, seed, extra):
    insts = {f"h{i:03d}": Instance(f"h{i:03d}", {"t": "@" * s}) for i, s in enumerate(example_sizes)}
    hist = [Rating("a", iid, 1) for iid in insts]
    kw = dict(seed=seed, counter=AtCounter(), instances=insts)
    p = build_prompt(at_template(), ANN, hist, TARGET, budget, **kw)
    q = build_prompt(at_template(), ANN, hist, TARGET, budget + extra, **kw)
    assert p.token_count + 64 <= budget
    assert p.token_count == AtCounter()(p.text)
    assert q.example_count >= p.example_count


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 2 ** 31))
def test_seed_determinism_and_permutation(s1, s2):
    hist, insts = at_history(10, size=3)
    a = build_prompt(at_template(), ANN, hist, TARGET, 3000, seed=s1, counter=AtCounter(), instances=insts)
    b = build_prompt(at_template(), ANN, hist, TARGET, 3000, seed=s1, counter=AtCounter(), instances=insts)
    c = build_prompt(at_template(), ANN, hist, TARGET, 3000, seed=s2, counter=AtCounter(), instances=insts)
    assert a.text == b.text
    assert sorted(a.example_ids) == sorted(c.example_ids)
