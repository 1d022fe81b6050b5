from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from generators import fuzz_bytes, plan_seeds, random_nav_plan
from pathagent.errors import (
    DuplicateRegionId,
    InconsistentAction,
    InvalidViewport,
    NoJsonFound,
    ParseError,
    SchemaViolation,
    Unparseable,
)
from pathagent.nav_dsl import (
    AUTO_OVERVIEW_RATIONALE,
    extract_answer,
    find_json_object,
    parse_nav_plan,
    parse_reasoning_result,
    parse_region_selection,
    serialize_nav_plan,
    truncate_plan,
)


def step(action, c, m, r=""):
    return {"action": action, "center": list(c), "magnification": m, "rationale": r}


def doc(*steps):
    return json.dumps({"steps": list(steps)})


class TestNavPlan:
    def test_basic(self):
        plan = parse_nav_plan(doc(step("overview", (0.5, 0.5), 1), step("zoom_in", (0.3, 0.4), 4)))
        assert [s.action for s in plan.steps] == ["overview", "zoom_in"]
        assert plan.steps[1].center == (0.3, 0.4) and not plan.auto_overview

    def test_auto_overview_inserted(self):
        plan = parse_nav_plan(doc(step("zoom_in", (0.3, 0.4), 4)))
        assert plan.auto_overview
        first = plan.steps[0]
        assert (first.action, first.center, first.magnification) == ("overview", (0.5, 0.5), 1.0)
        assert first.rationale == AUTO_OVERVIEW_RATIONALE

    def test_tolerant_location_and_formats(self):
        text = ("Sure! I'll look around.\n```json\n"
                + json.dumps({"steps": [step("Overview", (0.5, 0.5), "1x"), step("zoom-in", ("0.2", 0.2), "2.5×")]})
                + "\n```\nDone.")
        plan = parse_nav_plan(text)
        assert plan.steps[1].action == "zoom_in" and plan.steps[1].magnification == 2.5
        assert plan.steps[1].center == (0.2, 0.2)

    def test_bare_object_in_prose(self):
        text = "I will use {not json} then " + doc(step("overview", (0.5, 0.5), 1)) + " ok"
        assert len(parse_nav_plan(text).steps) == 1

    @pytest.mark.parametrize("steps,exc", [
        ([step("overview", (0.5, 0.5), 1), step("zoom_in", (0.5, 0.5), 1)], InconsistentAction),
        ([step("overview", (0.5, 0.5), 1), step("zoom_out", (0.5, 0.5), 2)], InconsistentAction),
        ([step("overview", (0.5, 0.5), 1), step("move", (0.5, 0.5), 1)], InconsistentAction),
        ([step("overview", (0.5, 0.5), 1), step("zoom_in", (0.2, 0.2), 3), step("move", (0.3, 0.3), 2)],
         InconsistentAction),
        ([step("overview", (0.5, 0.5), 2)], InconsistentAction),
        ([step("overview", (1.5, 0.5), 1)], InvalidViewport),
        ([step("overview", (0.5, 0.5), 1), step("zoom_out", (0.5, 0.5), 0.5)], InvalidViewport),
        ([step("pan", (0.5, 0.5), 1)], SchemaViolation),
        ([], SchemaViolation),
        ([{"action": "overview", "center": [0.5], "magnification": 1}], SchemaViolation),
    ])
    def test_invalid(self, steps, exc):
        with pytest.raises(exc):
            parse_nav_plan(doc(*steps))

    def test_no_json(self):
        with pytest.raises(NoJsonFound):
            parse_nav_plan("I would zoom into the top left.")

    def test_missing_key(self):
        with pytest.raises(SchemaViolation):
            parse_nav_plan('{"plan": []}')

    def test_truncate(self):
        plan = random_nav_plan(random.Random(1), max_steps=12)
        while len(plan) < 5:
            plan = random_nav_plan(random.Random(len(plan) + 7))
        cut = truncate_plan(plan, 3)
        assert cut.truncated and cut.steps == plan.steps[:3]
        assert truncate_plan(plan, 100) is plan

    def test_serialize_rounds(self):
        plan = parse_nav_plan(doc(step("overview", (0.123456, 0.5), 1), step("zoom_in", (0.5, 0.5), 2.3456)))
        obj = json.loads(serialize_nav_plan(plan))
        assert obj["steps"][0]["center"] == [0.123, 0.5]
        assert obj["steps"][1]["magnification"] == 2.35
        assert list(obj["steps"][0]) == ["action", "center", "magnification", "rationale"]


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_property(seed):
    plan = random_nav_plan(random.Random(seed))
    text = serialize_nav_plan(plan)
    assert parse_nav_plan(text) == plan
    assert serialize_nav_plan(parse_nav_plan(text)) == text


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_never_crashes_on_bytes(data):
    for parse in (parse_nav_plan, parse_region_selection, parse_reasoning_result):
        try:
            parse(data)
        except ParseError:
            pass


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=300))
def test_extract_answer_total(text):
    try:
        idx = extract_answer(text, 4, ["alpha", "beta", "gamma", "delta"])
    except Unparseable:
        return
    assert 0 <= idx < 4


def test_mutation_fuzz_small():
    rng = random.Random(0)
    seeds = plan_seeds(rng, 20)
    for _ in range(2000):
        try:
            parse_nav_plan(fuzz_bytes(rng, seeds))
        except ParseError:
            pass


def test_find_json_prefers_fenced_and_required_key():
    text = '{"a": 1} ```json\n{"steps": 1}\n```'
    assert find_json_object(text, "steps") == {"steps": 1}
    assert find_json_object(text, "a") == {"a": 1}


class TestRegionSelection:
    def test_parse(self):
        sel = parse_region_selection(json.dumps({
            "groups": [{"name": "tumour", "region_ids": [3, 1], "needs_high_mag": True},
                       {"name": "fat", "region_ids": [0], "needs_high_mag": False}],
            "priority": [1, 3, 0]}))
        assert sel.priority == (1, 3, 0)
        assert sel.group_of(3).name == "tumour" and sel.all_ids() == {0, 1, 3}

    def test_duplicate_id(self):
        with pytest.raises(DuplicateRegionId):
            parse_region_selection(json.dumps({
                "groups": [{"name": "a", "region_ids": [1], "needs_high_mag": True},
                           {"name": "b", "region_ids": [1], "needs_high_mag": False}],
                "priority": [1]}))

    def test_bad_types(self):
        with pytest.raises(SchemaViolation):
            parse_region_selection('{"groups": [{"name": "a", "region_ids": ["x"], "needs_high_mag": true}]}')


class TestReasoning:
    def test_structured(self):
        r = parse_reasoning_result('{"step_notes": ["a", "b"], "conclusion": "c", "answer_index": 1}', 2, 4)
        assert r.step_notes == ("a", "b") and r.answer_index == 1 and r.structured

    def test_note_count_checked(self):
        with pytest.raises(SchemaViolation):
            parse_reasoning_result('{"step_notes": ["a"], "conclusion": "c"}', n_views=2)

    def test_answer_range(self):
        with pytest.raises(SchemaViolation):
            parse_reasoning_result('{"step_notes": [], "conclusion": "c", "answer_index": 5}', None, 4)

    def test_unstructured_fallback(self):
        r = parse_reasoning_result("Just prose. Answer: B")
        assert not r.structured and r.conclusion.endswith("Answer: B")

    def test_empty(self):
        with pytest.raises(NoJsonFound):
            parse_reasoning_result("   ")


class TestExtractAnswer:
    @pytest.mark.parametrize("text,expected", [
        ("Answer: C", 2),
        ("answer: a then later Answer: (D)", 3),
        ("**Answer:** B", 1),
        ("**Answer**: D.", 3),
        ("I think so.\nB\n", 1),
        ("Thinking...\n(C)", 2),
        ("The lesion is clearly beta-like.\n\nSo it is gamma.", 2),
    ])
    def test_rules(self, text, expected):
        assert extract_answer(text, 4, ["alpha", "beta", "gamma", "delta"]) == expected

    def test_letter_outside_range_ignored(self):
        with pytest.raises(Unparseable):
            extract_answer("Answer: F", 3)

    def test_ambiguous_paragraph(self):
        with pytest.raises(Unparseable):
            extract_answer("Either alpha or beta.", 4, ["alpha", "beta", "gamma", "delta"])

    def test_no_options_no_text_rule(self):
        with pytest.raises(Unparseable):
            extract_answer("it is gamma", 4)
