import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynflow.workflow import (ActorPool, ActorRole, ActorSpec, AnswerFormatError, ArityError,
                              InvalidTemplateError, MaskVector, RoleMismatchError, Template,
                              TemplateStage, UnknownActorError, canonical_string,
                              count_workflows, enumerate_workflows, f_match, load_registry,
                              parse_answer, parse_canonical, registry_from_json,
                              registry_to_json, render_answer, validate_template)

from conftest import pool_of

R = ActorRole


def test_bundled_templates_all_validate(templates):
    assert [t.id for t in templates] == ["0", "A", "B", "C", "D", "E", "F", "G", "H", "I"]
    for t in templates:
        assert validate_template(t) == [], t.id


def test_template_d_is_parser_then_generator(by_id):
    assert by_id["D"].slots == (R.PARSER, R.GENERATOR)


def test_parallel_without_selector_is_reported():
    t = Template("X", (TemplateStage.group(R.GENERATOR, R.GENERATOR),))
    v = validate_template(t)
    assert any("parallel group without later selector" in s for s in v)
    assert all(s.startswith("stage 0") for s in v)


def test_final_stage_role_is_checked():
    t = Template("X", (TemplateStage.single(R.GENERATOR), TemplateStage.single(R.PARSER)))
    assert validate_template(t) == [
        "stage 1: final role parser is not generator/optimizer/selector"]


def test_parallel_group_needs_two_slots():
    with pytest.raises(InvalidTemplateError):
        TemplateStage((R.GENERATOR,), parallel=True)


def test_complexity_rank(by_id):
    assert by_id["0"].complexity_rank == (1, 1, 1)
    assert by_id["B"].complexity_rank == (2, 4, 3)
    assert by_id["H"].complexity_rank == (5, 7, 3)


def test_f_match_four_stage_pipeline():
    pool = ActorPool((ActorSpec("dinsql-parser", R.PARSER),
                      ActorSpec("dinsql-decomposer", R.DECOMPOSER),
                      ActorSpec("dinsql-generator", R.GENERATOR),
                      ActorSpec("dinsql-optimizer", R.OPTIMIZER)))
    t = Template("P", tuple(TemplateStage.single(r) for r in
                            (R.PARSER, R.DECOMPOSER, R.GENERATOR, R.OPTIMIZER)))
    w = f_match(t, ["dinsql-parser", "dinsql-decomposer", "dinsql-generator",
                    "dinsql-optimizer"], pool)
    assert canonical_string(w) == "P|dinsql-parser,dinsql-decomposer,dinsql-generator,dinsql-optimizer"


def test_f_match_errors(by_id):
    pool = pool_of(generator=3, parser=1, selector=1)
    with pytest.raises(RoleMismatchError) as e:
        f_match(by_id["D"], ["g1", "p1"], pool)
    assert e.value.slot == 0
    with pytest.raises(UnknownActorError):
        f_match(by_id["D"], ["p1", "nope"], pool)
    with pytest.raises(ArityError):
        f_match(by_id["D"], ["p1"], pool)


def test_template_b_assignment_length(by_id):
    pool = pool_of(generator=3, selector=1)
    w = f_match(by_id["B"], ["g1", "g2", "g3", "s1"], pool)
    assert len(w.assignment) == 4


def test_enumeration_counts(by_id):
    two_gens = pool_of(generator=2)
    one_slot = Template("G", (TemplateStage.single(R.GENERATOR),))
    assert len(enumerate_workflows([one_slot], two_gens)) == 2
    pool = pool_of(parser=2, generator=3)
    assert len(enumerate_workflows([by_id["0"], by_id["D"]], pool)) == 9


def test_masked_selector_removes_templates(by_id):
    pool = pool_of(generator=3, selector=1)
    mask = MaskVector.from_dict({"g1": 1, "g2": 1, "g3": 1, "s1": 0})
    assert enumerate_workflows([by_id["B"]], pool, mask) == []
    assert len(enumerate_workflows([by_id["0"], by_id["B"]], pool, mask)) == 3


def test_mask_domain_must_match_pool():
    pool = pool_of(generator=2)
    with pytest.raises(ValueError):
        enumerate_workflows([], pool, MaskVector.from_dict({"g1": 1}))


def test_canonical_order(by_id):
    pool = pool_of(parser=2, generator=2)
    ws = enumerate_workflows([by_id["D"], by_id["0"]], pool)
    keys = [canonical_string(w) for w in ws]
    assert keys == ["0|g1", "0|g2", "D|p1,g1", "D|p1,g2", "D|p2,g1", "D|p2,g2"]


ROLE_COUNTS = st.dictionaries(st.sampled_from([r.value for r in R]), st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(ROLE_COUNTS)
def test_enumeration_matches_product_count(templates, counts):
    pool = pool_of(**counts) if any(counts.values()) else pool_of(generator=1)
    ws = enumerate_workflows(templates, pool)
    expected = sum(math.prod(len(pool.by_role(r)) for r in t.slots) for t in templates)
    assert len(ws) == expected == count_workflows(templates, pool)
    assert len({canonical_string(w) for w in ws}) == len(ws)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_mask_monotonicity(templates, data):
    pool = pool_of(generator=2, parser=2, selector=1, scaler=2, optimizer=1)
    big = data.draw(st.lists(st.booleans(), min_size=len(pool), max_size=len(pool)))
    small = [b and data.draw(st.booleans()) for b in big]
    m = MaskVector(tuple(zip(pool.ids, map(int, big))))
    m2 = MaskVector(tuple(zip(pool.ids, map(int, small))))
    assert m2 <= m
    inner = {canonical_string(w) for w in enumerate_workflows(templates, pool, m2)}
    outer = {canonical_string(w) for w in enumerate_workflows(templates, pool, m)}
    assert inner <= outer


def _random_workflow(templates, pool, draw):
    t = draw(st.sampled_from(templates))
    return f_match(t, [draw(st.sampled_from(pool.by_role(r))) for r in t.slots], pool)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_canonical_and_answer_round_trip(templates, data):
    pool = pool_of(generator=2, parser=2, selector=2, scaler=2, optimizer=2)
    w = _random_workflow(templates, pool, data.draw)
    assert parse_canonical(canonical_string(w), templates, pool) == w
    nested = data.draw(st.booleans())
    back = parse_answer(render_answer(w, "why", nested=nested), pool, templates)
    # a flat role sequence may match an earlier template with the same slots
    assert back.assignment == w.assignment
    assert back.template.slots == w.template.slots


def test_canonical_strings_are_injective(templates):
    pool = pool_of(generator=2, parser=2, selector=1, scaler=2, optimizer=2)
    ws = enumerate_workflows(templates, pool)
    assert len({canonical_string(w) for w in ws}) == len(ws)
    a, b = ws[0], ws[1]
    assert a.template == b.template and canonical_string(a) != canonical_string(b)


class TestParseAnswer:
    pool = ActorPool((ActorSpec("LinkAlignParser", R.PARSER),
                      ActorSpec("MACSQLGenerator", R.GENERATOR),
                      ActorSpec("CHESSSelector", R.SELECTOR)))

    def test_case_study_answer(self, templates):
        text = "<think>link first</think><answer>list['LinkAlignParser', 'MACSQLGenerator']</answer>"
        w = parse_answer(text, self.pool, templates)
        assert w.template.id == "D"
        assert w.assignment == ("LinkAlignParser", "MACSQLGenerator")

    @pytest.mark.parametrize("text,kind", [
        ("just words", "missing_answer"),
        ("<answer>list['MACSQLGenerator']</answer>", "missing_think"),
        ("<answer>list['MACSQLGenerator']</answer><think>x</think>", "missing_think"),
        ("<think></think><answer>['MACSQLGenerator']</answer>", "malformed_list"),
        ("<think></think><answer>list['MACSQLGenerator'</answer>", "malformed_list"),
        ("<think></think><answer>list[]</answer>", "malformed_list"),
        ("<think></think><answer>list['GPT5Generator']</answer>", "unknown_actor"),
        ("<think></think><answer>list['macsqlgenerator']</answer>", "unknown_actor"),
        ("<think></think><answer>list['CHESSSelector']</answer>", "no_matching_template"),
        ("<think></think><answer>list['MACSQLGenerator']</answer>"
         "<answer>list['MACSQLGenerator']</answer>", "missing_answer"),
    ])
    def test_failures_are_distinguished(self, templates, text, kind):
        with pytest.raises(AnswerFormatError) as e:
            parse_answer(text, self.pool, templates)
        assert e.value.kind == kind

    def test_nested_list_is_flattened(self, templates):
        pool = pool_of(generator=3, selector=1)
        text = "<think/><think></think><answer>list[['g1', 'g2', 'g3'], 's1']</answer>"
        w = parse_answer(text, pool, templates)
        assert w.template.id == "B" and w.assignment == ("g1", "g2", "g3", "s1")


def test_registry_round_trip():
    reg = load_registry()
    again = registry_from_json(registry_to_json(reg))
    assert again == reg


def test_registry_rejects_invalid_template():
    doc = {"actors": [{"id": "g", "role": "generator"}],
           "templates": [{"id": "X", "stages": [{"kind": "parallel",
                                                 "roles": ["generator", "generator"]}]}]}
    with pytest.raises(InvalidTemplateError):
        registry_from_json(doc)


def test_workflows_are_hashable_values(by_id):
    pool = pool_of(generator=2)
    a = f_match(by_id["0"], ["g1"], pool)
    b = f_match(by_id["0"], ["g1"], pool)
    assert a == b and hash(a) == hash(b)
    assert len(set(itertools.chain([a], [b]))) == 1
