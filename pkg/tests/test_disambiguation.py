"""Disambiguation tests: structure invariants, the rule classifier on its
reference queries, clarification flow, and rewrite completeness.
"""

from __future__ import annotations

import json

import pytest

from aggquery.backends import ScriptedBackend, request_key, user_request, render_prompt
from aggquery.disambiguation import (
    AmbiguityLabel,
    Clarification,
    CompositionNode,
    Condition,
    QuerySpec,
    WHOLE_QUERY,
    apply_answer,
    classify_ambiguity,
    conj,
    disj,
    generate_clarifications,
    leaf,
    parse_query,
    resolve,
    rewrite_query,
    rule_classify,
    skip_with_default,
    spec_from_json,
    spec_to_json,
)
from aggquery.errors import ResponseFormatError, ValidationError


def make_spec(text: str, predicate: str | None = None, entity: str = "thing") -> QuerySpec:
    return QuerySpec(
        query_id="q1",
        raw_text=text,
        entity_type=entity,
        conditions=(Condition("phi1", predicate or text),),
        composition=leaf("phi1"),
    )


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------


def test_spec_invariants():
    with pytest.raises(ValidationError):
        make_spec("  ")
    with pytest.raises(ValidationError):
        QuerySpec("q", "text", "", (Condition("p", "x"),), leaf("p"))
    with pytest.raises(ValidationError):
        QuerySpec("q", "text", "t", (), CompositionNode("AND", (leaf("p"),)))
    with pytest.raises(ValidationError):
        QuerySpec("q", "text", "t", (Condition("p", "x"),), leaf("other"))
    with pytest.raises(ValidationError):
        QuerySpec("q", "text", "t", (Condition("p", "x"), Condition("p", "y")), leaf("p"))
    with pytest.raises(ValidationError):
        Condition("p", "   ")
    with pytest.raises(ValidationError):
        CompositionNode("NAND", (leaf("p"),))
    with pytest.raises(ValidationError):
        CompositionNode("LEAF")


def test_composition_evaluate():
    tree = conj(leaf("a"), disj(leaf("b"), leaf("c")))
    assert tree.evaluate({"a": True, "b": False, "c": True})
    assert not tree.evaluate({"a": True, "b": False, "c": False})
    assert not tree.evaluate({"b": True, "c": True})  # missing "a" counts false
    assert sorted(tree.leaf_refs()) == ["a", "b", "c"]


def test_spec_json_round_trip():
    q = QuerySpec(
        query_id="q9",
        raw_text="How many gadgets were sold in stores or online?",
        entity_type="gadget",
        conditions=(
            Condition("phi1", "sold in stores", ("note a",)),
            Condition("phi2", "sold online"),
        ),
        composition=disj(leaf("phi1"), leaf("phi2")),
        scope_notes=("whole-query note",),
    )
    blob = json.dumps(spec_to_json(q))
    assert spec_from_json(json.loads(blob)) == q
    with pytest.raises(ValidationError):
        spec_from_json({"query_id": "x"})


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def test_heuristic_parse_shapes():
    q = parse_query("How many datasets are used for multi-hop question answering?")
    assert q.entity_type == "dataset"
    assert len(q.conditions) == 1
    assert "multi-hop" in q.conditions[0].text

    q2 = parse_query("How many documents mention Transformer?")
    assert q2.entity_type == "document"

    q3 = parse_query("How many papers apply to the legal domain?")
    assert q3.entity_type == "paper"


def test_scripted_parse():
    backend = ScriptedBackend()
    raw = "How many datasets are used for multi-hop question answering?"
    parsed = {
        "entity_type": "dataset",
        "conditions": [{"condition_id": "phi1", "text": "used for multi-hop question answering"}],
        "composition": {"op": "AND", "children": ["phi1"]},
    }
    backend.register_response(
        user_request("parse", render_prompt("parse", question=raw)), json.dumps(parsed)
    )
    q = parse_query(raw, backend)
    assert q.entity_type == "dataset"
    assert q.conditions[0].text == "used for multi-hop question answering"
    assert list(q.composition.leaf_refs()) == ["phi1"]


def test_scripted_parse_malformed():
    backend = ScriptedBackend()
    backend.register_rule("parse", "broken", '{"entity_type": "x"}')
    with pytest.raises(ResponseFormatError):
        parse_query("broken question?", backend)


# ---------------------------------------------------------------------------
# Rule classifier
# ---------------------------------------------------------------------------

REFERENCE_QUERIES = {
    "How many high-impact NLP authors?": "A1",
    "How many stores opened near HQ recently?": "A2",
    "How many employees did not complete at least three safety-training courses?": "B1",
    "How many conference papers on climate change in Europe were accepted?": "B2",
}


@pytest.mark.parametrize("text,code", sorted(REFERENCE_QUERIES.items()))
def test_rule_classifier_reference_queries(text, code):
    labels = rule_classify(parse_query(text))
    assert [l.code for l in labels] == [code]


def test_rule_classifier_fragments():
    labels = rule_classify(parse_query("How many stores opened near HQ recently?"))
    assert "near HQ" in labels[0].fragment and "recently" in labels[0].fragment
    labels = rule_classify(parse_query("How many high-impact NLP authors?"))
    assert labels[0].fragment == "high-impact"


def test_rule_classifier_clean_query_empty():
    q = make_spec("How many papers cite dataset X?", "cite dataset X", "paper")
    assert rule_classify(q) == []


def test_rule_classifier_is_pure():
    q = parse_query("How many large stores opened recently near HQ?")
    assert rule_classify(q) == rule_classify(q)
    codes = {l.code for l in rule_classify(q)}
    assert codes == {"A1", "A2"}


def test_classify_via_backend():
    backend = ScriptedBackend()
    backend.register_rule(
        "classify",
        "high-impact",
        json.dumps([{"code": "A1", "rationale": "vague", "target": "phi1", "fragment": "high-impact"}]),
    )
    q = make_spec("How many high-impact authors?", "high-impact authors", "author")
    labels = classify_ambiguity(q, backend)
    assert labels == [AmbiguityLabel("A1", "vague", "phi1", "high-impact")]


def test_classify_backend_bad_code():
    backend = ScriptedBackend()
    backend.register_rule("classify", "weird", json.dumps([{"code": "Z9"}]))
    with pytest.raises(ResponseFormatError):
        classify_ambiguity(make_spec("weird question?"), backend)


def test_classify_backend_unknown_target_mapped_to_query():
    backend = ScriptedBackend()
    backend.register_rule(
        "classify", "mystery", json.dumps([{"code": "C3", "target": "phi99", "fragment": "?"}])
    )
    labels = classify_ambiguity(make_spec("mystery question?"), backend)
    assert labels[0].target == WHOLE_QUERY


# ---------------------------------------------------------------------------
# Clarifications
# ---------------------------------------------------------------------------


def a1_label(target="phi1") -> AmbiguityLabel:
    return AmbiguityLabel("A1", "vague threshold", target, "high-impact")


def test_generate_clarifications_from_templates():
    q = make_spec("How many high-impact authors?", "high-impact authors", "author")
    clars = generate_clarifications(q, [a1_label(), AmbiguityLabel("A2", "", "phi1", "recently")])
    assert len(clars) == 2
    assert clars[0].code == "A1"
    assert "high-impact" in clars[0].question
    assert clars[0].default
    assert not clars[0].resolved
    assert clars[0].clarification_id != clars[1].clarification_id
    assert generate_clarifications(q, []) == []


def test_apply_answer_adds_notes():
    q = make_spec("How many high-impact authors?", "high-impact authors", "author")
    c = generate_clarifications(q, [a1_label()])[0]
    q2 = apply_answer(q, c, "h-index >= 50")
    assert q2.condition("phi1").notes == ("h-index >= 50",)
    assert q.condition("phi1").notes == ()  # original untouched


def test_apply_answer_multi_part_window():
    q = make_spec("How many stores opened near HQ recently?", "opened near HQ recently", "store")
    c = Clarification("cl1", "A2", "which window?", "last year", "phi1", "near HQ … recently")
    q2 = apply_answer(q, c, "last 3 years, 20 km")
    assert q2.condition("phi1").notes == ("last 3 years", "20 km")


def test_apply_answer_idempotent_and_rejects_conflict():
    q = make_spec("How many high-impact authors?", "high-impact authors", "author")
    c = Clarification("cl1", "A1", "cutoff?", "d", "phi1", "high-impact")
    q2 = apply_answer(q, c, "h-index >= 50")
    assert apply_answer(q2, c, "h-index >= 50") is q2
    resolved = resolve(c, "h-index >= 50")
    with pytest.raises(ValidationError):
        apply_answer(q2, resolved, "h-index >= 10")
    with pytest.raises(ValidationError):
        apply_answer(q, c, "   ")


def test_apply_answer_monotone():
    q = make_spec("How many stores opened recently?", "opened recently", "store")
    c1 = Clarification("cl1", "A2", "?", "d", "phi1", "recently")
    c2 = Clarification("cl2", "A1", "?", "d", "phi1", "large")
    q = apply_answer(q, c1, "last 6 months")
    q = apply_answer(q, c2, "revenue > 1M")
    assert q.condition("phi1").notes == ("last 6 months", "revenue > 1M")


def test_whole_query_answer_goes_to_scope_notes():
    q = make_spec("How many things?")
    c = Clarification("cl1", "C1", "unit?", "d", WHOLE_QUERY, "things")
    q2 = apply_answer(q, c, "unit = paper level")
    assert q2.scope_notes == ("unit = paper level",)


def test_resolve_and_skip():
    c = Clarification("cl1", "A1", "cutoff?", "top quartile", "phi1", "large")
    done = resolve(c, "over 100 staff")
    assert done.resolved and done.answer == "over 100 staff"
    with pytest.raises(ValidationError):
        resolve(done, "different")
    skipped = skip_with_default(c)
    assert skipped.resolved and skipped.answer == "top quartile"
    assert "default" in skipped.resolution_note


# ---------------------------------------------------------------------------
# Rewriting
# ---------------------------------------------------------------------------


def test_guided_rewrite_embeds_all_notes():
    q = make_spec("How many high-impact authors?", "high-impact authors", "author")
    c = Clarification("cl1", "A1", "cutoff?", "d", "phi1", "high-impact")
    q = apply_answer(q, c, "h-index >= 50")
    out = rewrite_query(q, "classification_guided", clarifications=[resolve(c, "h-index >= 50")])
    assert "h-index >= 50" in out.raw_text
    assert out.entity_type == "author"


def test_guided_rewrite_identity_when_clean():
    q = make_spec("How many papers cite X?", "cite X", "paper")
    assert rewrite_query(q, "classification_guided") is q


def test_guided_rewrite_rejects_pending():
    q = make_spec("How many large stores?", "large stores", "store")
    pending = Clarification("cl1", "A1", "cutoff?", "d", "phi1", "large")
    with pytest.raises(ValidationError) as err:
        rewrite_query(q, "classification_guided", clarifications=[pending])
    assert "cl1" in str(err.value)
    # direct mode does not require resolution
    assert rewrite_query(q, "direct", clarifications=[pending]) is q


def test_unit_resolution_changes_entity_type():
    q = make_spec("How many contributions?", "contributions listed", "contribution")
    c = Clarification("cl1", "C1", "unit?", "d", WHOLE_QUERY, "contributions")
    q = apply_answer(q, c, "unit = paper level")
    out = rewrite_query(q, "classification_guided", clarifications=[resolve(c, "unit = paper level")])
    assert out.entity_type == "paper"
    assert "unit = paper level" in out.raw_text


def test_rewrite_mode_validation():
    with pytest.raises(ValidationError):
        rewrite_query(make_spec("How many?"), "freestyle")


def test_rewrite_all_notes_embedded_property():
    q = make_spec("How many stores opened near HQ recently?", "opened near HQ recently", "store")
    labels = rule_classify(q)
    clars = generate_clarifications(q, labels)
    resolved = []
    for c in clars:
        q = apply_answer(q, c, f"constraint for {c.code}")
        resolved.append(resolve(c, f"constraint for {c.code}"))
    out = rewrite_query(q, "classification_guided", clarifications=resolved)
    for note in q.all_notes():
        assert note in out.raw_text
