"""Query disambiguation: parse a counting question into an entity type plus
condition tree, detect ambiguity before any retrieval, collect clarification
answers, and rewrite the question under the confirmed interpretation.

Two classifiers are provided: an LLM-prompted one and a deterministic
keyword/pattern fallback.  The fallback is a pure function of the query text,
which is what the offline tests and the CLI rely on.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Iterator, Mapping

from .backends import (
    BudgetLedger,
    LlmBackend,
    complete,
    loads_first_json,
    render_prompt,
    user_request,
)
from .errors import ConfigError, ResponseFormatError, ValidationError

logger = logging.getLogger(__name__)

TAXONOMY = ("A1", "A2", "B1", "B2", "C1", "C2", "C3")
WHOLE_QUERY = "query"


# ---------------------------------------------------------------------------
# Query structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Condition:
    """One boolean predicate over a single entity, plus resolution notes."""

    condition_id: str
    text: str
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.condition_id:
            raise ValidationError("condition_id must be non-empty")
        if not self.text.strip():
            raise ValidationError(f"condition {self.condition_id}: empty predicate text")


@dataclass(frozen=True)
class CompositionNode:
    """AND/OR tree whose leaves reference condition ids."""

    op: str
    children: tuple["CompositionNode", ...] = ()
    ref: str | None = None

    def __post_init__(self):
        if self.op == "LEAF":
            if not self.ref or self.children:
                raise ValidationError("LEAF node needs a condition ref and no children")
        elif self.op in ("AND", "OR"):
            if not self.children or self.ref is not None:
                raise ValidationError(f"{self.op} node needs children and no ref")
        else:
            raise ValidationError(f"unknown composition op {self.op!r}")

    def leaf_refs(self) -> Iterator[str]:
        if self.op == "LEAF":
            yield self.ref  # type: ignore[misc]
        else:
            for child in self.children:
                yield from child.leaf_refs()

    def evaluate(self, verdicts: Mapping[str, bool]) -> bool:
        """Membership decision given per-condition verdicts (missing → False)."""
        if self.op == "LEAF":
            return bool(verdicts.get(self.ref, False))
        results = (child.evaluate(verdicts) for child in self.children)
        return all(results) if self.op == "AND" else any(results)


def leaf(condition_id: str) -> CompositionNode:
    return CompositionNode("LEAF", ref=condition_id)


def conj(*children: CompositionNode) -> CompositionNode:
    return CompositionNode("AND", children=tuple(children))


def disj(*children: CompositionNode) -> CompositionNode:
    return CompositionNode("OR", children=tuple(children))


@dataclass(frozen=True)
class QuerySpec:
    """A counting question decomposed into one entity type and a condition tree."""

    query_id: str
    raw_text: str
    entity_type: str
    conditions: tuple[Condition, ...]
    composition: CompositionNode
    scope_notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.raw_text.strip():
            raise ValidationError("raw_text must be non-empty")
        if not self.entity_type.strip():
            raise ValidationError("entity_type must be non-empty")
        if not self.conditions:
            raise ValidationError("a query needs at least one condition")
        ids = [c.condition_id for c in self.conditions]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate condition ids: {ids}")
        unknown = set(self.composition.leaf_refs()) - set(ids)
        if unknown:
            raise ValidationError(f"composition references unknown conditions: {sorted(unknown)}")

    def condition(self, condition_id: str) -> Condition:
        for c in self.conditions:
            if c.condition_id == condition_id:
                return c
        raise ValidationError(f"no condition {condition_id!r} in query {self.query_id}")

    def all_notes(self) -> tuple[str, ...]:
        notes: list[str] = []
        for c in self.conditions:
            notes.extend(c.notes)
        notes.extend(self.scope_notes)
        return tuple(notes)


def _composition_to_json(node: CompositionNode):
    if node.op == "LEAF":
        return node.ref
    return {"op": node.op, "children": [_composition_to_json(c) for c in node.children]}


def _composition_from_json(obj) -> CompositionNode:
    if isinstance(obj, str):
        return leaf(obj)
    if isinstance(obj, dict) and "op" in obj:
        children = tuple(_composition_from_json(c) for c in obj.get("children", []))
        return CompositionNode(obj["op"], children=children)
    raise ValidationError(f"bad composition node: {obj!r}")


def spec_to_json(q: QuerySpec) -> dict:
    return {
        "query_id": q.query_id,
        "raw_text": q.raw_text,
        "entity_type": q.entity_type,
        "conditions": [
            {"condition_id": c.condition_id, "text": c.text, "notes": list(c.notes)}
            for c in q.conditions
        ],
        "composition": _composition_to_json(q.composition),
        "scope_notes": list(q.scope_notes),
    }


def spec_from_json(obj: dict) -> QuerySpec:
    try:
        return QuerySpec(
            query_id=obj["query_id"],
            raw_text=obj["raw_text"],
            entity_type=obj["entity_type"],
            conditions=tuple(
                Condition(c["condition_id"], c["text"], tuple(c.get("notes", [])))
                for c in obj["conditions"]
            ),
            composition=_composition_from_json(obj["composition"]),
            scope_notes=tuple(obj.get("scope_notes", [])),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad query spec JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Ambiguity labels and clarifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AmbiguityLabel:
    code: str
    rationale: str
    target: str  # condition_id or WHOLE_QUERY
    fragment: str

    def __post_init__(self):
        if self.code not in TAXONOMY:
            raise ValidationError(f"unknown ambiguity code {self.code!r}")


@dataclass(frozen=True)
class Clarification:
    clarification_id: str
    code: str
    question: str
    default: str
    target: str
    fragment: str
    answer: str | None = None
    resolution_note: str | None = None

    @property
    def resolved(self) -> bool:
        return self.answer is not None


def resolve(c: Clarification, answer: str, note: str | None = None) -> Clarification:
    if not answer.strip():
        raise ValidationError("clarification answer must be non-empty")
    if c.resolved and c.answer != answer:
        raise ValidationError(
            f"clarification {c.clarification_id} already resolved with {c.answer!r}"
        )
    return replace(c, answer=answer, resolution_note=note or "answered")


def skip_with_default(c: Clarification) -> Clarification:
    """Resolve a clarification by accepting its stated default interpretation."""
    return resolve(c, c.default, note="skipped; default interpretation applied")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_STOP_AFTER_ENTITY = {
    "are", "is", "were", "was", "do", "does", "did", "have", "has", "had",
    "that", "which", "who", "whose", "with", "without", "in", "on", "for",
    "from", "about", "near", "not", "opened", "used", "apply", "applied",
    "mention", "mentioned", "published", "accepted", "completed",
}


def _singular(word: str) -> str:
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("ss") or len(word) < 4:
        return word
    if word.endswith("s"):
        return word[:-1]
    return word


def _heuristic_parse(raw: str, query_id: str) -> QuerySpec:
    text = raw.strip().rstrip("?").strip()
    m = re.match(r"(?is)\s*how\s+many\s+(.*)", text)
    body = m.group(1) if m else text
    words = body.split()
    head: list[str] = []
    rest_start = len(words)
    for i, word in enumerate(words):
        if word.lower().strip(string.punctuation) in _STOP_AFTER_ENTITY:
            rest_start = i
            break
        head.append(word)
    if not head:  # question did not lead with the entity noun
        head = [words[0]] if words else ["entity"]
        rest_start = 1
    entity = _singular(head[-1].lower().strip(string.punctuation)) or "entity"
    predicate = " ".join(words[rest_start:]).strip() or body
    return QuerySpec(
        query_id=query_id,
        raw_text=raw,
        entity_type=entity,
        conditions=(Condition("phi1", predicate),),
        composition=leaf("phi1"),
    )


def parse_query(
    raw: str,
    backend: LlmBackend | None = None,
    query_id: str = "q1",
    ledger: BudgetLedger | None = None,
) -> QuerySpec:
    """Decompose a question; heuristic noun/predicate split when no backend."""
    if not raw.strip():
        raise ValidationError("query text must be non-empty")
    if backend is None:
        return _heuristic_parse(raw, query_id)
    req = user_request("parse", render_prompt("parse", question=raw))
    response = complete(req, backend, ledger)
    obj = loads_first_json(response.text)
    try:
        conditions = tuple(
            Condition(c["condition_id"], c["text"]) for c in obj["conditions"]
        )
        return QuerySpec(
            query_id=query_id,
            raw_text=raw,
            entity_type=obj["entity_type"],
            conditions=conditions,
            composition=_composition_from_json(obj["composition"]),
        )
    except (KeyError, TypeError, ValidationError) as exc:
        raise ResponseFormatError(f"bad parse structure: {exc}", raw=response.text) from exc


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

# Longest-match-first lexicons. A word only counts at word boundaries, so
# "no" never fires inside "not" and "near" wins over nothing in "nearby".

_A1_TERMS = (
    "high-impact", "high impact", "low-impact", "high-profile", "large", "small",
    "big", "major", "minor", "significant", "important", "influential", "popular",
    "prominent", "notable", "senior", "junior", "top", "leading", "successful",
    "expensive", "cheap", "fast", "slow", "heavy", "busy", "wealthy",
)
_A2_PATTERNS = (
    r"\brecently\b",
    r"\brecent\b",
    r"\blately\b",
    r"\bsoon\b",
    r"\bnearby\b",
    r"\bnear\b(?:\s+[A-Z][\w-]*)?",
    r"\bclose\s+to\b(?:\s+[\w-]+)?",
    r"\bin\s+the\s+past\b",
    r"\blast\s+few\s+[\w-]+",
)
_NEGATION = r"(?:\bnot\b|n't\b|\bnever\b|\bwithout\b|\bno\b|\bexclud\w*)"
_QUANTIFIER = (
    r"(?:\bat\s+least\b|\bat\s+most\b|\bmore\s+than\b|\bfewer\s+than\b|"
    r"\bless\s+than\b|\bevery\b|\ball\b|\beach\b|\bany\b|\bexactly\b)"
)
_PP_HEADS = ("on", "in", "for", "with", "from", "about", "against", "between", "regarding")
# Object capped at two words so successive phrases stay separate matches.
_PP_RE = re.compile(
    r"\b(" + "|".join(_PP_HEADS) + r")\s+([\w-]+(?:\s+[\w-]+)?)", re.IGNORECASE
)
_PP_SKIP = re.compile(r"^(?:the\s+past|least|most)\b", re.IGNORECASE)
_C1_RE = re.compile(r"\bper\s+[\w-]+\b|\b[\w-]+\s+level\b|\bunit\b", re.IGNORECASE)
_C2_RE = re.compile(r"\bdistinct\b|\bunique\b|\bduplicate\w*\b|\balias\w*\b", re.IGNORECASE)


def _find_a1(text: str) -> str | None:
    for term in sorted(_A1_TERMS, key=len, reverse=True):
        m = re.search(rf"\b{re.escape(term)}\b", text, re.IGNORECASE)
        if m:
            return m.group(0)
    return None


def _find_a2(text: str) -> str | None:
    found = []
    for pattern in _A2_PATTERNS:
        m = re.search(pattern, text, re.IGNORECASE)
        if m:
            found.append((m.start(), m.group(0)))
    if not found:
        return None
    found.sort()
    deduped = []
    last_end = -1
    for start, frag in found:
        if start > last_end:
            deduped.append(frag)
            last_end = start + len(frag)
    return " … ".join(deduped)


def _find_b1(text: str) -> str | None:
    neg = re.search(_NEGATION, text, re.IGNORECASE)
    quant = re.search(_QUANTIFIER, text, re.IGNORECASE)
    if not (neg and quant):
        return None
    start = min(neg.start(), quant.start())
    end = max(neg.end(), quant.end())
    return text[start:end] if end - start <= 80 else f"{neg.group(0)} … {quant.group(0)}"


def _find_b2(text: str) -> str | None:
    phrases = []
    for m in _PP_RE.finditer(text):
        if _PP_SKIP.match(m.group(2)):
            continue
        phrases.append(m)
    if len(phrases) < 2:
        return None
    return text[phrases[0].start() : phrases[1].end()]


def rule_classify(q: QuerySpec) -> list[AmbiguityLabel]:
    """Deterministic keyword/pattern classifier; pure function of the text."""
    labels: list[AmbiguityLabel] = []
    targets = [(c.condition_id, c.text) for c in q.conditions]
    # Condition texts may omit words the detectors need, so the raw question
    # is scanned too; fragment-bearing conditions win the target slot.
    scanned = targets + [(WHOLE_QUERY, q.raw_text)]

    def first_hit(finder) -> tuple[str, str] | None:
        for target, text in scanned:
            fragment = finder(text)
            if fragment:
                return target, fragment
        return None

    detectors = (
        ("A1", _find_a1, "gradable term with no explicit cutoff"),
        ("A2", _find_a2, "relative time or place with no explicit window"),
        ("B1", _find_b1, "negation interacts with a quantifier"),
        ("B2", _find_b2, "stacked modifiers; attachment unclear"),
        ("C1", lambda t: (m.group(0) if (m := _C1_RE.search(t)) else None), "counting unit unclear"),
        ("C2", lambda t: (m.group(0) if (m := _C2_RE.search(t)) else None), "possible aliased duplicates"),
    )
    for code, finder, rationale in detectors:
        hit = first_hit(finder)
        if hit:
            labels.append(AmbiguityLabel(code, rationale, hit[0], hit[1]))
    return labels


def classify_ambiguity(
    q: QuerySpec,
    backend: LlmBackend | None = None,
    ledger: BudgetLedger | None = None,
) -> list[AmbiguityLabel]:
    """Label ambiguity sub-types; rule-based when no backend is given."""
    if backend is None:
        return rule_classify(q)
    conditions = "\n".join(f"- {c.condition_id}: {c.text}" for c in q.conditions)
    req = user_request(
        "classify",
        render_prompt(
            "classify", question=q.raw_text, entity_type=q.entity_type, conditions=conditions
        ),
    )
    response = complete(req, backend, ledger)
    obj = loads_first_json(response.text)
    if not isinstance(obj, list):
        raise ResponseFormatError("classification must be a JSON list", raw=response.text)
    labels = []
    valid_targets = {c.condition_id for c in q.conditions} | {WHOLE_QUERY}
    for item in obj:
        try:
            label = AmbiguityLabel(
                code=item["code"],
                rationale=item.get("rationale", ""),
                target=item.get("target", WHOLE_QUERY),
                fragment=item.get("fragment", ""),
            )
        except (KeyError, TypeError, ValidationError) as exc:
            raise ResponseFormatError(f"bad ambiguity label: {exc}", raw=response.text) from exc
        if label.target not in valid_targets:
            label = replace(label, target=WHOLE_QUERY)
        labels.append(label)
    return labels


# ---------------------------------------------------------------------------
# Clarification generation and resolution
# ---------------------------------------------------------------------------


def _clarification_templates() -> dict:
    text = resources.files("aggquery.templates").joinpath("clarifications.json").read_text(
        encoding="utf-8"
    )
    return json.loads(text)


def generate_clarifications(
    q: QuerySpec,
    labels: Iterable[AmbiguityLabel],
    backend: LlmBackend | None = None,
    ledger: BudgetLedger | None = None,
) -> list[Clarification]:
    """One question per label, from the per-code template (LLM-refined if a
    backend is given)."""
    templates = _clarification_templates()
    out: list[Clarification] = []
    for n, label in enumerate(labels, start=1):
        entry = templates.get(label.code)
        if entry is None:
            raise ConfigError(f"no clarification template for code {label.code}")
        values = {"fragment": label.fragment or q.raw_text, "entity_type": q.entity_type}
        question = string.Template(entry["question"]).safe_substitute(values)
        default = string.Template(entry["default"]).safe_substitute(values)
        if backend is not None:
            req = user_request(
                "clarify",
                render_prompt(
                    "clarify",
                    question=q.raw_text,
                    code=label.code,
                    fragment=label.fragment,
                    rationale=label.rationale,
                ),
            )
            obj = loads_first_json(complete(req, backend, ledger).text)
            try:
                question, default = obj["question"], obj["default"]
            except (KeyError, TypeError) as exc:
                raise ResponseFormatError(f"bad clarification: {exc}", raw=str(obj)) from exc
        out.append(
            Clarification(
                clarification_id=f"cl{n}",
                code=label.code,
                question=question,
                default=default,
                target=label.target,
                fragment=label.fragment,
            )
        )
    return out


_NOTE_SPLIT = re.compile(r";|,\s|\s&\s")


def _answer_notes(answer: str) -> list[str]:
    parts = [part.strip() for part in _NOTE_SPLIT.split(answer)]
    return [p for p in parts if p]


def apply_answer(q: QuerySpec, c: Clarification, answer: str) -> QuerySpec:
    """Fold a clarification answer into the target condition's notes.

    Idempotent for a repeated identical answer; a different answer to an
    already-resolved clarification is rejected.  Existing notes are never
    removed.
    """
    if c.resolved and c.answer != answer:
        raise ValidationError(
            f"clarification {c.clarification_id} already resolved with {c.answer!r}"
        )
    notes = _answer_notes(answer)
    if not notes:
        raise ValidationError("clarification answer must be non-empty")
    if c.target == WHOLE_QUERY:
        fresh = [n for n in notes if n not in q.scope_notes]
        if not fresh:
            return q
        return replace(q, scope_notes=q.scope_notes + tuple(fresh))
    cond = q.condition(c.target)
    fresh = [n for n in notes if n not in cond.notes]
    if not fresh:
        return q
    updated = replace(cond, notes=cond.notes + tuple(fresh))
    return replace(
        q,
        conditions=tuple(updated if x.condition_id == cond.condition_id else x for x in q.conditions),
    )


# ---------------------------------------------------------------------------
# Rewriting
# ---------------------------------------------------------------------------

_UNIT_RES = (re.compile(r"unit\s*=\s*([\w-]+)", re.IGNORECASE),
             re.compile(r"\b([\w-]+)\s+level\b", re.IGNORECASE))


def _unit_override(notes: Iterable[str]) -> str | None:
    unit = None
    for note in notes:
        for pattern in _UNIT_RES:
            m = pattern.search(note)
            if m:
                unit = _singular(m.group(1).lower())
    return unit


def rewrite_query(
    q: QuerySpec,
    mode: str = "classification_guided",
    backend: LlmBackend | None = None,
    clarifications: Iterable[Clarification] = (),
) -> QuerySpec:
    """Rewrite the question under the confirmed interpretation.

    classification_guided mode requires every pending clarification to be
    resolved and embeds each resolved constraint verbatim; direct mode
    rewrites from whatever notes exist.  Without a backend the rewrite is a
    deterministic template; identity when there is nothing to embed.
    """
    if mode not in ("classification_guided", "direct"):
        raise ValidationError(f"unknown rewrite mode {mode!r}")
    pending = [c.clarification_id for c in clarifications if not c.resolved]
    if mode == "classification_guided" and pending:
        raise ValidationError(f"unresolved clarifications: {', '.join(pending)}")

    notes = q.all_notes()
    entity = _unit_override(notes) or q.entity_type
    if not notes and entity == q.entity_type:
        return q

    if backend is not None:
        req = user_request(
            "parse",
            f"Rewrite this question so every listed constraint is explicit.\n"
            f"Question: {q.raw_text}\nConstraints:\n"
            + "\n".join(f"- {n}" for n in notes)
            + "\nReturn JSON only: {\"rewritten\": \"<question>\"}",
        )
        obj = loads_first_json(complete(req, backend).text)
        rewritten = obj.get("rewritten", "") if isinstance(obj, dict) else ""
        missing = [n for n in notes if n not in rewritten]
        if not rewritten or missing:
            raise ResponseFormatError(
                f"rewrite dropped constraints: {missing}", raw=str(obj)
            )
    else:
        base = q.raw_text.rstrip().rstrip("?")
        rewritten = f"{base}? (interpreting: {'; '.join(notes)})" if notes else q.raw_text

    return replace(q, raw_text=rewritten, entity_type=entity)
