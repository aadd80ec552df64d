"""Tokenizer tests: raw span counting vs the analyzer used for indexing."""

from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from aggquery.tokens import analyze, count_tokens, token_spans


def test_token_spans_offsets():
    assert token_spans("") == []
    assert token_spans("   ") == []
    assert token_spans("ab  cd") == [(0, 2), (4, 6)]
    assert token_spans("\n x\t") == [(2, 3)]


def test_count_tokens():
    assert count_tokens("") == 0
    assert count_tokens("one two\tthree\nfour") == 4


def test_analyze_strips_edge_punctuation():
    assert analyze("Hello, World!") == ["hello", "world"]
    assert analyze('"quoted" (parens)') == ["quoted", "parens"]
    assert analyze("co-op it's") == ["co-op", "it's"]
    assert analyze("...  —  ") == []
    assert analyze("R2-D2, GPT-4.") == ["r2-d2", "gpt-4"]


def test_analyze_casefolds():
    assert analyze("STRASSE Straße") == ["strasse", "strasse"]


@given(st.text(max_size=200))
def test_span_count_matches_split(text):
    spans = token_spans(text)
    assert len(spans) == len(text.split())
    assert count_tokens(text) == len(spans)
    for start, end in spans:
        assert start < end
        assert text[start:end].split() == [text[start:end]]


@given(st.text(max_size=100))
def test_analyze_never_returns_empty_terms(text):
    assert all(term for term in analyze(text))
    assert all(term == term.casefold() for term in analyze(text))
