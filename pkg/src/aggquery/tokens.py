"""Tokenization primitives shared by chunking, indexing and budgeting.

Two distinct notions of "token" live here and must not be conflated:

* ``token_spans`` / ``count_tokens`` implement the corpus token counter: a
  token is a maximal run of non-whitespace characters (Unicode whitespace,
  same as ``str.split()``).  Chunk sizes, context budgets and usage
  accounting are all expressed in these tokens.
* ``analyze`` is the index analyzer used by BM25 and TF-IDF: casefolded
  whitespace tokens with leading/trailing punctuation stripped.  Changing
  it invalidates persisted indexes.
"""

from __future__ import annotations

import re
import string

_TOKEN_RE = re.compile(r"\S+")

# Edge punctuation stripped by the analyzer: ASCII punctuation plus the
# typographic quotes/dashes common in text extracted from PDFs.
_EDGE_CHARS = string.punctuation + "‘’“”–—…«»"


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character (start, end) offsets of every whitespace token in order."""
    return [(m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    """Number of whitespace tokens in *text*."""
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def analyze(text: str) -> list[str]:
    """Index terms for *text*: casefold, split on whitespace, strip edge punctuation.

    Tokens that are empty after stripping (pure punctuation) are dropped.
    """
    terms = []
    for raw in text.casefold().split():
        term = raw.strip(_EDGE_CHARS)
        if term:
            terms.append(term)
    return terms
