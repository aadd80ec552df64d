"""aggquery: aggregation-query answering over document corpora.

The pipeline turns an ambiguous counting question into an auditable answer
set: disambiguate the question into explicit conditions, iteratively filter
the corpus with cheap tools under snapshot/rollback semantics, then cluster
and batch the surviving chunks for LLM extraction and entity alignment.
"""

from __future__ import annotations

__version__ = "0.1.0"
