"""Hot numeric kernels: edit-distance token scans and BM25 accumulation.

The fuzzy-match filter runs a Levenshtein DP against every token of every
candidate chunk, and BM25 scoring walks postings for every query term;
both dominate runtime on large corpora.  Each kernel ships in two
implementations:

* a numba ``@njit`` version (default when numba imports cleanly), and
* a pure numpy/Python fallback.

Set ``AGGQUERY_NUMBA=0`` before import to force the fallback path.  Both
paths perform the same IEEE-754 operations element-wise, so results are
bit-identical; ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_enabled() -> bool:
    flag = os.environ.get("AGGQUERY_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USING_NUMBA = _numba_enabled()


def encode_text(s: str) -> np.ndarray:
    """Unicode code points of *s* as a uint32 array (kernel input form)."""
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32).copy()


def encode_tokens(tokens: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten *tokens* into one code-point array plus an offsets array.

    Token ``i`` occupies ``flat[offsets[i]:offsets[i + 1]]``.
    """
    offsets = np.zeros(len(tokens) + 1, dtype=np.int64)
    for i, tok in enumerate(tokens):
        offsets[i + 1] = offsets[i] + len(tok)
    flat = np.zeros(int(offsets[-1]), dtype=np.uint32)
    for i, tok in enumerate(tokens):
        if tok:
            flat[offsets[i] : offsets[i + 1]] = encode_text(tok)
    return flat, offsets


# ---------------------------------------------------------------------------
# Kernel bodies (plain Python over numpy arrays; numba-compilable as written)
# ---------------------------------------------------------------------------


def _levenshtein_impl(a: np.ndarray, b: np.ndarray) -> int:
    la = a.shape[0]
    lb = b.shape[0]
    if la == 0:
        return lb
    if lb == 0:
        return la
    prev = np.arange(lb + 1, dtype=np.int64)
    curr = np.zeros(lb + 1, dtype=np.int64)
    for i in range(1, la + 1):
        curr[0] = i
        ca = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ca == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if curr[j - 1] + 1 < best:
                best = curr[j - 1] + 1
            curr[j] = best
        prev, curr = curr, prev
    return int(prev[lb])


def _fuzzy_any_token_impl(
    flat: np.ndarray, offsets: np.ndarray, term: np.ndarray, max_norm: float
) -> bool:
    lt = term.shape[0]
    n = offsets.shape[0] - 1
    for i in range(n):
        start = offsets[i]
        end = offsets[i + 1]
        lk = end - start
        longest = lk if lk > lt else lt
        if longest == 0:
            return True
        # Length difference is a lower bound on the edit distance.
        diff = lk - lt if lk > lt else lt - lk
        if diff / longest > max_norm:
            continue
        dist = _levenshtein_impl(flat[start:end], term)
        if dist / longest <= max_norm:
            return True
    return False


def _bm25_accumulate_impl(
    scores: np.ndarray,
    idx: np.ndarray,
    tf: np.ndarray,
    doclen: np.ndarray,
    idf: float,
    k1: float,
    b: float,
    avgdl: float,
) -> None:
    for p in range(idx.shape[0]):
        d = idx[p]
        f = tf[p]
        denom = f + k1 * (1.0 - b + b * doclen[d] / avgdl)
        scores[d] += idf * (f * (k1 + 1.0)) / denom


# ---------------------------------------------------------------------------
# Path selection
# ---------------------------------------------------------------------------

levenshtein_py = _levenshtein_impl
fuzzy_any_token_py = _fuzzy_any_token_impl


def _bm25_accumulate_numpy(scores, idx, tf, doclen, idf, k1, b, avgdl):
    denom = tf + k1 * (1.0 - b + b * doclen[idx] / avgdl)
    np.add.at(scores, idx, idf * (tf * (k1 + 1.0)) / denom)


bm25_accumulate_py = _bm25_accumulate_numpy

if USING_NUMBA:
    from numba import njit

    levenshtein = njit(cache=True)(_levenshtein_impl)

    # The fuzzy scan is restated here (rather than jitting the impl above)
    # so its distance call binds to the jitted levenshtein.
    @njit(cache=True)
    def _fuzzy_kernel(flat, offsets, term, max_norm):  # pragma: no cover - jit body
        lt = term.shape[0]
        n = offsets.shape[0] - 1
        for i in range(n):
            start = offsets[i]
            end = offsets[i + 1]
            lk = end - start
            longest = lk if lk > lt else lt
            if longest == 0:
                return True
            diff = lk - lt if lk > lt else lt - lk
            if diff / longest > max_norm:
                continue
            dist = levenshtein(flat[start:end], term)
            if dist / longest <= max_norm:
                return True
        return False

    fuzzy_any_token = _fuzzy_kernel

    @njit(cache=True)
    def bm25_accumulate(scores, idx, tf, doclen, idf, k1, b, avgdl):  # pragma: no cover
        for p in range(idx.shape[0]):
            d = idx[p]
            f = tf[p]
            denom = f + k1 * (1.0 - b + b * doclen[d] / avgdl)
            scores[d] += idf * (f * (k1 + 1.0)) / denom

else:
    levenshtein = _levenshtein_impl
    fuzzy_any_token = _fuzzy_any_token_impl
    bm25_accumulate = _bm25_accumulate_numpy


def normalized_edit_distance(a: str, b: str) -> float:
    """Levenshtein distance divided by the longer length (0.0 for two empties)."""
    ca = encode_text(a)
    cb = encode_text(b)
    longest = max(ca.shape[0], cb.shape[0])
    if longest == 0:
        return 0.0
    return levenshtein(ca, cb) / longest
