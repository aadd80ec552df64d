"""Hot-kernel timing: compiled path vs the AGGQUERY_NUMBA=0 fallback.

Run directly:

    python benchmarks/bench_kernels.py

The script times the edit-distance, fuzzy-scan, and score-accumulation
kernels in the current process, then re-executes itself with the fallback
flag set and prints a side-by-side table. Pass --json to emit one run's
raw numbers (used by the self-invocation).
"""

import json
import os
import random
import string
import subprocess
import sys
import time

REPEATS = 5
SEED = 7


def _random_word(rng: random.Random) -> str:
    return "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(3, 12)))


def build_workloads():
    import numpy as np

    from aggquery.kernels import encode_text, encode_tokens

    rng = random.Random(SEED)
    vocab = [_random_word(rng) for _ in range(800)]

    pairs = [
        (encode_text(rng.choice(vocab)), encode_text(rng.choice(vocab))) for _ in range(4000)
    ]
    docs = [encode_tokens([rng.choice(vocab) for _ in range(80)]) for _ in range(600)]
    term = encode_text("retrieval")

    n_docs = 20000
    doclen = np.asarray([rng.randint(20, 400) for _ in range(n_docs)], dtype=np.float64)
    postings = []
    for _ in range(200):
        idx = np.asarray(sorted(rng.sample(range(n_docs), 3000)), dtype=np.int64)
        tf = np.asarray([rng.randint(1, 8) for _ in range(3000)], dtype=np.float64)
        postings.append((idx, tf, rng.uniform(0.5, 4.0)))

    return {"pairs": pairs, "docs": docs, "term": term, "doclen": doclen, "postings": postings}


def time_kernels(work) -> dict:
    import numpy as np

    from aggquery import kernels

    def best_of(fn):
        fn()  # warmup; first call pays any JIT compile cost
        best = float("inf")
        for _ in range(REPEATS):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    def run_levenshtein():
        total = 0
        for a, b in work["pairs"]:
            total += kernels.levenshtein(a, b)
        return total

    def run_fuzzy():
        hits = 0
        for flat, offsets in work["docs"]:
            hits += kernels.fuzzy_any_token(flat, offsets, work["term"], 0.25)
        return hits

    def run_bm25():
        scores = np.zeros(work["doclen"].shape[0], dtype=np.float64)
        for idx, tf, idf in work["postings"]:
            kernels.bm25_accumulate(scores, idx, tf, work["doclen"], idf, 1.2, 0.75, 120.0)
        return scores

    return {
        "using_numba": kernels.USING_NUMBA,
        "timings": {
            "levenshtein_4000_pairs": best_of(run_levenshtein),
            "fuzzy_scan_600_docs": best_of(run_fuzzy),
            "bm25_accumulate_200_terms": best_of(run_bm25),
        },
    }


def main() -> int:
    result = time_kernels(build_workloads())
    if "--json" in sys.argv:
        print(json.dumps(result))
        return 0

    runs = [result]
    if result["using_numba"]:
        env = dict(os.environ, AGGQUERY_NUMBA="0")
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--json"],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        runs.append(json.loads(out.stdout))
    else:
        print("compiled path disabled in this process; timing the fallback only\n")

    names = list(runs[0]["timings"])
    width = max(len(n) for n in names)
    header = f"{'kernel':<{width}}  " + "  ".join(
        f"{'numba' if r['using_numba'] else 'numpy':>10}" for r in runs
    )
    print(header)
    print("-" * len(header))
    for name in names:
        row = f"{name:<{width}}  " + "  ".join(
            f"{r['timings'][name] * 1000:>8.2f}ms" for r in runs
        )
        if len(runs) == 2:
            ratio = runs[1]["timings"][name] / runs[0]["timings"][name]
            row += f"  x{ratio:.1f}"
        print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
