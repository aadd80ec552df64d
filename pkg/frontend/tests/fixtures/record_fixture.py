"""Regenerate session.json by driving the real service in-process.

Run from the repository root with the package installed:

    python frontend/tests/fixtures/record_fixture.py

The transcript is a flat list of {method, path, status, body} rows in call
order; the console tests replay it through a fake fetch that pops the next
row recorded for each method+path. Keeping the recording scripted means the
console suite never needs the engine built, while the payload shapes stay
honest.
"""

import json
from dataclasses import replace
from pathlib import Path
from urllib.parse import quote

from fastapi.testclient import TestClient

from aggquery.backends import ScriptedBackend
from aggquery.disambiguation import spec_to_json
from aggquery.filtering import FilterConfig
from aggquery.pipeline import PipelineConfig
from aggquery.service import create_app
from aggquery.synthetic import MarkerJudgeBackend, build_marker_fixture

OUT = Path(__file__).with_name("session.json")


def scripted_planner() -> ScriptedBackend:
    """Three-step plan keyed on the snapshot-summary line of each prompt.

    Later snapshots are registered first: a prompt at snapshot 2 also carries
    history lines mentioning snapshot 1, and rules match in registration
    order.
    """
    planner = ScriptedBackend()
    planner.register_rule(
        "plan",
        "snapshot 2:",
        json.dumps({"action": "done", "note": "retained set is focused enough"}),
    )
    planner.register_rule(
        "plan",
        "snapshot 1:",
        json.dumps(
            {
                "action": "tool",
                "tool": "keyword_any",
                "args": {"terms": ["phi1"]},
                "note": "narrow to the first flag",
            }
        ),
    )
    planner.register_rule(
        "plan",
        "snapshot 0:",
        json.dumps(
            {
                "action": "tool",
                "tool": "keyword_any",
                "args": {"terms": ["phi1", "phi2"]},
                "note": "keep chunks mentioning either flag",
            }
        ),
    )
    return planner


def main() -> None:
    fx = build_marker_fixture(seed=11)
    # A gradable term in the question draws one clarification; the embedded
    # condition ids still line up with the corpus markers.
    query = replace(
        fx.query,
        raw_text="How many significant tracked projects meet phi1 and phi2?",
    )
    app = create_app(
        {fx.corpus.corpus_id: fx.corpus},
        judge_backend=MarkerJudgeBackend(),
        planner_backend=scripted_planner(),
        # handoff_tokens=0 keeps the planner consulted each step, so the
        # timeline gains several snapshots before rollback.
        config=PipelineConfig(filter_config=FilterConfig(handoff_tokens=0)),
    )
    client = TestClient(app)
    calls = []

    def call(method: str, path: str, body: dict | None = None):
        resp = client.request(method, path, json=body)
        calls.append(
            {"method": method, "path": path, "status": resp.status_code, "body": resp.json()}
        )
        return resp.json()

    call("GET", "/v1/corpora")
    submitted = call(
        "POST",
        "/v1/queries",
        {"corpus_id": fx.corpus.corpus_id, "query": spec_to_json(query)},
    )
    sid = submitted["session_id"]
    assert submitted["phase"] == "clarifying", submitted
    assert len(submitted["clarifications"]) == 1, submitted

    cid = submitted["clarifications"][0]["clarification_id"]
    answered = call(
        "POST",
        f"/v1/queries/{sid}/clarifications/{cid}",
        {"answer": "threshold: at least two satisfied flags"},
    )
    assert answered["phase"] == "filtering", answered

    for _ in range(3):
        stepped = call("POST", f"/v1/queries/{sid}/filter/step")
        if stepped["phase"] != "filtering":
            break
    before = call("GET", f"/v1/queries/{sid}")
    assert len(before["filter"]["snapshots"]) == 3, before
    assert before["filter"]["active_snapshot_id"] == 2, before

    rolled = call("POST", f"/v1/queries/{sid}/rollback", {"snapshot_id": 1})
    assert rolled["phase"] == "filtering", rolled
    assert rolled["snapshot"]["snapshot_id"] == 1, rolled
    after = call("GET", f"/v1/queries/{sid}")
    assert len(after["filter"]["snapshots"]) == 3, after

    done = call("POST", f"/v1/queries/{sid}/aggregate")
    assert done["phase"] == "done", done
    assert done["answer"]["count"] >= 1, done

    result = call("GET", f"/v1/queries/{sid}/result")
    evidence = result["answer"]["entities"][0]["evidence_chunk_ids"][0]
    call("GET", f"/v1/corpora/{fx.corpus.corpus_id}/chunks/{quote(evidence, safe='')}")
    call("GET", f"/v1/corpora/{fx.corpus.corpus_id}/chunks/absent%23none")

    OUT.write_text(json.dumps({"calls": calls}, indent=2) + "\n")
    print(f"wrote {OUT} with {len(calls)} calls")


if __name__ == "__main__":
    main()
