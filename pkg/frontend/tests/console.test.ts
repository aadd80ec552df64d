// Round-trip tests against the recorded transcript in fixtures/session.json.
// A fake fetch replays the recorded response for each method+path in call
// order, so the suite runs with no server and no engine built.

import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import { ConsoleApi, type FetchLike } from "../src/api";
import { SessionController } from "../src/controller";
import {
  renderAnswerBrowser,
  renderClarificationDialog,
  renderPhaseChip,
  renderTimeline,
} from "../src/render";

interface RecordedCall {
  method: string;
  path: string;
  status: number;
  body: unknown;
}

const transcript: { calls: RecordedCall[] } = JSON.parse(
  readFileSync(new URL("./fixtures/session.json", import.meta.url), "utf8"),
);

function replayFetch(): FetchLike {
  const queues = new Map<string, RecordedCall[]>();
  for (const call of transcript.calls) {
    const key = `${call.method} ${call.path}`;
    const queue = queues.get(key) ?? [];
    queue.push(call);
    queues.set(key, queue);
  }
  return async (input, init) => {
    const key = `${init?.method ?? "GET"} ${input}`;
    const row = queues.get(key)?.shift();
    if (!row) throw new Error(`no recorded call left for ${key}`);
    return new Response(JSON.stringify(row.body), {
      status: row.status,
      headers: { "content-type": "application/json" },
    });
  };
}

function newConsole(): SessionController {
  return new SessionController(new ConsoleApi("", replayFetch()));
}

const QUESTION = "How many significant tracked projects meet phi1 and phi2?";

async function openSession(c: SessionController): Promise<void> {
  await c.loadCorpora();
  await c.submit(c.corpora[0].corpus_id, QUESTION);
}

async function reachTimeline(c: SessionController): Promise<void> {
  await openSession(c);
  await c.answerClarification(c.clarifications[0].clarification_id, "at least two flags");
  while (c.phase === "filtering") {
    await c.step();
  }
  await c.refresh();
}

async function reachAnswer(c: SessionController): Promise<void> {
  await reachTimeline(c);
  await c.rollbackTo(1);
  await c.refresh();
  await c.aggregate();
}

describe("clarification dialog", () => {
  it("shows one prompt per pending clarification with code and fragment", async () => {
    const c = newConsole();
    await openSession(c);
    expect(c.phase).toBe("clarifying");
    const html = renderClarificationDialog(c.clarifications);
    expect(html.match(/class="clarification"/g)).toHaveLength(1);
    expect(html).toContain('<span class="ambiguity-code">A1</span>');
    expect(html).toContain("significant");
  });

  it("submitting an answer reflects the phase change", async () => {
    const c = newConsole();
    await openSession(c);
    expect(renderPhaseChip(c.phase!)).toContain("clarifying");

    await c.answerClarification(c.clarifications[0].clarification_id, "at least two flags");
    expect(c.phase).toBe("filtering");
    expect(renderPhaseChip(c.phase!)).toContain("filtering");
    // Every prompt is resolved, so the dialog disappears.
    expect(renderClarificationDialog(c.clarifications)).toBe("");
  });
});

describe("filter timeline", () => {
  it("renders one node per snapshot with server counts", async () => {
    const c = newConsole();
    await reachTimeline(c);
    const html = renderTimeline(c.filter);
    expect(html.match(/class="timeline-node/g)).toHaveLength(3);
    for (const snap of c.filter!.snapshots) {
      expect(html).toContain(`${snap.retained_count} kept / ${snap.discarded_count} dropped`);
    }
    expect(html).toContain('<li class="timeline-node active" data-snapshot-id="2">');
  });

  it("rollback click moves the active marker without removing later snapshots", async () => {
    const c = newConsole();
    await reachTimeline(c);
    const before = renderTimeline(c.filter);
    expect(before).toContain('<li class="timeline-node active" data-snapshot-id="2">');

    await c.rollbackTo(1);
    await c.refresh();
    const after = renderTimeline(c.filter);
    expect(after).toContain('<li class="timeline-node active" data-snapshot-id="1">');
    // Later snapshots stay on the timeline, only the marker moved.
    expect(after.match(/class="timeline-node/g)).toHaveLength(3);
    expect(after).toContain('data-snapshot-id="2"');
    expect(c.phase).toBe("filtering");
  });
});

describe("answer browser", () => {
  it("count badge equals the fixture entity count", async () => {
    const c = newConsole();
    await reachAnswer(c);
    expect(c.phase).toBe("done");

    const recorded = transcript.calls.find(
      (call) => call.method === "POST" && call.path.endsWith("/aggregate"),
    )!;
    const entities = (recorded.body as { answer: { entities: unknown[]; count: number } }).answer;
    expect(entities.count).toBe(entities.entities.length);

    const html = renderAnswerBrowser(c.answer, c.evidence);
    expect(html).toContain(`<span class="count-badge">${entities.count} entities</span>`);
    expect(html.match(/class="entity-row"/g)).toHaveLength(entities.entities.length);
  });

  it("loads evidence excerpts by chunk id and keeps failures row-level", async () => {
    const c = newConsole();
    await reachAnswer(c);
    const chunkId = c.answer!.entities[0].evidence_chunk_ids[0];

    await c.loadEvidence(chunkId);
    await c.loadEvidence("absent#none");

    const html = renderAnswerBrowser(c.answer, c.evidence);
    expect(c.evidence.get(chunkId)!.ok).toBe(true);
    expect(html).toContain(c.evidence.get(chunkId)!.text.slice(0, 20));

    // The recorded 404 envelope becomes a placeholder on the row that cites
    // the missing chunk; other rows are untouched.
    expect(c.evidence.get("absent#none")).toEqual({
      ok: false,
      text: expect.stringContaining("could not load") as string,
    });
    const missingRow = renderAnswerBrowser(
      {
        query_id: c.answer!.query_id,
        count: 1,
        entities: [
          {
            canonical: "ghost",
            surfaces: ["ghost"],
            evidence_chunk_ids: ["absent#none", chunkId],
            verdicts: {},
          },
        ],
        trail: [],
      },
      c.evidence,
    );
    expect(missingRow).toContain("evidence-error");
    expect(missingRow).toContain("could not load");
    expect(missingRow).toContain(c.evidence.get(chunkId)!.text.slice(0, 20));
  });

  it("result endpoint reloads the stored answer", async () => {
    const c = newConsole();
    await reachAnswer(c);
    const fromAggregate = c.answer!.count;
    c.answer = null;

    await c.loadResult();
    expect(c.answer!.count).toBe(fromAggregate);
  });
});
