// Pure view functions: payload data in, HTML string out. All interactive
// elements carry data- attributes; main.ts wires them via event delegation.

import type {
  AnswerView,
  ClarificationView,
  EvidenceExcerpt,
  FilterView,
  Phase,
  SnapshotView,
} from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

export function renderPhaseChip(phase: Phase): string {
  return `<span class="phase-chip phase-${phase}">${phase}</span>`;
}

// -- clarifications ----------------------------------------------------------

function renderPrompt(c: ClarificationView): string {
  return [
    `<div class="clarification" data-clarification-id="${escapeHtml(c.clarification_id)}">`,
    `<span class="ambiguity-code">${escapeHtml(c.code)}</span>`,
    `<span class="fragment">&ldquo;${escapeHtml(c.fragment)}&rdquo;</span>`,
    `<p class="prompt-question">${escapeHtml(c.question)}</p>`,
    `<input type="text" class="answer-input" placeholder="${escapeHtml(c.default)}">`,
    `<button data-action="answer" data-clarification-id="${escapeHtml(c.clarification_id)}">Answer</button>`,
    `<button data-action="skip" data-clarification-id="${escapeHtml(c.clarification_id)}">Use default</button>`,
    `</div>`,
  ].join("\n");
}

/** One prompt per unresolved clarification; empty string when none remain. */
export function renderClarificationDialog(clarifications: ClarificationView[]): string {
  const pending = clarifications.filter((c) => !c.resolved);
  if (pending.length === 0) return "";
  return `<div class="clarification-dialog">${pending.map(renderPrompt).join("\n")}</div>`;
}

// -- filter timeline ---------------------------------------------------------

function describeInvocation(snap: SnapshotView): string {
  if (!snap.invocation) return "initial corpus";
  return `${snap.invocation.tool}(${escapeHtml(JSON.stringify(snap.invocation.params))})`;
}

function renderNode(snap: SnapshotView, activeId: number): string {
  const classes = ["timeline-node"];
  if (snap.snapshot_id === activeId) classes.push("active");
  const flag = snap.floor_flag ? '<span class="overfilter-badge" title="possible over-filtering">!</span>' : "";
  return [
    `<li class="${classes.join(" ")}" data-snapshot-id="${snap.snapshot_id}">`,
    `<span class="node-label">#${snap.snapshot_id}</span>${flag}`,
    `<span class="node-counts">${snap.retained_count} kept / ${snap.discarded_count} dropped</span>`,
    `<span class="node-tool">${describeInvocation(snap)}</span>`,
    `<button data-action="rollback" data-snapshot-id="${snap.snapshot_id}">Roll back here</button>`,
    `</li>`,
  ].join("\n");
}

export function renderTimeline(filter: FilterView | null): string {
  if (!filter) return "";
  const nodes = filter.snapshots.map((s) => renderNode(s, filter.active_snapshot_id)).join("\n");
  const budget = `<p class="budget-line">steps ${filter.used_steps}/${filter.budget}${filter.exhausted ? " (budget exhausted)" : ""}</p>`;
  return `<ol class="timeline">${nodes}</ol>${budget}`;
}

// -- answer browser ----------------------------------------------------------

function renderEvidence(chunkId: string, excerpt: EvidenceExcerpt | undefined): string {
  const id = escapeHtml(chunkId);
  if (excerpt === undefined) {
    return `<li class="evidence" data-chunk-id="${id}"><button data-action="show-evidence" data-chunk-id="${id}">${id}</button></li>`;
  }
  if (!excerpt.ok) {
    return `<li class="evidence evidence-error" data-chunk-id="${id}">${id}: <span class="excerpt-error">${escapeHtml(excerpt.text)}</span></li>`;
  }
  return `<li class="evidence" data-chunk-id="${id}"><span class="excerpt">${escapeHtml(excerpt.text)}</span></li>`;
}

export function renderAnswerBrowser(
  answer: AnswerView | null,
  evidence: Map<string, EvidenceExcerpt>,
): string {
  if (!answer) return "";
  // The badge shows the server's count; the console adds no arithmetic.
  const badge = `<span class="count-badge">${answer.count} entities</span>`;
  if (answer.entities.length === 0) {
    return `<div class="answer-browser">${badge}<p class="empty-answer">0 entities matched.</p></div>`;
  }
  const rows = answer.entities.map((e) => {
    const surfaces = e.surfaces.map(escapeHtml).join(", ");
    const verdicts = Object.entries(e.verdicts)
      .map(([k, v]) => `<span class="verdict verdict-${v}">${escapeHtml(k)}</span>`)
      .join(" ");
    const chunks = e.evidence_chunk_ids.map((cid) => renderEvidence(cid, evidence.get(cid))).join("\n");
    return [
      `<details class="entity-row" data-canonical="${escapeHtml(e.canonical)}">`,
      `<summary>${escapeHtml(e.canonical)} <span class="surfaces">(${surfaces})</span> ${verdicts}</summary>`,
      `<ul class="evidence-list">${chunks}</ul>`,
      `</details>`,
    ].join("\n");
  });
  return `<div class="answer-browser">${badge}\n${rows.join("\n")}</div>`;
}

// -- errors -------------------------------------------------------------------

export function renderErrorBar(message: string): string {
  if (!message) return "";
  return `<div class="error-bar">${escapeHtml(message)}</div>`;
}
