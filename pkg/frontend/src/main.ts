// Page wiring: one controller per tab, event delegation for the dynamic
// regions, 1s polling while the pipeline is filtering or aggregating.

import { ConsoleApi } from "./api.js";
import { SessionController } from "./controller.js";
import {
  renderAnswerBrowser,
  renderClarificationDialog,
  renderErrorBar,
  renderPhaseChip,
  renderTimeline,
} from "./render.js";

const POLL_MS = 1000;

declare global {
  interface Window {
    AGGQUERY_BASE?: string;
  }
}

const api = new ConsoleApi(window.AGGQUERY_BASE ?? "");
const controller = new SessionController(api);

const corpusSelect = document.getElementById("corpus") as HTMLSelectElement;
const questionInput = document.getElementById("question") as HTMLInputElement;
const submitForm = document.getElementById("submit-form") as HTMLFormElement;
const phaseEl = document.getElementById("phase")!;
const errorEl = document.getElementById("error")!;
const dialogEl = document.getElementById("clarifications")!;
const timelineEl = document.getElementById("timeline")!;
const answerEl = document.getElementById("answer")!;
const stepButton = document.getElementById("step") as HTMLButtonElement;
const aggregateButton = document.getElementById("aggregate") as HTMLButtonElement;

let pollTimer: number | undefined;

function paint(): void {
  phaseEl.innerHTML = controller.phase ? renderPhaseChip(controller.phase) : "";
  errorEl.innerHTML = renderErrorBar(controller.lastError);
  dialogEl.innerHTML =
    controller.phase === "clarifying" ? renderClarificationDialog(controller.clarifications) : "";
  timelineEl.innerHTML = renderTimeline(controller.filter);
  answerEl.innerHTML = renderAnswerBrowser(controller.answer, controller.evidence);
  const active = controller.phase === "filtering" || controller.phase === "aggregating";
  stepButton.disabled = controller.phase !== "filtering";
  aggregateButton.disabled = !active;
  schedulePoll();
}

function schedulePoll(): void {
  if (pollTimer !== undefined) {
    window.clearInterval(pollTimer);
    pollTimer = undefined;
  }
  if (controller.polling) {
    pollTimer = window.setInterval(() => {
      void controller
        .refresh()
        .then(paint)
        .catch(() => paint());
    }, POLL_MS);
  }
}

async function act(run: () => Promise<void>): Promise<void> {
  try {
    await run();
    controller.lastError = "";
  } catch {
    // controller.capture already recorded the message
  }
  if (controller.sessionId && controller.phase !== "clarifying") {
    await controller.refresh().catch(() => undefined);
  }
  paint();
}

submitForm.addEventListener("submit", (event) => {
  event.preventDefault();
  void act(() => controller.submit(corpusSelect.value, questionInput.value));
});

stepButton.addEventListener("click", () => void act(() => controller.step()));
aggregateButton.addEventListener("click", () => void act(() => controller.aggregate()));

dialogEl.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest("button[data-action]");
  if (!button) return;
  const cid = button.getAttribute("data-clarification-id")!;
  if (button.getAttribute("data-action") === "skip") {
    void act(() => controller.skipClarification(cid));
    return;
  }
  const row = button.closest(".clarification")!;
  const input = row.querySelector<HTMLInputElement>(".answer-input")!;
  void act(() => controller.answerClarification(cid, input.value));
});

timelineEl.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest('button[data-action="rollback"]');
  if (!button) return;
  const snapshotId = Number(button.getAttribute("data-snapshot-id"));
  void act(() => controller.rollbackTo(snapshotId));
});

answerEl.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest('button[data-action="show-evidence"]');
  if (!button) return;
  const chunkId = button.getAttribute("data-chunk-id")!;
  void controller.loadEvidence(chunkId).then(paint);
});

void controller.loadCorpora().then(() => {
  corpusSelect.innerHTML = controller.corpora
    .map(
      (c) =>
        `<option value="${c.corpus_id}">${c.corpus_id} (${c.documents} docs, ${c.chunks} chunks)</option>`,
    )
    .join("");
  paint();
});
