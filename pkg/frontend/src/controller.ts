// Session state holder. Every field mirrors the most recent API payload;
// mutations call the endpoint, store the response, and let the page repaint.

import { ApiError, ConsoleApi } from "./api.js";
import type {
  AnswerView,
  ClarificationView,
  CorpusInfo,
  EvidenceExcerpt,
  FilterView,
  Phase,
} from "./types.js";

export class SessionController {
  corpora: CorpusInfo[] = [];
  sessionId: string | null = null;
  corpusId: string | null = null;
  phase: Phase | null = null;
  clarifications: ClarificationView[] = [];
  filter: FilterView | null = null;
  answer: AnswerView | null = null;
  stats: Record<string, number> | null = null;
  lastError = "";
  readonly evidence = new Map<string, EvidenceExcerpt>();

  constructor(private readonly api: ConsoleApi) {}

  private capture(err: unknown): never {
    this.lastError = err instanceof ApiError ? err.message : String(err);
    throw err;
  }

  async loadCorpora(): Promise<void> {
    this.corpora = (await this.api.listCorpora()).corpora;
  }

  async submit(corpusId: string, question: string): Promise<void> {
    const resp = await this.api.submit(corpusId, question).catch((e) => this.capture(e));
    this.sessionId = resp.session_id;
    this.corpusId = corpusId;
    this.phase = resp.phase;
    this.clarifications = resp.clarifications;
    this.filter = null;
    this.answer = null;
    this.evidence.clear();
    this.lastError = "";
  }

  private requireSession(): string {
    if (this.sessionId === null) throw new Error("no active session");
    return this.sessionId;
  }

  async answerClarification(clarificationId: string, answer: string): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api
      .answerClarification(sid, clarificationId, answer)
      .catch((e) => this.capture(e));
    this.phase = resp.phase;
    this.clarifications = this.clarifications.map((c) =>
      c.clarification_id === clarificationId ? resp.clarification : c,
    );
  }

  async skipClarification(clarificationId: string): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api.skipClarification(sid, clarificationId).catch((e) => this.capture(e));
    this.phase = resp.phase;
    this.clarifications = this.clarifications.map((c) =>
      c.clarification_id === clarificationId ? resp.clarification : c,
    );
  }

  async step(): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api.filterStep(sid).catch((e) => this.capture(e));
    this.phase = resp.phase;
  }

  async rollbackTo(snapshotId: number): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api.rollback(sid, snapshotId).catch((e) => this.capture(e));
    this.phase = resp.phase;
    // A rollback invalidates any stored answer server-side too.
    this.answer = null;
    this.stats = null;
  }

  async aggregate(): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api.aggregate(sid).catch((e) => this.capture(e));
    this.phase = resp.phase;
    this.answer = resp.answer;
    this.stats = resp.stats;
  }

  async loadResult(): Promise<void> {
    const sid = this.requireSession();
    const resp = await this.api.result(sid).catch((e) => this.capture(e));
    this.phase = resp.phase;
    this.answer = resp.answer;
    this.stats = resp.stats;
  }

  /** Re-pull the whole session; the source of truth for timeline rendering. */
  async refresh(): Promise<void> {
    const sid = this.requireSession();
    const view = await this.api.session(sid).catch((e) => this.capture(e));
    this.phase = view.phase;
    this.clarifications = view.clarifications;
    this.filter = view.filter;
    if (view.answer) this.answer = view.answer;
    if (view.stats) this.stats = view.stats;
  }

  /** Fetch one evidence excerpt; failures become row-level placeholders. */
  async loadEvidence(chunkId: string): Promise<void> {
    if (this.corpusId === null || this.evidence.has(chunkId)) return;
    try {
      const chunk = await this.api.chunk(this.corpusId, chunkId);
      this.evidence.set(chunkId, { ok: true, text: chunk.text });
    } catch (err) {
      const message = err instanceof ApiError ? err.envelope.message : String(err);
      this.evidence.set(chunkId, { ok: false, text: `could not load: ${message}` });
    }
  }

  get polling(): boolean {
    return this.phase === "filtering" || this.phase === "aggregating";
  }
}
