// Thin typed client for the /v1 session API. The fetch implementation is
// injectable so tests can replay recorded transcripts with no server.

import type {
  AggregateResponse,
  ChunkView,
  ClarifyResponse,
  CorpusInfo,
  ErrorEnvelope,
  RollbackResponse,
  SessionView,
  StepResponse,
  SubmitResponse,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly envelope: ErrorEnvelope,
  ) {
    super(`${envelope.code}: ${envelope.message}`);
  }
}

export class ConsoleApi {
  private readonly fetchImpl: FetchLike;

  constructor(
    private readonly base: string = "",
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchImpl(this.base + path, init);
    const payload = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, payload as ErrorEnvelope);
    }
    return payload as T;
  }

  listCorpora(): Promise<{ corpora: CorpusInfo[] }> {
    return this.call("GET", "/v1/corpora");
  }

  submit(corpusId: string, question: string, budget?: number): Promise<SubmitResponse> {
    const body: Record<string, unknown> = { corpus_id: corpusId, question };
    if (budget !== undefined) body.budget = budget;
    return this.call("POST", "/v1/queries", body);
  }

  session(sessionId: string): Promise<SessionView> {
    return this.call("GET", `/v1/queries/${sessionId}`);
  }

  answerClarification(
    sessionId: string,
    clarificationId: string,
    answer: string,
  ): Promise<ClarifyResponse> {
    return this.call("POST", `/v1/queries/${sessionId}/clarifications/${clarificationId}`, {
      answer,
    });
  }

  skipClarification(sessionId: string, clarificationId: string): Promise<ClarifyResponse> {
    return this.call("POST", `/v1/queries/${sessionId}/clarifications/${clarificationId}`, {
      skip: true,
    });
  }

  filterStep(sessionId: string): Promise<StepResponse> {
    return this.call("POST", `/v1/queries/${sessionId}/filter/step`);
  }

  rollback(sessionId: string, snapshotId: number): Promise<RollbackResponse> {
    return this.call("POST", `/v1/queries/${sessionId}/rollback`, { snapshot_id: snapshotId });
  }

  aggregate(sessionId: string): Promise<AggregateResponse> {
    return this.call("POST", `/v1/queries/${sessionId}/aggregate`);
  }

  result(sessionId: string): Promise<AggregateResponse> {
    return this.call("GET", `/v1/queries/${sessionId}/result`);
  }

  chunk(corpusId: string, chunkId: string): Promise<ChunkView> {
    // Chunk ids contain '#'; unencoded it would be read as a fragment.
    return this.call("GET", `/v1/corpora/${corpusId}/chunks/${encodeURIComponent(chunkId)}`);
  }
}
