// Mirrors of the /v1 JSON payloads. The console renders these verbatim and
// never derives pipeline state of its own.

export type Phase = "clarifying" | "filtering" | "aggregating" | "done" | "failed";

export interface CorpusInfo {
  corpus_id: string;
  documents: number;
  chunks: number;
}

export interface ClarificationView {
  clarification_id: string;
  code: string;
  question: string;
  default: string;
  target: string;
  fragment: string;
  answer: string | null;
  resolution_note: string | null;
  resolved: boolean;
}

export interface ToolInvocationView {
  tool: string;
  params: Record<string, unknown>;
  target: number;
}

export interface SnapshotView {
  snapshot_id: number;
  parent_id: number | null;
  retained_count: number;
  discarded_count: number;
  retained_tokens: number;
  floor_flag: boolean;
  invocation: ToolInvocationView | null;
}

export interface FilterView {
  active_snapshot_id: number;
  used_steps: number;
  budget: number;
  exhausted: boolean;
  snapshots: SnapshotView[];
}

export interface EntityView {
  canonical: string;
  surfaces: string[];
  evidence_chunk_ids: string[];
  verdicts: Record<string, boolean>;
}

export interface AnswerView {
  query_id: string;
  count: number;
  entities: EntityView[];
  trail: Record<string, unknown>[];
}

export interface SessionView {
  session_id: string;
  corpus_id: string;
  phase: Phase;
  question: string;
  query: Record<string, unknown>;
  clarifications: ClarificationView[];
  filter: FilterView | null;
  answer: AnswerView | null;
  stats: Record<string, number> | null;
  error: Record<string, unknown> | null;
}

export interface SubmitResponse {
  session_id: string;
  phase: Phase;
  clarifications: ClarificationView[];
}

export interface ClarifyResponse {
  session_id: string;
  phase: Phase;
  clarification: ClarificationView;
  rewritten_question: string;
}

export interface StepResponse {
  session_id: string;
  phase: Phase;
  decision: Record<string, unknown>;
  snapshot: SnapshotView;
  used_steps: number;
  budget: number;
}

export interface RollbackResponse {
  session_id: string;
  phase: Phase;
  snapshot: SnapshotView;
  snapshots_kept: number;
}

export interface AggregateResponse {
  session_id: string;
  phase: Phase;
  answer: AnswerView;
  stats: Record<string, number>;
}

export interface ChunkView {
  chunk_id: string;
  doc_id: string;
  text: string;
  token_count: number;
}

export interface ErrorEnvelope {
  code: string;
  message: string;
  detail: Record<string, unknown>;
}

/** Per-chunk evidence fetch outcome kept alongside the answer view. */
export interface EvidenceExcerpt {
  ok: boolean;
  text: string;
}
