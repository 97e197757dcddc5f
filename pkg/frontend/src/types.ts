/** Payload shapes of the listening-test HTTP API. */

export interface SessionInfo {
  session_id: string;
  assessor: string;
  category: string;
  completed: number;
  required: number;
}

/** A scheduled comparison. Stimulus URLs are opaque; no model identities. */
export interface ComparisonPayload {
  comparison_id: string;
  session_id: string;
  source: string;
  stimulus_kind: string;
  reference: string;
  a: string;
  b: string;
  completed: number;
  required: number;
}

export interface SubmitRequest {
  comparison_id: string;
  choice: 'a' | 'b';
  elapsed_seconds: number;
  switch_count: number;
}

export interface SubmitResponse {
  recorded: boolean;
  completed: number | null;
  required: number | null;
}

export type ClipKey = 'reference' | 'a' | 'b';
