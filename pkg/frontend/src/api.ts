/** Typed client for the listening-test service.
 *
 * Submission is idempotent: the comparison id identifies the judgment, so a
 * retry after a network failure that reaches a server which already recorded
 * it comes back as DuplicateSubmission, which the client treats as success.
 */

import type { ComparisonPayload, SessionInfo, SubmitRequest, SubmitResponse } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function errorOf(response: Response): Promise<ApiError> {
  let code = `HTTP${response.status}`;
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { error?: string; detail?: string };
    if (body.error) code = body.error;
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, detail);
}

export class ListenApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(assessor: string, category: string, equipment = ''): Promise<SessionInfo> {
    const response = await this.fetchImpl(this.url('/sessions'), {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ assessor, category, equipment }),
    });
    if (!response.ok) throw await errorOf(response);
    return (await response.json()) as SessionInfo;
  }

  /** Next scheduled comparison, or null once the plan is exhausted. */
  async nextComparison(sessionId: string): Promise<ComparisonPayload | null> {
    const response = await this.fetchImpl(this.url(`/sessions/${sessionId}/next`));
    if (response.status === 410) return null;
    if (!response.ok) throw await errorOf(response);
    return (await response.json()) as ComparisonPayload;
  }

  /**
   * Submit one judgment, retrying on network failure with the same
   * comparison id. A DuplicateSubmission response means an earlier attempt
   * landed: the UI advances without double-counting.
   */
  async submitResult(request: SubmitRequest, retries = 2): Promise<SubmitResponse | 'duplicate'> {
    let lastNetworkError: unknown = null;
    for (let attempt = 0; attempt <= retries; attempt += 1) {
      let response: Response;
      try {
        response = await this.fetchImpl(this.url('/results'), {
          method: 'POST',
          headers: { 'content-type': 'application/json' },
          body: JSON.stringify(request),
        });
      } catch (networkError) {
        lastNetworkError = networkError;
        continue;
      }
      if (response.status === 409) return 'duplicate';
      if (!response.ok) throw await errorOf(response);
      return (await response.json()) as SubmitResponse;
    }
    throw lastNetworkError instanceof Error
      ? lastNetworkError
      : new Error('submission failed after retries');
  }

  audioUrl(path: string): string {
    return this.url(path);
  }
}
