/** Typed client for the trial service.
 *
 * Blinding is enforced at this layer, defence in depth against a buggy or
 * hostile server: every response body is scanned for label-like keys before
 * anything is handed to the UI, and only the fields the UI needs are copied
 * out. Answers are validated client-side before they are posted, so the
 * participant can never submit an out-of-range rating or a non-positive
 * reaction time. Trial ids make answer posts idempotent: a retry that lands
 * after the original is acknowledged with 409, which the client treats as
 * success.
 */

export interface SessionInfo {
  sessionId: string;
  nTrials: number;
}

export interface Trial {
  trialId: string;
  imageUrl: string;
}

export type Cohort = "lay" | "cv_expert" | "aigi_expert";

export interface Answer {
  trialId: string;
  /** 0 = judged real, 1 = judged generated. */
  chosen: 0 | 1;
  /** Realism rating, integer 1..4, collected after the binary choice. */
  S: number;
  /** Reaction time in milliseconds, strictly positive. */
  RT_ms: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(`HTTP ${status}: ${message}`);
    this.name = "ApiError";
  }
}

/** Thrown when a response tries to smuggle ground truth to the client. */
export class BlindingError extends Error {
  constructor(key: string) {
    super(`response contained forbidden key ${JSON.stringify(key)}`);
    this.name = "BlindingError";
  }
}

/** Keys that would unblind the participant if they ever reached the UI. */
const FORBIDDEN_KEYS = new Set([
  "label",
  "ground_truth",
  "groundtruth",
  "is_generated",
  "y_pred",
  "accuracy",
  "correct",
]);

export function assertBlinded(value: unknown): void {
  if (Array.isArray(value)) {
    for (const item of value) assertBlinded(item);
    return;
  }
  if (value !== null && typeof value === "object") {
    for (const [key, inner] of Object.entries(value)) {
      if (FORBIDDEN_KEYS.has(key.toLowerCase())) throw new BlindingError(key);
      assertBlinded(inner);
    }
  }
}

/** Validate an answer before it goes on the wire. Throws RangeError. */
export function validateAnswer(answer: Answer): void {
  if (typeof answer.trialId !== "string" || answer.trialId.length === 0) {
    throw new RangeError("trialId must be a non-empty string");
  }
  if (answer.chosen !== 0 && answer.chosen !== 1) {
    throw new RangeError(`chosen must be 0 or 1, got ${answer.chosen}`);
  }
  if (!Number.isInteger(answer.S) || answer.S < 1 || answer.S > 4) {
    throw new RangeError(`S must be an integer in 1..4, got ${answer.S}`);
  }
  if (!Number.isFinite(answer.RT_ms) || answer.RT_ms <= 0) {
    throw new RangeError(`RT_ms must be finite and > 0, got ${answer.RT_ms}`);
  }
}

export type FetchFn = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export interface ClientOptions {
  token?: string;
  /** Injectable for tests; defaults to the global fetch. */
  fetchFn?: FetchFn;
}

async function errorDetail(res: Response): Promise<string> {
  try {
    const body: unknown = await res.json();
    if (body !== null && typeof body === "object" && "detail" in body) {
      return String((body as { detail: unknown }).detail);
    }
    return JSON.stringify(body);
  } catch {
    return res.statusText || "request failed";
  }
}

export class TrialClient {
  private readonly base: string;
  private readonly fetchFn: FetchFn;
  private readonly token: string | undefined;
  /** Trial ids already posted, for client-side duplicate suppression. */
  private readonly posted = new Set<string>();

  constructor(baseUrl: string, options: ClientOptions = {}) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchFn = options.fetchFn ?? ((url, init) => fetch(url, init));
    this.token = options.token;
  }

  private headers(json: boolean): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token !== undefined) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  /** One retry on network failure; the server's trial-id idempotency and a
   * 409-as-success policy make the retry safe. */
  private async request(url: string, init: RequestInit): Promise<Response> {
    try {
      return await this.fetchFn(url, init);
    } catch {
      return await this.fetchFn(url, init);
    }
  }

  async createSession(
    participantId: string,
    cohort: Cohort,
    seed = 0,
  ): Promise<SessionInfo> {
    const res = await this.request(`${this.base}/v1/session`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({
        participant_id: participantId,
        cohort,
        seed,
      }),
    });
    if (res.status !== 201) throw new ApiError(res.status, await errorDetail(res));
    const body: unknown = await res.json();
    assertBlinded(body);
    const obj = body as { session_id: string; n_trials: number };
    return { sessionId: obj.session_id, nTrials: obj.n_trials };
  }

  /** Next trial in the plan, or null once the session is exhausted (410). */
  async nextTrial(sessionId: string): Promise<Trial | null> {
    const url = `${this.base}/v1/trial/next?session=${encodeURIComponent(sessionId)}`;
    const res = await this.request(url, {
      method: "GET",
      headers: this.headers(false),
    });
    if (res.status === 410) return null;
    if (res.status !== 200) throw new ApiError(res.status, await errorDetail(res));
    const body: unknown = await res.json();
    assertBlinded(body);
    const obj = body as { trial_id: string; image_url: string };
    // Copy out exactly the fields the UI may see; drop anything else.
    return { trialId: obj.trial_id, imageUrl: obj.image_url };
  }

  /**
   * Post one answer. Resolves on 204; a 409 (already answered) also resolves,
   * since the answer is on record either way. Repeat submissions of a trial
   * id this client already posted are suppressed without touching the
   * network.
   */
  async submitAnswer(answer: Answer): Promise<void> {
    validateAnswer(answer);
    if (this.posted.has(answer.trialId)) return;
    const res = await this.request(`${this.base}/v1/trial/answer`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({
        trial_id: answer.trialId,
        chosen: answer.chosen,
        S: answer.S,
        RT_ms: answer.RT_ms,
      }),
    });
    if (res.status !== 204 && res.status !== 409) {
      throw new ApiError(res.status, await errorDetail(res));
    }
    this.posted.add(answer.trialId);
  }
}
