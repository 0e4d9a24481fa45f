/** Session loop: fetch trials until the plan is exhausted, one at a time.
 *
 * Posting is strictly serialized — the next trial is not requested until the
 * previous answer is acknowledged — so the server's trial log preserves
 * presentation order and a flaky network cannot interleave answers.
 * Progress reported to the participant is position only ("trial 3 of 5");
 * accuracy is never computed here because the client never has labels.
 */

import { Answer, Trial, TrialClient } from "./api.js";

/** What the responder returns for one trial. */
export interface Response {
  chosen: 0 | 1;
  S: number;
  RT_ms: number;
}

/** Produces the participant's response for one presented trial. */
export type Responder = (
  trial: Trial,
  index: number,
) => Promise<Response> | Response;

export interface ProgressEvent {
  /** 0-based index of the trial just completed. */
  completed: number;
  /** Total trials in the plan, from session creation. */
  total: number;
}

export interface RunOptions {
  onProgress?: (event: ProgressEvent) => void;
}

export interface RunResult {
  sessionId: string;
  answered: number;
}

/**
 * Create a session and drive it to exhaustion. Returns once the server
 * responds 410 to the next-trial poll.
 */
export async function runSession(
  client: TrialClient,
  participantId: string,
  cohort: "lay" | "cv_expert" | "aigi_expert",
  responder: Responder,
  options: RunOptions & { seed?: number } = {},
): Promise<RunResult> {
  const info = await client.createSession(
    participantId,
    cohort,
    options.seed ?? 0,
  );
  let index = 0;
  for (;;) {
    const trial = await client.nextTrial(info.sessionId);
    if (trial === null) break;
    const response = await responder(trial, index);
    const answer: Answer = {
      trialId: trial.trialId,
      chosen: response.chosen,
      S: response.S,
      RT_ms: response.RT_ms,
    };
    await client.submitAnswer(answer);
    options.onProgress?.({ completed: index, total: info.nTrials });
    index += 1;
  }
  return { sessionId: info.sessionId, answered: index };
}
