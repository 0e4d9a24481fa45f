/** Browser entry point: keyboard-driven trial runner.
 *
 * Flow per trial: fetch → paint stimulus → wait for R/F (real/fake) →
 * realism rating 1..4 → post → next. The reaction time runs from the frame
 * the image paints to the first R/F keypress; keys hit before the paint are
 * swallowed. The rating prompt only appears after the binary choice so the
 * choice is never anchored by the slider position.
 */

import { Trial, TrialClient } from "./api.js";
import { RTClock } from "./timer.js";
import { runSession } from "./session.js";

type Phase = "loading" | "stimulus" | "rating" | "posting" | "done";

interface Elements {
  image: HTMLImageElement;
  progress: HTMLElement;
  prompt: HTMLElement;
  rating: HTMLElement;
  status: HTMLElement;
}

function grab(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el;
}

function getElements(): Elements {
  return {
    image: grab("stimulus") as HTMLImageElement,
    progress: grab("progress"),
    prompt: grab("prompt"),
    rating: grab("rating"),
    status: grab("status"),
  };
}

/** Wait for the image to load AND paint, then arm the clock. */
function presentImage(
  img: HTMLImageElement,
  url: string,
  clock: RTClock,
): Promise<void> {
  return new Promise((resolve, reject) => {
    img.onload = () => {
      // Two frames: one to flush layout, one for the actual paint.
      requestAnimationFrame(() => {
        requestAnimationFrame(() => {
          clock.markPaint();
          resolve();
        });
      });
    };
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

function waitForChoice(clock: RTClock): Promise<{ chosen: 0 | 1; rtMs: number }> {
  return new Promise((resolve) => {
    const handler = (event: KeyboardEvent) => {
      const key = event.key.toLowerCase();
      if (key !== "r" && key !== "f") return;
      const rt = clock.read();
      if (rt === null) return; // stimulus not painted yet: ignore the press
      window.removeEventListener("keydown", handler);
      resolve({ chosen: key === "r" ? 0 : 1, rtMs: rt });
    };
    window.addEventListener("keydown", handler);
  });
}

function waitForRating(): Promise<number> {
  return new Promise((resolve) => {
    const handler = (event: KeyboardEvent) => {
      const value = Number(event.key);
      if (!Number.isInteger(value) || value < 1 || value > 4) return;
      window.removeEventListener("keydown", handler);
      resolve(value);
    };
    window.addEventListener("keydown", handler);
  });
}

function setPhase(els: Elements, phase: Phase): void {
  els.prompt.hidden = phase !== "stimulus";
  els.rating.hidden = phase !== "rating";
  els.image.style.visibility =
    phase === "stimulus" || phase === "rating" ? "visible" : "hidden";
}

export async function main(): Promise<void> {
  const els = getElements();
  const params = new URLSearchParams(window.location.search);
  const participant = params.get("participant") ?? "anonymous";
  const cohortParam = params.get("cohort") ?? "lay";
  const cohort =
    cohortParam === "cv_expert" || cohortParam === "aigi_expert"
      ? cohortParam
      : "lay";
  const client = new TrialClient(params.get("api") ?? "");
  const clock = new RTClock();

  els.status.textContent = "";
  try {
    const result = await runSession(
      client,
      participant,
      cohort,
      async (trial: Trial, index: number) => {
        setPhase(els, "loading");
        clock.reset();
        await presentImage(els.image, trial.imageUrl, clock);
        setPhase(els, "stimulus");
        const { chosen, rtMs } = await waitForChoice(clock);
        setPhase(els, "rating");
        const S = await waitForRating();
        setPhase(els, "posting");
        void index;
        return { chosen, S, RT_ms: rtMs };
      },
      {
        onProgress: ({ completed, total }) => {
          els.progress.textContent = `Trial ${completed + 1} of ${total}`;
        },
      },
    );
    setPhase(els, "done");
    els.status.textContent = `Done — ${result.answered} trials recorded. Thank you!`;
  } catch (err) {
    setPhase(els, "done");
    els.status.textContent = `Session error: ${String(err)}`;
  }
}

if (typeof document !== "undefined" && document.getElementById("stimulus")) {
  void main();
}
