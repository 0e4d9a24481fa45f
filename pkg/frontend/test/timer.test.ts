import { describe, expect, it } from "vitest";

import { MIN_RT_MS, RTClock } from "../src/timer.js";

function fakeNow(): { now: () => number; advance: (ms: number) => void } {
  let t = 1000;
  return {
    now: () => t,
    advance: (ms: number) => {
      t += ms;
    },
  };
}

describe("RTClock", () => {
  it("ignores input before the stimulus paints", () => {
    const { now } = fakeNow();
    const clock = new RTClock(now);
    expect(clock.armed()).toBe(false);
    expect(clock.read()).toBeNull();
  });

  it("measures from paint to read", () => {
    const { now, advance } = fakeNow();
    const clock = new RTClock(now);
    advance(250); // time spent fetching, before paint: must not count
    clock.markPaint();
    advance(842.5);
    expect(clock.read()).toBeCloseTo(842.5, 6);
  });

  it("never reports a non-positive reaction time", () => {
    const { now } = fakeNow();
    const clock = new RTClock(now);
    clock.markPaint();
    const rt = clock.read();
    expect(rt).not.toBeNull();
    expect(rt!).toBeGreaterThan(0);
    expect(rt!).toBe(MIN_RT_MS);
  });

  it("reset disarms the clock between trials", () => {
    const { now, advance } = fakeNow();
    const clock = new RTClock(now);
    clock.markPaint();
    advance(500);
    expect(clock.read()).toBe(500);
    clock.reset();
    expect(clock.armed()).toBe(false);
    expect(clock.read()).toBeNull(); // stale paint must not leak across trials
  });

  it("re-arming starts a fresh measurement", () => {
    const { now, advance } = fakeNow();
    const clock = new RTClock(now);
    clock.markPaint();
    advance(3000);
    clock.reset();
    clock.markPaint();
    advance(120);
    expect(clock.read()).toBe(120);
  });
});
