/** Reaction-time clock for a single trial.
 *
 * The clock is armed when the stimulus image actually paints, not when the
 * trial is fetched. Input that arrives before the paint must be ignored, so
 * `read()` returns null until `markPaint()` has been called. Reaction times
 * are strictly positive: a same-tick read is clamped to a small epsilon
 * rather than reported as zero.
 */

export type Now = () => number;

/** Smallest reaction time we will ever report, in milliseconds. */
export const MIN_RT_MS = 0.001;

export class RTClock {
  private readonly now: Now;
  private paintedAt: number | null = null;

  constructor(now?: Now) {
    this.now = now ?? (() => performance.now());
  }

  /** Arm the clock. Call when the stimulus becomes visible. */
  markPaint(): void {
    this.paintedAt = this.now();
  }

  /** True once the stimulus has painted and input should be accepted. */
  armed(): boolean {
    return this.paintedAt !== null;
  }

  /**
   * Milliseconds since the stimulus painted, or null if it has not painted
   * yet (callers must discard the input in that case). Always > 0.
   */
  read(): number | null {
    if (this.paintedAt === null) return null;
    const dt = this.now() - this.paintedAt;
    return Math.max(dt, MIN_RT_MS);
  }

  /** Disarm before the next trial so stale paints cannot leak across. */
  reset(): void {
    this.paintedAt = null;
  }
}
