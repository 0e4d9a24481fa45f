/** End-to-end: scripted session against the real Python service.
 *
 * The fixture study holds five images (all secretly generated, opaque ids).
 * The scripted participant rates everything S=1 and answers in 1000 ms,
 * except one image where it "hesitates" for 6000 ms. With those numbers the
 * response-time pool has mean 2000 ms and population sigma 2000 ms, so the
 * slow-response rule (mean RT > mu + sigma = 4000 ms) selects exactly the
 * hesitated image, which the curation CLI must reproduce from the trial log
 * this session writes. Every response body the client ever saw is scanned
 * to prove ground truth never crossed the wire.
 */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { FetchFn, TrialClient } from "../src/api.js";
import { runSession } from "../src/session.js";

const SERVE_SCRIPT = fileURLToPath(
  new URL("../scripts/serve_fixture.py", import.meta.url),
);
const HESITATE_ID = "img-003";
const FAST_MS = 1000;
const SLOW_MS = 6000;

let workdir: string;
let server: ChildProcess | null = null;
let serverLog = "";
let base = "";

/** Every response body the client received, for the blinding audit. */
const seenBodies: string[] = [];
const auditedFetch: FetchFn = async (url, init) => {
  const res = await fetch(url, init);
  seenBodies.push(await res.clone().text());
  return res;
};

async function waitForServer(url: string, tries = 300): Promise<void> {
  for (let i = 0; i < tries; i += 1) {
    if (server?.exitCode !== null && server?.exitCode !== undefined) {
      throw new Error(`service exited early:\n${serverLog}`);
    }
    try {
      await fetch(url);
      return; // any HTTP response at all means the port is live
    } catch {
      await new Promise((r) => setTimeout(r, 200));
    }
  }
  throw new Error(`service never came up:\n${serverLog}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "trial-ui-"));
  const port = 8100 + (process.pid % 2000);
  base = `http://127.0.0.1:${port}`;
  server = spawn("python3", [SERVE_SCRIPT, workdir, String(port)], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  server.stdout?.on("data", (chunk: Buffer) => (serverLog += chunk.toString()));
  server.stderr?.on("data", (chunk: Buffer) => (serverLog += chunk.toString()));
  await waitForServer(`${base}/v1/trial/next?session=warmup`);
}, 180_000);

afterAll(() => {
  server?.kill("SIGTERM");
  if (workdir) rmSync(workdir, { recursive: true, force: true });
});

describe("scripted session against the live service", () => {
  let lastTrialId = "";

  it("runs five trials with one simulated hesitation", async () => {
    const client = new TrialClient(base, { fetchFn: auditedFetch });
    const urls: string[] = [];
    const result = await runSession(client, "p1", "lay", (trial) => {
      urls.push(trial.imageUrl);
      lastTrialId = trial.trialId;
      const hesitated = trial.imageUrl.endsWith(HESITATE_ID);
      return {
        chosen: 0 as const, // judged "real": these images fooled the viewer
        S: 1,
        RT_ms: hesitated ? SLOW_MS : FAST_MS,
      };
    });
    expect(result.answered).toBe(5);
    expect(urls).toHaveLength(5);
    expect(urls.filter((u) => u.endsWith(HESITATE_ID))).toHaveLength(1);
  }, 60_000);

  it("wrote one log row per trial, server-side", () => {
    const lines = readFileSync(join(workdir, "trials.jsonl"), "utf8")
      .trim()
      .split("\n");
    expect(lines).toHaveLength(5);
    const rows = lines.map((l) => JSON.parse(l) as Record<string, unknown>);
    const byImage = new Map(rows.map((r) => [String(r["image_id"]), r]));
    expect([...byImage.keys()].sort()).toEqual([
      "img-001",
      "img-002",
      "img-003",
      "img-004",
      "img-005",
    ]);
    expect(byImage.get(HESITATE_ID)?.["rt_ms"]).toBe(SLOW_MS);
    for (const row of rows) {
      expect(row["rating"]).toBe(1);
      expect(row["cohort"]).toBe("lay");
      expect(row["participant_id"]).toBe("p1");
    }
  });

  it("curation selects exactly the hesitated image", () => {
    const out = join(workdir, "selected.txt");
    const proc = spawnSync(
      "python3",
      [
        "-m",
        "refdet",
        "curate",
        "--trials",
        join(workdir, "trials.jsonl"),
        "--tau-real",
        "4",
        "--out",
        out,
      ],
      { encoding: "utf8" },
    );
    expect(proc.status, proc.stderr).toBe(0);
    const selected = readFileSync(out, "utf8").trim().split("\n");
    expect(selected).toEqual([HESITATE_ID]);
    const stats = JSON.parse(readFileSync(`${out}.stats.json`, "utf8")) as {
      mu_rt_ms: number;
      sigma_rt_ms: number;
    };
    // Hand check: RT pool {1000 x4, 6000} has mean 2000 and population
    // sigma 2000, so the slow rule's threshold sits at 4000 ms.
    expect(stats.mu_rt_ms).toBeCloseTo(2000, 6);
    expect(stats.sigma_rt_ms).toBeCloseTo(2000, 6);
  }, 60_000);

  it("a duplicate answer resolves via 409 and adds no log row", async () => {
    // A fresh client (empty duplicate cache) re-posts the last answer, as a
    // crashed-and-restarted UI would. The server's 409 counts as success.
    const client = new TrialClient(base, { fetchFn: auditedFetch });
    await expect(
      client.submitAnswer({
        trialId: lastTrialId,
        chosen: 0,
        S: 1,
        RT_ms: FAST_MS,
      }),
    ).resolves.toBeUndefined();
    const lines = readFileSync(join(workdir, "trials.jsonl"), "utf8")
      .trim()
      .split("\n");
    expect(lines).toHaveLength(5);
  });

  it("a second session answering real/S=4 echoes into the log verbatim", async () => {
    const client = new TrialClient(base, { fetchFn: auditedFetch });
    const posted: Array<{ trialId: string; url: string }> = [];
    const result = await runSession(
      client,
      "p2",
      "cv_expert",
      (trial) => {
        posted.push({ trialId: trial.trialId, url: trial.imageUrl });
        return { chosen: 0 as const, S: 4, RT_ms: 750 };
      },
      { seed: 1 },
    );
    expect(result.answered).toBe(5);
    const rows = readFileSync(join(workdir, "trials.jsonl"), "utf8")
      .trim()
      .split("\n")
      .map((l) => JSON.parse(l) as Record<string, unknown>);
    expect(rows).toHaveLength(10);
    const second = rows.slice(5);
    expect(second.map((r) => r["trial_id"])).toEqual(
      posted.map((p) => p.trialId),
    );
    for (const row of second) {
      expect(row["participant_id"]).toBe("p2");
      expect(row["cohort"]).toBe("cv_expert");
      expect(row["response"]).toBe(0);
      expect(row["rating"]).toBe(4);
      expect(row["rt_ms"]).toBe(750);
    }
  }, 60_000);

  it("no response body ever contained ground truth", () => {
    // Two sessions: 2 creates + 12 next-polls + 10 answers + 1 duplicate.
    expect(seenBodies.length).toBeGreaterThanOrEqual(24);
    const forbidden = ["ground_truth", '"label"', "is_generated", "y_pred"];
    for (const body of seenBodies) {
      for (const needle of forbidden) {
        expect(body).not.toContain(needle);
      }
    }
  });
});
