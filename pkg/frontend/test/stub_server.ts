/** Minimal deterministic stand-in for the session service, with request counters. */

import { createServer, IncomingMessage, Server, ServerResponse } from "node:http";
import { AddressInfo } from "node:net";

export interface StubOptions {
  chunkLen?: number;
  overlap?: number;
  solverSteps?: number;
  tau?: number;
  stepDelayMs?: number;
  failSteps?: boolean;
}

export interface StubServer {
  baseUrl: string;
  counts: { create: number; step: number; state: number; frames: number };
  close(): Promise<void>;
}

const PNG_1PX = Buffer.from(
  "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR4nGNgYGBgAAAABQAB" +
    "pfZFQAAAAABJRU5ErkJggg==",
  "base64",
);

function scheduleMatrix(chunkLen: number, overlap: number, steps: number, tau: number) {
  const roles: string[] = [];
  const values: number[][] = [];
  for (let t = 0; t < chunkLen; t++) {
    const role = t < overlap ? "history" : t % 2 === 0 ? "warped" : "blank";
    roles.push(role);
    const sigmaInit = role === "history" ? 0 : role === "warped" ? tau : 1.0;
    const row: number[] = [];
    for (let k = steps; k >= 0; k--) {
      row.push(Math.min(k / steps, sigmaInit));
    }
    values.push(row);
  }
  return { values, roles };
}

export async function startStub(options: StubOptions = {}): Promise<StubServer> {
  const chunkLen = options.chunkLen ?? 8;
  const overlap = options.overlap ?? 2;
  const solverSteps = options.solverSteps ?? 50;
  const tau = options.tau ?? 0.8;
  const counts = { create: 0, step: 0, state: 0, frames: 0 };
  let frameCounter = 0;
  let historyLength = 0;
  let chunkCounter = 0;
  let stepBusy = false;

  const newRefs = (n: number): string[] =>
    Array.from({ length: n }, () => `f${frameCounter++}`);

  const respond = (res: ServerResponse, status: number, body: unknown): void => {
    res.writeHead(status, { "content-type": "application/json" });
    res.end(JSON.stringify(body));
  };

  const server: Server = createServer((req: IncomingMessage, res: ServerResponse) => {
    const url = req.url ?? "";
    let raw = "";
    req.on("data", (chunk) => (raw += chunk));
    req.on("end", () => {
      void (async () => {
        if (req.method === "POST" && url === "/v1/sessions") {
          counts.create += 1;
          historyLength = 2;
          chunkCounter = 0;
          respond(res, 200, {
            session_id: "stub-session",
            initial_frames: newRefs(2),
            chunk_len: chunkLen,
            overlap,
          });
          return;
        }
        if (req.method === "GET" && url.startsWith("/v1/frames/")) {
          counts.frames += 1;
          res.writeHead(200, { "content-type": "image/png" });
          res.end(PNG_1PX);
          return;
        }
        if (req.method === "GET" && url.startsWith("/v1/sessions/")) {
          counts.state += 1;
          if (!url.includes("stub-session")) {
            respond(res, 404, { error: "unknown session" });
            return;
          }
          respond(res, 200, {
            history_length: historyLength,
            chunk_counter: chunkCounter,
            current_pose: { quaternion: [1, 0, 0, 0], translation: [0, 0, 0] },
            frame_refs: [],
          });
          return;
        }
        if (req.method === "POST" && url.endsWith("/step")) {
          counts.step += 1;
          if (!url.includes("stub-session")) {
            respond(res, 404, { error: "unknown session" });
            return;
          }
          if (options.failSteps) {
            respond(res, 500, { error: "stub forced failure" });
            return;
          }
          if (stepBusy) {
            respond(res, 409, { error: "a step is already in flight" });
            return;
          }
          stepBusy = true;
          if (options.stepDelayMs) {
            await new Promise((resolve) => setTimeout(resolve, options.stepDelayMs));
          }
          const body = raw ? (JSON.parse(raw) as Record<string, unknown>) : {};
          const emitted = chunkLen - overlap;
          historyLength += emitted;
          chunkCounter += 1;
          stepBusy = false;
          respond(res, 200, {
            frame_refs: newRefs(emitted),
            mask_refs: newRefs(chunkLen),
            prior_refs: newRefs(chunkLen),
            schedule: scheduleMatrix(chunkLen, overlap, solverSteps, tau),
            poses: Array.from({ length: chunkLen }, (_, i) => ({
              quaternion: [1, 0, 0, 0],
              translation: [0, 0, 0.02 * i],
            })),
            pure_noise: false,
            history_length: historyLength,
            echo: body,
          });
          return;
        }
        respond(res, 404, { error: "no such route" });
      })();
    });
  });

  await new Promise<void>((resolve) => server.listen(0, "127.0.0.1", resolve));
  const address = server.address() as AddressInfo;
  return {
    baseUrl: `http://127.0.0.1:${address.port}`,
    counts,
    close: () => new Promise((resolve) => server.close(() => resolve())),
  };
}
