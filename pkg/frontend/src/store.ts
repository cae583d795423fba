/** Explorer state: session, filmstrip, schedule, and the single-flight step lock.
 *
 * Every piece of state derives from server responses; a failed step leaves
 * the store untouched apart from the error banner.
 */

import {
  ApiClient,
  ApiError,
  Pose,
  SchedulePayload,
  SessionInfo,
  StepResponse,
} from "./api.js";

export type Layer = "generated" | "prior" | "mask";

export interface FilmstripEntry {
  frameRef: string;
  priorRef?: string;
  maskRef?: string;
  chunkIndex: number;
}

export class ExplorerStore {
  session: SessionInfo | null = null;
  filmstrip: FilmstripEntry[] = [];
  schedule: SchedulePayload | null = null;
  lastPoses: Pose[] = [];
  layer: Layer = "generated";
  scrubIndex = 0;
  stepInFlight = false;
  lastError: string | null = null;
  chunkCounter = 0;

  private listeners = new Set<() => void>();

  constructor(private client: ApiClient) {}

  subscribe(listener: () => void): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  async createSession(options: Record<string, unknown> = {}): Promise<void> {
    const info = await this.client.createSession(options);
    this.session = info;
    this.filmstrip = info.initial_frames.map((ref) => ({ frameRef: ref, chunkIndex: -1 }));
    this.schedule = null;
    this.lastPoses = [];
    this.chunkCounter = 0;
    this.scrubIndex = this.filmstrip.length - 1;
    this.lastError = null;
    this.notify();
  }

  /** Issue one step; returns false (with no request sent) while one is in flight. */
  async steer(command: string, magnitude: number): Promise<boolean> {
    return this.runStep({ command, magnitude });
  }

  /** Advanced entry: explicit pose list for the new chunk frames. */
  async stepWithPoses(poses: Pose[]): Promise<boolean> {
    return this.runStep({ poses });
  }

  private async runStep(body: {
    command?: string;
    magnitude?: number;
    poses?: Pose[];
  }): Promise<boolean> {
    if (!this.session || this.stepInFlight) {
      return false;
    }
    this.stepInFlight = true;
    this.notify();
    try {
      const res = await this.client.step(this.session.session_id, body);
      this.applyStep(res);
      return true;
    } catch (err) {
      this.lastError = err instanceof ApiError
        ? `step failed (${err.status}): ${err.message}`
        : `step failed: ${String(err)}`;
      return false;
    } finally {
      this.stepInFlight = false;
      this.notify();
    }
  }

  private applyStep(res: StepResponse): void {
    const overlap = this.session ? this.session.overlap : 0;
    // masks/priors cover the whole chunk; the emitted frames are the tail
    const offset = res.mask_refs.length - res.frame_refs.length;
    res.frame_refs.forEach((ref, i) => {
      this.filmstrip.push({
        frameRef: ref,
        maskRef: res.mask_refs[offset + i],
        priorRef: res.prior_refs[offset + i],
        chunkIndex: this.chunkCounter,
      });
    });
    this.schedule = res.schedule;
    this.lastPoses = res.poses;
    this.chunkCounter += 1;
    this.scrubIndex = this.filmstrip.length - 1;
    this.lastError = null;
    void overlap;
  }

  /** Ref of the scrubbed frame under the active layer (generated, prior or mask). */
  visibleRef(): string | null {
    const entry = this.filmstrip[this.scrubIndex];
    if (!entry) return null;
    if (this.layer === "prior") return entry.priorRef ?? entry.frameRef;
    if (this.layer === "mask") return entry.maskRef ?? entry.frameRef;
    return entry.frameRef;
  }

  setLayer(layer: Layer): void {
    this.layer = layer;
    this.notify();
  }

  setScrub(index: number): void {
    this.scrubIndex = Math.max(0, Math.min(index, this.filmstrip.length - 1));
    this.notify();
  }
}
