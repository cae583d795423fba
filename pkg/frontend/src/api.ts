/** Typed client for the /v1 session API. All state lives server-side. */

export interface Pose {
  quaternion: number[];
  translation: number[];
}

export interface SessionInfo {
  session_id: string;
  initial_frames: string[];
  chunk_len: number;
  overlap: number;
}

export interface SessionState {
  history_length: number;
  chunk_counter: number;
  current_pose: Pose;
  frame_refs: string[];
}

export interface SchedulePayload {
  values: number[][];
  roles: string[];
}

export interface StepResponse {
  frame_refs: string[];
  mask_refs: string[];
  prior_refs: string[];
  schedule: SchedulePayload;
  poses: Pose[];
  pure_noise: boolean;
  history_length: number;
}

export interface StepRequest {
  command?: string;
  magnitude?: number;
  poses?: Pose[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await res.text();
    if (!res.ok) {
      let message = text;
      try {
        message = (JSON.parse(text) as { error?: string }).error ?? text;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, message);
    }
    return JSON.parse(text) as T;
  }

  createSession(options: Record<string, unknown> = {}): Promise<SessionInfo> {
    return this.request<SessionInfo>("POST", "/v1/sessions", options);
  }

  getState(sessionId: string): Promise<SessionState> {
    return this.request<SessionState>("GET", `/v1/sessions/${sessionId}`);
  }

  step(sessionId: string, body: StepRequest): Promise<StepResponse> {
    return this.request<StepResponse>("POST", `/v1/sessions/${sessionId}/step`, body);
  }

  frameUrl(ref: string): string {
    return `${this.baseUrl}/v1/frames/${ref}`;
  }
}
