/** Wire types for the gateway HTTP/JSON API. */

export type StatusValue =
  | "stopped"
  | "starting"
  | "started"
  | "stopping"
  | "checkpointing";

/** Action names exactly as the server sends them. */
export type ActionName = "Start" | "Stop" | "Checkpoint" | "ViewInfo";

export interface DatabaseRow {
  name: string;
  type: string;
  status: StatusValue;
  /** The buttons to render; the client never derives permissions itself. */
  actions: ActionName[];
}

export interface DatabaseDetails {
  descriptor: Record<string, unknown>;
  status: { value: StatusValue; since: string; job_id: string | null };
  actions: ActionName[];
  history: Array<Record<string, unknown>>;
  checkpoints: Array<{ id: string; size_bytes: number; created_at: string }>;
  dns: Record<string, string | null>;
}

export interface ApiError {
  code: string;
  message: string;
  free?: number;
  requested?: number;
}

export class GatewayError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: ApiError,
  ) {
    super(`${detail.code}: ${detail.message}`);
  }
}
