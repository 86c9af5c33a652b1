import { ApiError, DatabaseDetails, DatabaseRow, GatewayError } from "./types.js";

/** Thin client over the gateway; the session token rides in a header. */
export class PortalApi {
  private token: string | null = null;

  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  get authenticated(): boolean {
    return this.token !== null;
  }

  async login(user: string): Promise<void> {
    const resp = await this.fetchFn(`${this.baseUrl}/login`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ user }),
    });
    const body = await resp.json();
    if (!resp.ok) {
      throw new GatewayError(resp.status, body.error as ApiError);
    }
    this.token = body.token as string;
  }

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const headers: Record<string, string> = {};
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json();
    if (!resp.ok) {
      const detail = (payload && payload.error) as ApiError | undefined;
      throw new GatewayError(resp.status, detail ?? { code: "http", message: `${resp.status}` });
    }
    return payload;
  }

  async listDatabases(): Promise<DatabaseRow[]> {
    const payload = (await this.request("GET", "/databases")) as {
      databases: DatabaseRow[];
    };
    return payload.databases;
  }

  async details(name: string): Promise<DatabaseDetails> {
    return (await this.request("GET", `/databases/${name}`)) as DatabaseDetails;
  }

  /** POST an action with a fresh idempotency token. */
  async triggerAction(
    name: string,
    action: "start" | "stop" | "checkpoint",
  ): Promise<{ accepted: boolean; status: string }> {
    const token =
      globalThis.crypto && "randomUUID" in globalThis.crypto
        ? globalThis.crypto.randomUUID()
        : `tok-${Date.now()}-${Math.random().toString(36).slice(2)}`;
    return (await this.request("POST", `/databases/${name}/actions`, {
      action,
      idempotency_token: token,
    })) as { accepted: boolean; status: string };
  }
}
