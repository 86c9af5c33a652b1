import { PortalApi } from "./api.js";
import { emptyRowState, renderTable, RowState } from "./table.js";
import { ActionName, DatabaseRow, GatewayError } from "./types.js";

const TRANSIENT = new Set(["starting", "stopping", "checkpointing"]);

export interface PortalOptions {
  /** Base polling interval; the refresh loop backs off on errors. */
  pollIntervalMs?: number;
  maxBackoffMs?: number;
}

/**
 * The status portal. UI state is a pure function of the latest API response
 * plus in-flight action markers: every change re-renders from `this.rows`.
 * Overlapping fetches are coalesced (latest response wins).
 */
export class Portal {
  readonly api: PortalApi;
  private readonly root: HTMLElement;
  private readonly interval: number;
  private readonly maxBackoff: number;

  rows: DatabaseRow[] = [];
  private rowState: RowState = emptyRowState();
  private banner: string | null = null;
  private fetchGeneration = 0;
  private appliedGeneration = 0;
  private failureCount = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private running = false;

  constructor(root: HTMLElement, api: PortalApi, options: PortalOptions = {}) {
    this.root = root;
    this.api = api;
    this.interval = options.pollIntervalMs ?? 3000;
    this.maxBackoff = options.maxBackoffMs ?? 30000;
  }

  // --- rendering -----------------------------------------------------------

  render(): void {
    this.root.textContent = "";

    const bar = document.createElement("div");
    bar.className = "toolbar";
    const refresh = document.createElement("button");
    refresh.textContent = "Refresh Status";
    refresh.className = "refresh-button";
    refresh.addEventListener("click", () => void this.refresh());
    bar.appendChild(refresh);
    this.root.appendChild(bar);

    if (this.banner) {
      const note = document.createElement("div");
      note.className = "banner";
      note.textContent = this.banner;
      const retry = document.createElement("button");
      retry.textContent = "Retry";
      retry.addEventListener("click", () => void this.refresh());
      note.appendChild(retry);
      this.root.appendChild(note);
    }

    const tableHost = document.createElement("div");
    tableHost.className = "table-host";
    this.root.appendChild(tableHost);
    renderTable(tableHost, this.rows, {
      onAction: (name, action) => void this.onAction(name, action),
    }, this.rowState);

    const pane = document.createElement("div");
    pane.className = "detail-pane";
    this.root.appendChild(pane);
  }

  // --- polling ---------------------------------------------------------------

  start(): void {
    this.running = true;
    void this.refresh();
    this.scheduleNext();
  }

  stop(): void {
    this.running = false;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
  }

  private scheduleNext(): void {
    if (!this.running) return;
    if (this.timer !== null) clearTimeout(this.timer);
    const backoff = Math.min(
      this.interval * 2 ** this.failureCount,
      this.maxBackoff,
    );
    this.timer = setTimeout(() => {
      void this.refresh().finally(() => this.scheduleNext());
    }, backoff);
  }

  /** Fetch the table; stale responses are dropped, the latest wins. */
  async refresh(): Promise<void> {
    const generation = ++this.fetchGeneration;
    try {
      const rows = await this.api.listDatabases();
      if (generation < this.appliedGeneration) return; // a newer fetch won
      this.appliedGeneration = generation;
      this.rows = rows;
      this.banner = null;
      this.failureCount = 0;
      // Clear in-flight markers for rows that left their transient state.
      for (const name of [...this.rowState.inFlight]) {
        const row = rows.find((r) => r.name === name);
        if (!row || !TRANSIENT.has(row.status)) {
          this.rowState.inFlight.delete(name);
        }
      }
    } catch (err) {
      this.failureCount += 1;
      this.banner = `Cannot reach the gateway (attempt ${this.failureCount}); retrying`;
    }
    this.render();
  }

  // --- actions -----------------------------------------------------------------

  private async onAction(name: string, action: ActionName): Promise<void> {
    if (action === "ViewInfo") {
      await this.showDetails(name);
      return;
    }
    const verb = action.toLowerCase() as "start" | "stop" | "checkpoint";
    this.rowState.inFlight.add(name);
    this.rowState.rowErrors.delete(name);
    this.render();
    try {
      const outcome = await this.api.triggerAction(name, verb);
      const row = this.rows.find((r) => r.name === name);
      if (row) row.status = outcome.status as DatabaseRow["status"];
      this.render();
    } catch (err) {
      this.rowState.inFlight.delete(name);
      if (err instanceof GatewayError) {
        const extra =
          err.detail.code === "insufficient-resources"
            ? ` (free=${err.detail.free}, requested=${err.detail.requested})`
            : "";
        this.rowState.rowErrors.set(name, `${err.detail.code}${extra}`);
      } else {
        this.rowState.rowErrors.set(name, "request failed");
      }
    }
    await this.refresh();
  }

  private async showDetails(name: string): Promise<void> {
    const pane = this.root.querySelector(".detail-pane");
    if (!pane) return;
    pane.textContent = "loading…";
    try {
      const details = await this.api.details(name);
      pane.textContent = "";
      const heading = document.createElement("h2");
      heading.textContent = name;
      pane.appendChild(heading);
      const dl = document.createElement("dl");
      const fields: Array<[string, string]> = [
        ["Status", `${details.status.value} since ${details.status.since}`],
        ["Engine", String(details.descriptor["engine"] ?? "")],
        ["Nodes", String(details.descriptor["num_nodes"] ?? "")],
        ["Group", String(details.descriptor["security_group"] ?? "")],
        ["Checkpoints", details.checkpoints.map((c) => c.id).join(", ") || "none"],
        ["DNS", Object.entries(details.dns)
          .map(([label, ip]) => `${label}=${ip ?? "-"}`)
          .join(" ")],
      ];
      for (const [term, value] of fields) {
        const dt = document.createElement("dt");
        dt.textContent = term;
        const dd = document.createElement("dd");
        dd.textContent = value;
        dl.appendChild(dt);
        dl.appendChild(dd);
      }
      pane.appendChild(dl);
    } catch {
      pane.textContent = "could not load details";
    }
  }
}
