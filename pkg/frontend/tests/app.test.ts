import { beforeEach, describe, expect, it, vi } from "vitest";

import { PortalApi } from "../src/api.js";
import { Portal } from "../src/app.js";
import { DatabaseRow, GatewayError } from "../src/types.js";

/** In-memory stand-in for the gateway, wire-shape compatible. */
class FakeApi {
  rows: DatabaseRow[] = [];
  listCalls = 0;
  failListing = false;
  actionOutcome: { accepted: boolean; status: string } | GatewayError = {
    accepted: true,
    status: "starting",
  };
  lastAction: { name: string; action: string } | null = null;

  async listDatabases(): Promise<DatabaseRow[]> {
    this.listCalls += 1;
    if (this.failListing) throw new Error("connection refused");
    return JSON.parse(JSON.stringify(this.rows));
  }

  async details(name: string) {
    return {
      descriptor: { engine: "toy-kv", num_nodes: 1, security_group: "secgroup" },
      status: { value: "stopped", since: "now", job_id: null },
      actions: [],
      history: [],
      checkpoints: [],
      dns: { [name]: null },
    };
  }

  async triggerAction(name: string, action: string) {
    this.lastAction = { name, action };
    if (this.actionOutcome instanceof GatewayError) throw this.actionOutcome;
    return this.actionOutcome;
  }
}

function stoppedRow(name = "dbname01"): DatabaseRow {
  return {
    name,
    type: "toy-kv 1.6",
    status: "stopped",
    actions: ["ViewInfo", "Start", "Checkpoint"],
  };
}

describe("Portal", () => {
  let host: HTMLElement;
  let api: FakeApi;
  let portal: Portal;

  beforeEach(() => {
    document.body.innerHTML = "<div id='host'></div>";
    host = document.getElementById("host") as HTMLElement;
    api = new FakeApi();
    portal = new Portal(host, api as unknown as PortalApi, {
      pollIntervalMs: 25,
    });
  });

  it("renders rows after a refresh", async () => {
    api.rows = [stoppedRow()];
    await portal.refresh();
    expect(host.querySelectorAll("tbody tr")).toHaveLength(1);
    expect(host.textContent).toContain("dbname01");
  });

  it("triggering start disables the row and reflects the transient status", async () => {
    api.rows = [stoppedRow()];
    await portal.refresh();
    const start = [...host.querySelectorAll("button")].find(
      (b) => b.textContent === "Start",
    ) as HTMLButtonElement;
    api.rows = [{ ...stoppedRow(), status: "starting", actions: ["ViewInfo"] }];
    start.click();
    await vi.waitFor(() => {
      expect(api.lastAction).toEqual({ name: "dbname01", action: "start" });
      expect(host.textContent).toContain("starting");
    });
  });

  it("surfaces a 409 inline and refreshes the row", async () => {
    api.rows = [stoppedRow()];
    await portal.refresh();
    api.actionOutcome = new GatewayError(409, {
      code: "wrong-current-status",
      message: "lost the race",
    });
    const start = [...host.querySelectorAll("button")].find(
      (b) => b.textContent === "Start",
    ) as HTMLButtonElement;
    start.click();
    await vi.waitFor(() => {
      expect(host.querySelector(".row-error")?.textContent).toContain(
        "wrong-current-status",
      );
    });
  });

  it("surfaces 503 with the free/requested counts", async () => {
    api.rows = [stoppedRow()];
    await portal.refresh();
    api.actionOutcome = new GatewayError(503, {
      code: "insufficient-resources",
      message: "",
      free: 2,
      requested: 4,
    });
    const start = [...host.querySelectorAll("button")].find(
      (b) => b.textContent === "Start",
    ) as HTMLButtonElement;
    start.click();
    await vi.waitFor(() => {
      expect(host.querySelector(".row-error")?.textContent).toBe(
        "insufficient-resources (free=2, requested=4)",
      );
    });
  });

  it("manual refresh refetches immediately", async () => {
    api.rows = [];
    await portal.refresh();
    const before = api.listCalls;
    (host.querySelector(".refresh-button") as HTMLButtonElement).click();
    await vi.waitFor(() => expect(api.listCalls).toBe(before + 1));
  });

  it("polls on the configured interval and picks up external changes", async () => {
    api.rows = [stoppedRow()];
    portal.start();
    await vi.waitFor(() => expect(host.textContent).toContain("stopped"));
    // Status changed externally (e.g. via the command line).
    api.rows = [{ ...stoppedRow(), status: "started", actions: ["ViewInfo", "Stop"] }];
    await vi.waitFor(() => expect(host.textContent).toContain("started"), {
      timeout: 1000,
    });
    portal.stop();
  });

  it("shows a retry banner and backs off while the gateway is down", async () => {
    api.failListing = true;
    portal.start();
    await vi.waitFor(() => {
      expect(host.querySelector(".banner")?.textContent).toMatch(/retrying/);
    });
    const callsWhileDown = api.listCalls;
    api.failListing = false;
    api.rows = [stoppedRow()];
    await vi.waitFor(() => expect(host.querySelector(".banner")).toBeNull(), {
      timeout: 2000,
    });
    expect(api.listCalls).toBeGreaterThan(callsWhileDown);
    portal.stop();
  });

  it("view info opens the detail pane", async () => {
    api.rows = [stoppedRow()];
    await portal.refresh();
    const info = [...host.querySelectorAll("button")].find(
      (b) => b.textContent === "View Info",
    ) as HTMLButtonElement;
    info.click();
    await vi.waitFor(() => {
      expect(host.querySelector(".detail-pane")?.textContent).toContain(
        "secgroup",
      );
    });
  });

  it("coalesces overlapping fetches: the latest response wins", async () => {
    let unblockFirst!: (rows: DatabaseRow[]) => void;
    const firstResponse = new Promise<DatabaseRow[]>((resolve) => {
      unblockFirst = resolve;
    });
    let call = 0;
    api.listDatabases = async () => {
      call += 1;
      if (call === 1) return firstResponse;
      return [{ ...stoppedRow("fresh") }];
    };
    const slow = portal.refresh();
    await portal.refresh(); // newer fetch completes first
    expect(host.textContent).toContain("fresh");
    unblockFirst([stoppedRow("stale")]);
    await slow;
    expect(host.textContent).toContain("fresh");
    expect(host.textContent).not.toContain("stale");
  });
});
