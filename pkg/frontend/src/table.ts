import { ActionName, DatabaseRow } from "./types.js";

export const COLUMNS = ["Folder Name", "Type", "Status", "Actions"] as const;

/** Display order and labels for action buttons. */
const BUTTON_ORDER: ActionName[] = ["ViewInfo", "Start", "Stop", "Checkpoint"];
const BUTTON_LABELS: Record<ActionName, string> = {
  ViewInfo: "View Info",
  Start: "Start",
  Stop: "Stop",
  Checkpoint: "Checkpoint",
};

export interface RowHandlers {
  onAction(name: string, action: ActionName): void;
}

export interface RowState {
  /** Rows with an action in flight get their buttons disabled. */
  inFlight: Set<string>;
  /** Per-row inline error text (e.g. a 409 from a lost race). */
  rowErrors: Map<string, string>;
}

export function emptyRowState(): RowState {
  return { inFlight: new Set(), rowErrors: new Map() };
}

/**
 * Render the status table into `container`, one row per database summary,
 * columns in fixed order. The buttons rendered are exactly the actions the
 * API provided for the row.
 */
export function renderTable(
  container: HTMLElement,
  rows: DatabaseRow[],
  handlers: RowHandlers,
  state: RowState = emptyRowState(),
): void {
  container.textContent = "";
  if (rows.length === 0) {
    const empty = document.createElement("p");
    empty.className = "empty-state";
    empty.textContent = "No databases are visible to this account.";
    container.appendChild(empty);
    return;
  }
  const table = document.createElement("table");
  table.className = "status-table";
  const thead = document.createElement("thead");
  const headRow = document.createElement("tr");
  for (const column of COLUMNS) {
    const th = document.createElement("th");
    th.textContent = column;
    headRow.appendChild(th);
  }
  thead.appendChild(headRow);
  table.appendChild(thead);

  const tbody = document.createElement("tbody");
  for (const row of rows) {
    const tr = document.createElement("tr");
    tr.dataset.name = row.name;

    const nameCell = document.createElement("td");
    nameCell.className = "col-name";
    nameCell.textContent = row.name;
    tr.appendChild(nameCell);

    const typeCell = document.createElement("td");
    typeCell.className = "col-type";
    typeCell.textContent = row.type;
    tr.appendChild(typeCell);

    const statusCell = document.createElement("td");
    statusCell.className = "col-status";
    const badge = document.createElement("span");
    badge.className = `status-badge status-${row.status}`;
    badge.textContent = row.status;
    statusCell.appendChild(badge);
    tr.appendChild(statusCell);

    const actionsCell = document.createElement("td");
    actionsCell.className = "col-actions";
    const disabled = state.inFlight.has(row.name);
    for (const action of BUTTON_ORDER) {
      if (!row.actions.includes(action)) continue;
      const button = document.createElement("button");
      button.textContent = BUTTON_LABELS[action];
      button.dataset.action = action;
      button.disabled = disabled;
      button.addEventListener("click", () => handlers.onAction(row.name, action));
      actionsCell.appendChild(button);
    }
    const rowError = state.rowErrors.get(row.name);
    if (rowError) {
      const note = document.createElement("span");
      note.className = "row-error";
      note.textContent = rowError;
      actionsCell.appendChild(note);
    }
    tr.appendChild(actionsCell);
    tbody.appendChild(tr);
  }
  table.appendChild(tbody);
  container.appendChild(table);
}
