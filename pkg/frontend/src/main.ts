import { PortalApi } from "./api.js";
import { Portal } from "./app.js";

/** Browser bootstrap: minimal login form, then the live table. */
export function mount(root: HTMLElement, baseUrl: string): void {
  const form = document.createElement("form");
  form.className = "login-form";
  const input = document.createElement("input");
  input.placeholder = "username";
  input.name = "user";
  const button = document.createElement("button");
  button.type = "submit";
  button.textContent = "Log in";
  const note = document.createElement("p");
  form.append(input, button, note);
  root.appendChild(form);

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const api = new PortalApi(baseUrl);
    api
      .login(input.value.trim())
      .then(() => {
        root.textContent = "";
        const host = document.createElement("div");
        root.appendChild(host);
        new Portal(host, api).start();
      })
      .catch((err) => {
        note.textContent = `login failed: ${err}`;
      });
  });
}

declare global {
  interface Window {
    DBM_GATEWAY_URL?: string;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const base = window.DBM_GATEWAY_URL ?? window.location.origin;
  mount(document.getElementById("app") as HTMLElement, base);
}
