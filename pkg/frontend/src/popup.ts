/**
 * Popup page: demographics inputs, ad-type pie, totals, and the menu with the
 * reporting opt-in toggle. State comes from the engine; when it is
 * unreachable the last cached state renders with a stale marker.
 */

import { DEFAULT_ENGINE_BASE, EngineClient } from "./engineClient.js";
import { formatUsd, toPopupState } from "./popupState.js";
import type { EngineState, PopupState, SettingsUpdate } from "./types.js";

const PIE_COLORS = ["#2980b9", "#27ae60", "#f39c12", "#8e44ad", "#16a085", "#c0392b", "#7f8c8d"];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function renderPie(state: PopupState): void {
  const pie = el<HTMLDivElement>("pie");
  const legend = el<HTMLUListElement>("legend");
  legend.replaceChildren();
  if (state.breakdown.length === 0) {
    pie.style.background = "#ecf0f1";
    return;
  }
  const stops: string[] = [];
  let angle = 0;
  state.breakdown.forEach((slice, i) => {
    const color = PIE_COLORS[i % PIE_COLORS.length];
    const next = angle + slice.share * 360;
    stops.push(`${color} ${angle.toFixed(1)}deg ${next.toFixed(1)}deg`);
    angle = next;
    const item = document.createElement("li");
    item.textContent = `${slice.label} (${Math.round(slice.share * 100)}%)`;
    item.style.setProperty("--swatch", color);
    legend.appendChild(item);
  });
  pie.style.background = `conic-gradient(${stops.join(", ")})`;
}

function render(state: PopupState): void {
  el("all-time").textContent = formatUsd(state.allTimeUsd);
  el("session").textContent = formatUsd(state.sessionUsd);
  el("ads-count").textContent = String(state.adsDetected);
  el<HTMLSelectElement>("gender").value = state.gender;
  el<HTMLInputElement>("age").value = state.age === null ? "" : String(state.age);
  el<HTMLInputElement>("opt-in").checked = state.optIn;
  el("stale").hidden = !state.stale;
  renderPie(state);
}

async function engineBaseFromStorage(): Promise<string> {
  const stored = await chrome.storage.local.get("engineBase");
  return typeof stored.engineBase === "string" ? stored.engineBase : DEFAULT_ENGINE_BASE;
}

async function loadAndRender(client: EngineClient): Promise<void> {
  const state = await client.state();
  if (state) {
    await chrome.storage.local.set({ lastState: state });
    render(toPopupState(state, false));
    return;
  }
  const cached = (await chrome.storage.local.get("lastState")).lastState as
    | EngineState
    | undefined;
  if (cached) {
    render(toPopupState(cached, true));
  } else {
    el("stale").hidden = false;
  }
}

async function pushSettings(client: EngineClient, update: SettingsUpdate): Promise<void> {
  const state = await client.updateSettings(update);
  if (state) {
    await chrome.storage.local.set({ lastState: state });
    render(toPopupState(state, false));
  }
}

async function main(): Promise<void> {
  const client = new EngineClient(await engineBaseFromStorage());

  el<HTMLSelectElement>("gender").addEventListener("change", (event) => {
    void pushSettings(client, { gender: (event.target as HTMLSelectElement).value });
  });
  el<HTMLInputElement>("age").addEventListener("change", (event) => {
    const raw = (event.target as HTMLInputElement).value;
    void pushSettings(client, { age: raw === "" ? null : Number(raw) });
  });
  el<HTMLInputElement>("opt-in").addEventListener("change", (event) => {
    void pushSettings(client, { opt_in: (event.target as HTMLInputElement).checked });
  });

  await loadAndRender(client);
}

document.addEventListener("DOMContentLoaded", () => {
  void main();
});
