/**
 * Background worker: observe outgoing requests, forward them to the local
 * engine, and surface engine health on the badge. The webRequest listener is
 * registered without the blocking extraInfoSpec, so requests are never
 * stalled, blocked, redirected, or modified; a dead engine only drops
 * messages.
 */

import { buildCaptureMessage } from "./capture.js";
import { DEFAULT_ENGINE_BASE, EngineClient } from "./engineClient.js";
import type { JarCookie } from "./types.js";

async function engineBase(): Promise<string> {
  const stored = await chrome.storage.local.get("engineBase");
  return typeof stored.engineBase === "string" ? stored.engineBase : DEFAULT_ENGINE_BASE;
}

async function markEngine(up: boolean): Promise<void> {
  await chrome.action.setBadgeText({ text: up ? "" : "!" });
  if (!up) {
    await chrome.action.setBadgeBackgroundColor({ color: "#c0392b" });
  }
}

async function tabUrl(tabId: number): Promise<string | undefined> {
  if (tabId < 0) return undefined;
  try {
    return (await chrome.tabs.get(tabId)).url;
  } catch {
    return undefined;
  }
}

function dntEnabled(): boolean {
  return typeof navigator !== "undefined" && navigator.doNotTrack === "1";
}

async function handleRequest(details: chrome.webRequest.WebRequestDetails): Promise<void> {
  try {
    const base = await engineBase();
    const cookies = (await chrome.cookies.getAll({})) as JarCookie[];
    const message = buildCaptureMessage(
      {
        url: details.url,
        tabUrl: await tabUrl(details.tabId),
        initiator: details.initiator,
        timeStamp: details.timeStamp,
      },
      cookies,
      dntEnabled(),
      base,
    );
    if (!message) return;
    const client = new EngineClient(base);
    const result = await client.capture(message);
    await markEngine(result !== null);
  } catch {
    // never let capture errors surface anywhere near the page
  }
}

export function main(): void {
  chrome.webRequest.onBeforeRequest.addListener(
    (details) => {
      // fire-and-forget: the listener itself returns nothing, observe-only
      void handleRequest(details);
    },
    { urls: ["<all_urls>"] },
  );
}

main();
