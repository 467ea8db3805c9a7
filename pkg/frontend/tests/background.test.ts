/**
 * Request-log harness: run the background worker against a stubbed browser
 * and record every network call it makes. The extension must only ever talk
 * to the local engine, must register a non-blocking listener, and must mark
 * the badge when the engine is down.
 */

import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

type Listener = (details: {
  url: string;
  timeStamp: number;
  tabId: number;
  initiator?: string;
}) => unknown;

interface Harness {
  listener: Listener;
  extraInfoSpec: string[] | undefined;
  fetchLog: string[];
  badges: string[];
  engineUp: boolean;
}

async function loadBackground(): Promise<Harness> {
  const harness: Harness = {
    listener: () => undefined,
    extraInfoSpec: undefined,
    fetchLog: [],
    badges: [],
    engineUp: true,
  };

  vi.stubGlobal("chrome", {
    webRequest: {
      onBeforeRequest: {
        addListener(cb: Listener, _filter: unknown, extraInfoSpec?: string[]) {
          harness.listener = cb;
          harness.extraInfoSpec = extraInfoSpec;
        },
      },
    },
    tabs: {
      async get() {
        return { url: "https://news.example/article" };
      },
    },
    cookies: {
      async getAll() {
        return [
          { name: "uid", value: "u1234567890xyz", domain: ".t.example", session: false },
        ];
      },
    },
    action: {
      async setBadgeText({ text }: { text: string }) {
        harness.badges.push(text);
      },
      async setBadgeBackgroundColor() {},
    },
    storage: {
      local: {
        async get() {
          return {};
        },
        async set() {},
      },
    },
  });

  vi.stubGlobal("fetch", async (input: string | URL) => {
    const url = String(input);
    harness.fetchLog.push(url);
    if (!harness.engineUp) {
      throw new TypeError("fetch failed");
    }
    return new Response(JSON.stringify({ detected: true }), { status: 200 });
  });

  vi.resetModules();
  await import("../src/background.js");
  return harness;
}

async function settle(): Promise<void> {
  await new Promise((resolve) => setTimeout(resolve, 0));
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe("background worker", () => {
  beforeEach(() => {
    vi.unstubAllGlobals();
  });
  afterEach(() => {
    vi.unstubAllGlobals();
  });

  it("registers an observe-only listener (no blocking extraInfoSpec)", async () => {
    const harness = await loadBackground();
    expect(harness.extraInfoSpec ?? []).not.toContain("blocking");
  });

  it("the listener itself returns nothing, so requests pass untouched", async () => {
    const harness = await loadBackground();
    const result = harness.listener({
      url: "https://cpp.imp.mpx.mopub.com/imp?charge_price=0.95",
      timeStamp: Date.now(),
      tabId: 1,
    });
    expect(result).toBeUndefined();
    await settle();
  });

  it("talks to the local engine endpoint and nowhere else", async () => {
    const harness = await loadBackground();
    for (const url of [
      "https://cpp.imp.mpx.mopub.com/imp?charge_price=0.95",
      "https://cdn.example/app.js",
      "https://pixel.tracker.example/sync?uid=u1234567890xyz",
    ]) {
      harness.listener({ url, timeStamp: Date.now(), tabId: 1 });
    }
    await settle();
    expect(harness.fetchLog.length).toBeGreaterThan(0);
    for (const url of harness.fetchLog) {
      expect(url.startsWith("http://127.0.0.1:8301/local/")).toBe(true);
    }
  });

  it("drops silently and marks the badge when the engine is down", async () => {
    const harness = await loadBackground();
    harness.engineUp = false;
    harness.listener({
      url: "https://cpp.imp.mpx.mopub.com/imp?charge_price=0.95",
      timeStamp: Date.now(),
      tabId: 1,
    });
    await settle();
    expect(harness.badges.at(-1)).toBe("!");
  });

  it("clears the badge once the engine answers again", async () => {
    const harness = await loadBackground();
    harness.engineUp = false;
    harness.listener({ url: "https://a.mopub.com/i", timeStamp: Date.now(), tabId: 1 });
    await settle();
    harness.engineUp = true;
    harness.listener({ url: "https://a.mopub.com/i", timeStamp: Date.now(), tabId: 1 });
    await settle();
    expect(harness.badges.at(-1)).toBe("");
  });

  it("never forwards its own engine traffic", async () => {
    const harness = await loadBackground();
    harness.listener({
      url: "http://127.0.0.1:8301/local/state",
      timeStamp: Date.now(),
      tabId: -1,
    });
    await settle();
    expect(harness.fetchLog).toEqual([]);
  });
});
