/**
 * The only network surface of the extension: the loopback engine API.
 * Every method swallows connection errors and reports them as null so a dead
 * engine never disturbs the page being loaded.
 */

import type { CaptureMessage, EngineState, SettingsUpdate } from "./types.js";

export const DEFAULT_ENGINE_BASE = "http://127.0.0.1:8301";

export class EngineClient {
  constructor(
    readonly base: string = DEFAULT_ENGINE_BASE,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async capture(message: CaptureMessage): Promise<{ detected: boolean } | null> {
    return this.post("/local/capture", message);
  }

  async state(): Promise<EngineState | null> {
    try {
      const response = await this.fetchFn(`${this.base}/local/state`);
      if (!response.ok) return null;
      return (await response.json()) as EngineState;
    } catch {
      return null;
    }
  }

  async updateSettings(update: SettingsUpdate): Promise<EngineState | null> {
    return this.post("/local/settings", update);
  }

  private async post<T>(path: string, body: unknown): Promise<T | null> {
    try {
      const response = await this.fetchFn(`${this.base}${path}`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
      if (!response.ok) return null;
      return (await response.json()) as T;
    } catch {
      return null;
    }
  }
}
