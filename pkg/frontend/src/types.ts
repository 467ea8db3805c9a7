/** Shared shapes for the capture client and popup. */

/** One browser cookie, as the jar digest sees it. */
export interface JarCookie {
  name: string;
  value: string;
  domain: string;
  session: boolean;
}

/** Digest entry on the wire: [name, value, source_domain, is_session]. */
export type JarEntry = [string, string, string, boolean];

/** What the engine needs to run one request through its pipeline. */
export interface CaptureMessage {
  url: string;
  first_party: string;
  dnt: boolean;
  ts: number;
  utc_offset_minutes: number;
  cookies: JarEntry[];
}

/** GET /local/state response. */
export interface EngineState {
  all_time_usd: string;
  session_usd: string;
  ads_detected: number;
  price_kinds: Record<string, number>;
  categories: Record<string, number>;
  gender: string;
  age: number | null;
  opt_in: boolean;
  queue_depth: number;
  model_active: boolean;
}

/** POST /local/settings body; all fields optional, partial updates allowed. */
export interface SettingsUpdate {
  gender?: string;
  age?: number | null;
  opt_in?: boolean;
}

/** Everything the popup renders: stats, breakdown, demographics, menu. */
export interface PopupState {
  allTimeUsd: string;
  sessionUsd: string;
  adsDetected: number;
  breakdown: BreakdownSlice[];
  gender: string;
  age: number | null;
  optIn: boolean;
  stale: boolean;
}

export interface BreakdownSlice {
  label: string;
  share: number;
}

/** Subset of webRequest details the capture path consumes. */
export interface RequestDetails {
  url: string;
  tabUrl?: string;
  initiator?: string;
  timeStamp: number;
}
