/**
 * Pure capture logic: turn an observed outgoing request into the message the
 * local engine consumes. Nothing here can block, redirect, or modify the
 * request — the caller only ever observes.
 */

import type { CaptureMessage, JarCookie, JarEntry, RequestDetails } from "./types.js";

/** Identifier-looking cookies only: non-session and a value of 10+ chars. */
export function jarDigest(cookies: JarCookie[]): JarEntry[] {
  return cookies
    .filter((c) => !c.session && c.value.length >= 10)
    .map((c) => [c.name, c.value, c.domain.replace(/^\./, ""), false] as JarEntry);
}

export function hostOf(url: string): string {
  try {
    return new URL(url).hostname.toLowerCase();
  } catch {
    return "";
  }
}

/**
 * Build the capture message for one request, or null when the request should
 * not be forwarded: non-http(s) schemes, requests without a resolvable page
 * context, and anything aimed at the engine itself (to avoid feedback loops).
 */
export function buildCaptureMessage(
  details: RequestDetails,
  cookies: JarCookie[],
  dnt: boolean,
  engineBase: string,
  now: () => Date = () => new Date(),
): CaptureMessage | null {
  if (!/^https?:\/\//.test(details.url)) {
    return null;
  }
  if (details.url.startsWith(engineBase)) {
    return null;
  }
  const pageUrl = details.tabUrl ?? details.initiator ?? "";
  const firstParty = hostOf(pageUrl);
  if (!firstParty) {
    return null;
  }
  const moment = now();
  return {
    url: details.url,
    first_party: firstParty,
    dnt,
    ts: details.timeStamp / 1000,
    utc_offset_minutes: -moment.getTimezoneOffset(),
    cookies: jarDigest(cookies),
  };
}
