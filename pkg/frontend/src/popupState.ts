/** Pure popup-state derivation, shared by the page script and tests. */

import type { BreakdownSlice, EngineState, PopupState } from "./types.js";

/** Ad-type shares for the pie: site categories, cleartext/inferred otherwise. */
export function breakdownSlices(state: EngineState): BreakdownSlice[] {
  const source =
    Object.keys(state.categories).length > 0 ? state.categories : state.price_kinds;
  const total = Object.values(source).reduce((a, b) => a + b, 0);
  if (total === 0) {
    return [];
  }
  return Object.entries(source)
    .filter(([, count]) => count > 0)
    .sort((a, b) => b[1] - a[1])
    .map(([label, count]) => ({ label, share: count / total }));
}

export function toPopupState(state: EngineState, stale: boolean): PopupState {
  return {
    allTimeUsd: state.all_time_usd,
    sessionUsd: state.session_usd,
    adsDetected: state.ads_detected,
    breakdown: breakdownSlices(state),
    gender: state.gender,
    age: state.age,
    optIn: state.opt_in,
    stale,
  };
}

/** Display form for USD amounts; totals stay exact upstream. */
export function formatUsd(value: string): string {
  const amount = Number(value);
  if (!Number.isFinite(amount)) return value;
  return `$${amount.toFixed(5)}`;
}
