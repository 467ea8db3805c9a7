import { describe, expect, it } from "vitest";

import { breakdownSlices, formatUsd, toPopupState } from "../src/popupState.js";
import type { EngineState } from "../src/types.js";

function engineState(overrides: Partial<EngineState> = {}): EngineState {
  return {
    all_time_usd: "0.00095",
    session_usd: "0.00095",
    ads_detected: 1,
    price_kinds: { cleartext: 1, inferred: 0 },
    categories: { News: 1 },
    gender: "undisclosed",
    age: null,
    opt_in: false,
    queue_depth: 0,
    model_active: true,
    ...overrides,
  };
}

describe("breakdownSlices", () => {
  it("prefers site categories and normalizes shares", () => {
    const slices = breakdownSlices(
      engineState({ categories: { News: 3, Sports: 1 } }),
    );
    expect(slices).toEqual([
      { label: "News", share: 0.75 },
      { label: "Sports", share: 0.25 },
    ]);
    expect(slices.reduce((a, s) => a + s.share, 0)).toBeCloseTo(1);
  });

  it("falls back to cleartext/inferred when no categories exist", () => {
    const slices = breakdownSlices(
      engineState({ categories: {}, price_kinds: { cleartext: 1, inferred: 1 } }),
    );
    expect(slices.map((s) => s.label).sort()).toEqual(["cleartext", "inferred"]);
  });

  it("handles the empty state", () => {
    expect(
      breakdownSlices(engineState({ categories: {}, price_kinds: {} })),
    ).toEqual([]);
  });
});

describe("toPopupState", () => {
  it("carries totals, settings and the stale marker", () => {
    const popup = toPopupState(engineState({ opt_in: true, age: 29 }), true);
    expect(popup.allTimeUsd).toBe("0.00095");
    expect(popup.optIn).toBe(true);
    expect(popup.age).toBe(29);
    expect(popup.stale).toBe(true);
  });
});

describe("formatUsd", () => {
  it("renders exact decimals for display", () => {
    expect(formatUsd("0.00095")).toBe("$0.00095");
    expect(formatUsd("0")).toBe("$0.00000");
  });

  it("passes junk through untouched", () => {
    expect(formatUsd("not-a-number")).toBe("not-a-number");
  });
});
