/**
 * Live smoke test against the real engine process: a scripted page fires the
 * golden win-notification URL through the capture path, totals move to
 * 0.00095 USD and the popup state reflects them; flipping the reporting
 * opt-out stops record production while the display keeps counting.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { buildCaptureMessage } from "../src/capture.js";
import { EngineClient } from "../src/engineClient.js";
import { toPopupState } from "../src/popupState.js";

const GOLDEN_NURL =
  "https://cpp.imp.mpx.mopub.com/imp?ad_domain=mobileacademy.com&" +
  "ad_id=a1f93c02&adgroup_id=9921&adunit_id=b8803dd1&ads_creative_id=55021&" +
  "auction_time=1420072833&bid_price=1.17&bidder_id=302&bidder_name=PocketMath&" +
  "campaign_id=7781&charge_price=0.95&country=ESP&currency=USD&impression_id=imp4419&" +
  "latency=0.021&paid=0&pub_id=p556&pub_name=Outfit7&pub_rev0=7303147477182482&" +
  "request_id=rq81720&response_id=1420072832890&units=0&adgroup_type=marketplace&" +
  "adgroup_priority=9";

let engine: ChildProcess;
let client: EngineClient;
let base: string;

function startEngine(): Promise<string> {
  return new Promise((resolve, reject) => {
    engine = spawn(
      "python3",
      [
        "-m", "rtbmeter.cli", "engine",
        "--listen", "127.0.0.1:0",
        "--location", "ES",
        "--seed", "7",
        "--delay-min", "3600",
        "--delay-max", "7200",
      ],
      { cwd: "..", stdio: ["ignore", "pipe", "pipe"] },
    );
    let buffer = "";
    const timer = setTimeout(() => reject(new Error("engine did not start")), 20_000);
    engine.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/listening on ([\d.]+):(\d+)/);
      if (match) {
        clearTimeout(timer);
        resolve(`http://${match[1]}:${match[2]}`);
      }
    });
    engine.on("exit", (code) => reject(new Error(`engine exited early (${code})`)));
  });
}

function scriptedPageCapture(url: string) {
  // what the background worker would assemble for a page firing this request
  return buildCaptureMessage(
    { url, tabUrl: "https://news.example/article", timeStamp: 1420072833000 },
    [{ name: "uid", value: "u1234567890xyz", domain: ".tracker.example", session: false }],
    false,
    base,
  )!;
}

beforeAll(async () => {
  base = await startEngine();
  client = new EngineClient(base);
}, 30_000);

afterAll(() => {
  engine?.kill();
});

describe("extension against the live engine", () => {
  it("updates totals to 0.00095 USD for the golden nURL and reflects it in the popup", async () => {
    const result = await client.capture(scriptedPageCapture(GOLDEN_NURL));
    expect(result).toEqual({ detected: true, value_usd: "0.00095" });

    const state = await client.state();
    expect(state).not.toBeNull();
    expect(state!.all_time_usd).toBe("0.00095");
    expect(state!.session_usd).toBe("0.00095");

    const popup = toPopupState(state!, false);
    expect(popup.allTimeUsd).toBe("0.00095");
    expect(popup.adsDetected).toBe(1);
    expect(popup.breakdown.length).toBeGreaterThan(0);
  });

  it("non-ad traffic changes nothing", async () => {
    const result = await client.capture(scriptedPageCapture("https://cdn.example/app.js"));
    expect(result).toEqual({ detected: false });
    const state = await client.state();
    expect(state!.all_time_usd).toBe("0.00095");
  });

  it("opt-in produces report records; opt-out stops production but not display", async () => {
    let state = await client.updateSettings({ opt_in: true, gender: "female", age: 29 });
    expect(state!.opt_in).toBe(true);

    await client.capture(scriptedPageCapture(GOLDEN_NURL));
    state = await client.state();
    expect(state!.queue_depth).toBe(1);
    expect(Number(state!.all_time_usd)).toBeCloseTo(0.0019, 10);

    state = await client.updateSettings({ opt_in: false });
    expect(state!.queue_depth).toBe(0); // buffered records dropped on opt-out

    await client.capture(scriptedPageCapture(GOLDEN_NURL));
    state = await client.state();
    expect(state!.queue_depth).toBe(0); // no new records...
    expect(Number(state!.all_time_usd)).toBeCloseTo(0.00285, 10); // ...display continues
  });

  it("a dead engine is a silent drop for the client", async () => {
    const ghost = new EngineClient("http://127.0.0.1:1");
    expect(await ghost.capture(scriptedPageCapture(GOLDEN_NURL))).toBeNull();
    expect(await ghost.state()).toBeNull();
  });
});
