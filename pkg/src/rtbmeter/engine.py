"""Local capture engine: the loopback service behind the browser extension.

The extension is a thin shell; every capture message lands here, runs through
the shared ad pipeline, and updates the running totals the popup displays.
When reporting is opted in, each event also becomes an aggregated report
record queued for randomized-delay dispatch to the collection server.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
import urllib.request
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

from .anonymity import GranularityProfile
from .features import CookieJarSnapshot, Gender, UserMeta
from .pipeline import AdPipeline
from .server import HttpService, JsonHandler
from .transport import ClientQueue, build_record

logger = logging.getLogger(__name__)


def _host_utc_offset_minutes() -> int:
    offset = datetime.now(timezone.utc).astimezone().utcoffset()
    return int(offset.total_seconds() // 60) if offset else 0


@dataclass
class EngineSettings:
    gender: Gender = Gender.UNDISCLOSED
    age: int | None = None
    opt_in: bool = False


class LocalEngine:
    """Session state: totals, ad-type breakdown, user settings, report queue."""

    def __init__(
        self,
        pipeline: AdPipeline,
        profile: GranularityProfile,
        queue: ClientQueue,
        report_url: str | None = None,
        utc_offset_minutes: int | None = None,
        model_active: bool = True,
        state_path: str | Path | None = None,
    ):
        self.pipeline = pipeline
        self.profile = profile
        self.queue = queue
        self.report_url = report_url
        self.utc_offset_minutes = (
            _host_utc_offset_minutes() if utc_offset_minutes is None else utc_offset_minutes
        )
        self.model_active = model_active
        self.settings = EngineSettings()
        self.all_time_usd = Decimal(0)
        self.session_usd = Decimal(0)
        self.price_kind_counts: dict[str, int] = {"cleartext": 0, "inferred": 0}
        self.category_counts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._state_path = Path(state_path) if state_path else None
        self._load_persisted()
        self.queue.set_opt_in(self.settings.opt_in)

    def _load_persisted(self) -> None:
        """Restore the since-installation total and settings across restarts.

        Buffered report records are deliberately not persisted: losing them on
        restart only under-reports, never links.
        """
        if not self._state_path or not self._state_path.exists():
            return
        try:
            data = json.loads(self._state_path.read_text(encoding="utf-8"))
            self.all_time_usd = Decimal(str(data.get("all_time_usd", "0")))
            self.settings.gender = Gender(data.get("gender", "undisclosed"))
            age = data.get("age")
            self.settings.age = None if age is None else int(age)
            self.settings.opt_in = bool(data.get("opt_in", False))
        except (ValueError, ArithmeticError, OSError):
            logger.warning("unreadable engine state at %s; starting fresh", self._state_path)

    def _persist(self) -> None:
        if not self._state_path:
            return
        data = {
            "all_time_usd": str(self.all_time_usd),
            "gender": self.settings.gender.value,
            "age": self.settings.age,
            "opt_in": self.settings.opt_in,
        }
        tmp = self._state_path.with_suffix(self._state_path.suffix + ".tmp")
        tmp.write_text(json.dumps(data), encoding="utf-8")
        os.replace(tmp, self._state_path)

    def capture(self, message: dict, now: float | None = None) -> dict:
        """Process one capture message; never raises toward the extension."""
        now = time.time() if now is None else now
        url = str(message.get("url", ""))
        first_party = str(message.get("first_party", ""))
        ts = float(message.get("ts", now))
        dnt = bool(message.get("dnt", False))
        jar = CookieJarSnapshot.build(
            (str(n), str(v), str(d), bool(s))
            for n, v, d, s in message.get("cookies", [])
        )
        offset = int(message.get("utc_offset_minutes", self.utc_offset_minutes))

        with self._lock:
            meta = UserMeta(gender=self.settings.gender, age=self.settings.age)
            try:
                event = self.pipeline.process_request(
                    url=url,
                    first_party=first_party,
                    ts=ts,
                    utc_offset_minutes=offset,
                    dnt=dnt,
                    jar=jar,
                    user_meta=meta,
                )
            except Exception:
                logger.warning("capture failed for %s", first_party, exc_info=True)
                self.pipeline.counters.errors += 1
                return {"detected": False}
            if event is None:
                return {"detected": False}

            self.all_time_usd += event.price_value
            self.session_usd += event.price_value
            self.price_kind_counts[event.price_kind.value] += 1
            self.category_counts[event.iab_category] = (
                self.category_counts.get(event.iab_category, 0) + 1
            )
            if self.settings.opt_in:
                self.queue.enqueue(build_record(event, self.profile), now)
            self._persist()
        self.flush_reports(now)
        return {"detected": True, "value_usd": str(event.price_value)}

    def state(self) -> dict:
        with self._lock:
            return {
                "all_time_usd": str(self.all_time_usd),
                "session_usd": str(self.session_usd),
                "ads_detected": sum(self.price_kind_counts.values()),
                "price_kinds": dict(self.price_kind_counts),
                "categories": dict(self.category_counts),
                "gender": self.settings.gender.value,
                "age": self.settings.age,
                "opt_in": self.settings.opt_in,
                "queue_depth": len(self.queue.pending),
                "model_active": self.model_active,
            }

    def update_settings(self, payload: dict) -> dict:
        with self._lock:
            if "gender" in payload:
                self.settings.gender = Gender(payload["gender"])
            if "age" in payload:
                age = payload["age"]
                self.settings.age = None if age is None else int(age)
            if "opt_in" in payload:
                self.settings.opt_in = bool(payload["opt_in"])
                self.queue.set_opt_in(self.settings.opt_in)
            self._persist()
        return self.state()

    def flush_reports(self, now: float | None = None) -> int:
        """Dispatch due report records to the collection server, if configured."""
        if not self.report_url:
            return 0  # keep records buffered; dispatching would drop them
        now = time.time() if now is None else now
        with self._lock:
            batch = self.queue.dispatch_due(now)
        if not batch:
            return 0
        body = json.dumps([r.to_dict() for r in batch]).encode("utf-8")
        request = urllib.request.Request(
            self.report_url.rstrip("/") + "/v1/report",
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=10):
                pass
        except Exception:
            logger.warning("report dispatch failed; records re-queued")
            with self._lock:
                for record in batch:
                    self.queue.enqueue(record, now)
            return 0
        return len(batch)


class EngineHandler(JsonHandler):
    engine: LocalEngine

    def do_POST(self):
        try:
            payload = json.loads(self.read_body().decode("utf-8") or "{}")
        except (json.JSONDecodeError, UnicodeDecodeError):
            self.send_json(400, {"error": "body must be JSON"})
            return
        try:
            if self.path == "/local/capture":
                self.send_json(200, self.engine.capture(payload))
            elif self.path == "/local/settings":
                self.send_json(200, self.engine.update_settings(payload))
            else:
                self.send_json(404, {"error": "not found"})
        except (ValueError, KeyError) as exc:
            self.send_json(400, {"error": str(exc)})
        except Exception:
            logger.exception("engine request failed")
            self.send_json(500, {"error": "internal error"})

    def do_GET(self):
        if self.path == "/local/state":
            self.send_json(200, self.engine.state())
        else:
            self.send_json(404, {"error": "not found"})


def make_engine_service(engine: LocalEngine, host: str = "127.0.0.1", port: int = 0) -> HttpService:
    handler = type("BoundEngineHandler", (EngineHandler,), {"engine": engine})
    return HttpService(handler, host, port)


def seeded_queue(seed: int | None, delay_min: float, delay_max: float) -> ClientQueue:
    rng = random.Random(seed) if seed is not None else random.Random()
    return ClientQueue(rng=rng, delay_min=delay_min, delay_max=delay_max, opt_in=False)
