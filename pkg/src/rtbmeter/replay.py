"""Offline traffic replay: the file-based stand-in for live capture.

A replay log is line-delimited JSON, chronological, one line per outgoing
request plus optional cookie-jar definitions that requests reference:

    {"kind": "jar", "id": "j1", "entries": [["uid", "u123...", "tracker.example", false]]}
    {"kind": "request", "ts": 1420072833, "utc_offset_minutes": 60,
     "first_party": "news.example", "url": "https://...", "jar": "j1",
     "dnt": false, "gender": "female", "age": 29}

An importer converts HAR 1.2 captures into this format.  One replay file is
one session.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from decimal import Decimal
from pathlib import Path
from typing import Iterator

from .features import AdEvent, CookieJarSnapshot, Gender, UserMeta, registrable_domain
from .pipeline import AdPipeline

logger = logging.getLogger(__name__)

EMPTY_JAR = CookieJarSnapshot(entries=())


class ReplayFormatError(ValueError):
    """A replay log line that cannot be parsed at all."""


@dataclass(frozen=True)
class ReplayRecord:
    ts: float
    utc_offset_minutes: int
    first_party: str
    url: str
    dnt: bool
    jar: CookieJarSnapshot
    user_meta: UserMeta


@dataclass
class ReplayResult:
    events: list[AdEvent] = field(default_factory=list)
    total_usd: Decimal = Decimal(0)
    skipped_lines: int = 0


def iter_replay_records(path: str | Path) -> Iterator[tuple[int, ReplayRecord | None]]:
    """Yield (lineno, record) pairs; unparseable lines yield None and are counted.

    A line that is not even JSON aborts with the line number: that is a broken
    input file, not a skippable record.
    """
    jars: dict[str, CookieJarSnapshot] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReplayFormatError(f"{path}:{lineno}: not JSON ({exc})") from None
        kind = data.get("kind", "request")
        if kind == "jar":
            try:
                jars[str(data["id"])] = CookieJarSnapshot.build(
                    (str(n), str(v), str(d), bool(s)) for n, v, d, s in data["entries"]
                )
            except (KeyError, TypeError, ValueError):
                logger.warning("%s:%d: malformed jar record skipped", path, lineno)
                yield lineno, None
            continue
        if kind != "request":
            logger.warning("%s:%d: unknown record kind %r skipped", path, lineno, kind)
            yield lineno, None
            continue
        try:
            meta = UserMeta(
                gender=Gender(data["gender"]) if "gender" in data else Gender.UNDISCLOSED,
                age=int(data["age"]) if data.get("age") is not None else None,
            )
            record = ReplayRecord(
                ts=float(data["ts"]),
                utc_offset_minutes=int(data.get("utc_offset_minutes", 0)),
                first_party=str(data["first_party"]),
                url=str(data["url"]),
                dnt=bool(data.get("dnt", False)),
                jar=jars.get(str(data.get("jar", ""))) or EMPTY_JAR,
                user_meta=meta,
            )
        except (KeyError, TypeError, ValueError):
            logger.warning("%s:%d: malformed request record skipped", path, lineno)
            yield lineno, None
            continue
        yield lineno, record


def replay_file(path: str | Path, pipeline: AdPipeline) -> ReplayResult:
    """Stream one session file through the pipeline and total the ad value."""
    result = ReplayResult()
    for lineno, record in iter_replay_records(path):
        if record is None:
            result.skipped_lines += 1
            continue
        try:
            event = pipeline.process_request(
                url=record.url,
                first_party=record.first_party,
                ts=record.ts,
                utc_offset_minutes=record.utc_offset_minutes,
                dnt=record.dnt,
                jar=record.jar,
                user_meta=record.user_meta,
            )
        except Exception:
            logger.warning("%s:%d: record failed in pipeline, skipped", path, lineno, exc_info=True)
            result.skipped_lines += 1
            continue
        if event is not None:
            result.events.append(event)
            result.total_usd += event.price_value
    return result


# --- HAR import -----------------------------------------------------------------

def har_to_replay(har: dict) -> list[dict]:
    """Convert a HAR 1.2 capture into replay-log records.

    The first-party of an entry is the registrable domain of its page's first
    document request (falling back to the Referer header, then the request's
    own host).  Cookies sent with requests of a page form that page's jar;
    cookies without an expiry are treated as session cookies.
    """
    log = har.get("log", {})
    entries = log.get("entries", [])

    page_first_request: dict[str, str] = {}
    page_cookies: dict[str, dict[tuple[str, str], tuple[str, str, str, bool]]] = {}
    for entry in entries:
        page = entry.get("pageref", "")
        url = entry.get("request", {}).get("url", "")
        if page and page not in page_first_request and url:
            page_first_request[page] = url
        host = _host_or_empty(url)
        for cookie in entry.get("request", {}).get("cookies", []):
            name, value = str(cookie.get("name", "")), str(cookie.get("value", ""))
            if not name:
                continue
            is_session = not cookie.get("expires")
            page_cookies.setdefault(page, {})[(name, value)] = (
                name,
                value,
                registrable_domain(host) if host else "",
                is_session,
            )

    records: list[dict] = []
    for page, cookies in sorted(page_cookies.items()):
        records.append(
            {
                "kind": "jar",
                "id": page or "default",
                "entries": [list(c) for c in cookies.values()],
            }
        )

    request_records = []
    for entry in entries:
        request = entry.get("request", {})
        url = request.get("url")
        started = entry.get("startedDateTime")
        if not url or not started:
            continue
        try:
            moment = datetime.fromisoformat(started.replace("Z", "+00:00"))
        except ValueError:
            continue
        offset = moment.utcoffset()
        page = entry.get("pageref", "")
        first_party_url = page_first_request.get(page) or _referer_of(request) or url
        headers = {h.get("name", "").lower(): h.get("value", "") for h in request.get("headers", [])}
        request_records.append(
            {
                "kind": "request",
                "ts": moment.timestamp(),
                "utc_offset_minutes": int(offset.total_seconds() // 60) if offset else 0,
                "first_party": _host_or_empty(first_party_url),
                "url": url,
                "jar": page or "default",
                "dnt": headers.get("dnt") == "1",
            }
        )
    request_records.sort(key=lambda r: r["ts"])
    return records + request_records


def _host_or_empty(url: str) -> str:
    from urllib.parse import urlsplit

    return (urlsplit(url).hostname or "").lower()


def _referer_of(request: dict) -> str | None:
    for header in request.get("headers", []):
        if header.get("name", "").lower() == "referer":
            return header.get("value")
    return None
