"""Per-ad feature extraction: the metadata record built for every detected ad.

Everything here is deliberately coarse.  Events never carry raw URLs, cookie
values, first-party domains or any other user identifier; assembly fails
closed when such material is offered.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping
from urllib.parse import unquote_plus, urlsplit

from .nurl import NurlCandidate, PriceKind, PriceObservation, parse_query

NOT_SPECIFIED_IAB = "not specified IAB"
UNKNOWN_LOCATION = "ZZ"

_SIZE_RE = re.compile(r"^(\d{1,5})[xX](\d{1,5})$")
_COUNTRY_RE = re.compile(r"^[A-Z]{2}$")

# Multi-label public suffixes we care about; everything else is treated as a
# plain TLD.  Kept small on purpose: the toolkit only needs registrable-domain
# comparisons, not full PSL semantics.
_MULTI_SUFFIXES = frozenset(
    {
        "co.uk", "org.uk", "ac.uk", "gov.uk", "me.uk", "net.uk",
        "com.au", "net.au", "org.au", "edu.au", "gov.au",
        "co.nz", "net.nz", "org.nz",
        "co.jp", "ne.jp", "or.jp", "ac.jp", "go.jp",
        "com.br", "net.br", "org.br",
        "com.mx", "com.ar", "com.co", "com.pe", "com.ve",
        "co.in", "net.in", "org.in", "ac.in",
        "co.kr", "or.kr", "com.cn", "net.cn", "org.cn",
        "com.tw", "com.hk", "com.sg", "com.my", "co.id", "co.th",
        "com.ph", "com.vn", "com.pk", "com.bd",
        "co.za", "com.ng", "co.ke", "com.eg",
        "com.tr", "com.sa", "co.il", "com.ua", "com.pl", "com.gr",
        "com.pt", "com.ru",
    }
)


class EventAssemblyError(ValueError):
    """The offered context cannot be turned into a safe AdEvent."""


class Gender(enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNDISCLOSED = "undisclosed"


class AgeBucket(enum.Enum):
    """Ten-year (or wider) age bins; never finer than ten years."""

    UNDER_15 = "0-14"
    FROM_15 = "15-24"
    FROM_25 = "25-34"
    FROM_35 = "35-44"
    FROM_45 = "45-54"
    FROM_55 = "55-64"
    FROM_65 = "65-74"
    FROM_75 = "75+"
    UNDISCLOSED = "undisclosed"


class DayOfWeek(enum.Enum):
    MONDAY = "monday"
    TUESDAY = "tuesday"
    WEDNESDAY = "wednesday"
    THURSDAY = "thursday"
    FRIDAY = "friday"
    SATURDAY = "saturday"
    SUNDAY = "sunday"


_DOW_ORDER = tuple(DayOfWeek)


class EventPriceKind(enum.Enum):
    CLEARTEXT = "cleartext"
    INFERRED = "inferred"


def age_bucket(age: int | None) -> AgeBucket:
    if age is None:
        return AgeBucket.UNDISCLOSED
    if age < 0 or age > 130:
        raise ValueError(f"implausible age {age}")
    if age < 15:
        return AgeBucket.UNDER_15
    if age >= 75:
        return AgeBucket.FROM_75
    lower = 15 + 10 * ((age - 15) // 10)
    return AgeBucket(f"{lower}-{lower + 9}")


def registrable_domain(host: str) -> str:
    """Best-effort eTLD+1: last two labels, or three for known multi suffixes."""
    host = host.lower().strip(".")
    labels = host.split(".")
    if len(labels) <= 2:
        return host
    if ".".join(labels[-2:]) in _MULTI_SUFFIXES:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def domain_in_set(host: str, domains: frozenset[str] | set[str]) -> bool:
    """True when the host or any of its parent domains is listed."""
    host = host.lower().strip(".")
    labels = host.split(".")
    return any(".".join(labels[i:]) in domains for i in range(len(labels) - 1))


# --- cookie synchronization ------------------------------------------------

@dataclass(frozen=True)
class CookieJarSnapshot:
    """Identifier-looking cookies only: non-session, value of 10+ characters."""

    entries: tuple[tuple[str, str, str], ...]  # (name, value, source_domain)

    @classmethod
    def build(cls, raw: Iterable[tuple[str, str, str, bool]]) -> "CookieJarSnapshot":
        kept = tuple(
            (name, value, source)
            for name, value, source, is_session in raw
            if not is_session and len(value) >= 10
        )
        return cls(entries=kept)

    @property
    def values(self) -> tuple[str, ...]:
        return tuple(v for _, v, _ in self.entries)


def detect_cookie_sync(
    request_url: str,
    first_party: str,
    jar: CookieJarSnapshot,
    trackers: frozenset[str] | set[str],
) -> bool:
    """Binary flag: a stored identifier travels to a third-party tracker.

    True iff some jar value appears verbatim in the URL's parameter values or
    path, the destination host is on the tracker list, and the destination's
    registrable domain differs from the page the user is on.  The tracker's
    identity is never part of the result.
    """
    parts = urlsplit(request_url)
    host = (parts.hostname or "").lower()
    if not host:
        return False
    if registrable_domain(host) == registrable_domain(first_party):
        return False
    if not domain_in_set(host, trackers):
        return False

    decoded, _ = parse_query(parts.query)
    haystacks = [value for _, value in decoded]
    haystacks.append(unquote_plus(parts.path))
    return any(any(v in h for h in haystacks) for v in jar.values)


def load_tracker_domains(path: str | Path) -> frozenset[str]:
    domains = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            domains.add(line)
    return frozenset(domains)


# --- IAB category -----------------------------------------------------------

@dataclass(frozen=True)
class IabMapping:
    entries: Mapping[str, str]
    max_entries: int = 10_000

    def __post_init__(self) -> None:
        if len(self.entries) > self.max_entries:
            raise ValueError(
                f"IAB mapping holds {len(self.entries)} entries, cap is {self.max_entries}"
            )

    @classmethod
    def load(cls, path: str | Path, max_entries: int = 10_000) -> "IabMapping":
        entries: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            try:
                domain, category = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'domain<TAB>category'") from None
            entries[_normalize_domain(domain)] = category.strip()
        return cls(entries=entries, max_entries=max_entries)


def _normalize_domain(domain: str) -> str:
    domain = domain.strip().lower().strip(".")
    if domain.startswith("www."):
        domain = domain[4:]
    return domain


def iab_category(domain: str, mapping: IabMapping) -> str:
    return mapping.entries.get(_normalize_domain(domain), NOT_SPECIFIED_IAB)


# --- ad format ---------------------------------------------------------------

@dataclass(frozen=True)
class SizeKeywords:
    joint: frozenset[str]
    width: frozenset[str]
    height: frozenset[str]

    @classmethod
    def load(cls, path: str | Path) -> "SizeKeywords":
        joint, width, height = set(), set(), set()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "joint" and len(parts) == 2:
                joint.add(parts[1])
            elif parts[0] == "pair" and len(parts) == 3:
                width.add(parts[1])
                height.add(parts[2])
            else:
                raise ValueError(f"{path}:{lineno}: expected 'joint KW' or 'pair WKW HKW'")
        return cls(frozenset(joint), frozenset(width), frozenset(height))


def extract_ad_format(
    candidate: NurlCandidate, size_keywords: SizeKeywords
) -> tuple[int, int] | None:
    """First size-looking parameter wins: joint 'WxH' tokens or a w/h pair."""
    width: int | None = None
    height: int | None = None
    for name, value in candidate.params:
        if name in size_keywords.joint:
            m = _SIZE_RE.match(value.strip())
            if m:
                return int(m.group(1)), int(m.group(2))
        elif name in size_keywords.width and width is None and value.isdigit():
            width = int(value)
        elif name in size_keywords.height and height is None and value.isdigit():
            height = int(value)
        if width is not None and height is not None:
            return width, height
    return None


def format_ad_size(size: tuple[int, int] | None) -> str:
    return f"{size[0]}x{size[1]}" if size else "unknown"


# --- temporal bins -----------------------------------------------------------

def temporal_bins(
    observed_at: float, utc_offset_minutes: int, bin_hours: int = 3
) -> tuple[int, DayOfWeek]:
    """Local-time bin index and weekday for a UTC timestamp."""
    if bin_hours <= 0 or 24 % bin_hours != 0:
        raise ValueError(f"bin width must divide 24 hours, got {bin_hours}")
    tz = timezone(timedelta(minutes=utc_offset_minutes))
    local = datetime.fromtimestamp(observed_at, tz=tz)
    return local.hour // bin_hours, _DOW_ORDER[local.weekday()]


# --- location ----------------------------------------------------------------

@dataclass
class SessionLocationCache:
    """Country code held for the whole session; the resolver runs at most once."""

    value: str | None = None
    attempted: bool = False


def static_file_resolver(path: str | Path) -> Callable[[], str]:
    """Geo-resolver stub for tests and replay: the country code sits in a file."""

    def resolver() -> str:
        return Path(path).read_text(encoding="utf-8").strip()

    return resolver


def resolve_location(resolver: Callable[[], str], cache: SessionLocationCache) -> str:
    if cache.value is not None:
        return cache.value
    if cache.attempted:
        return UNKNOWN_LOCATION
    cache.attempted = True
    try:
        code = resolver().strip().upper()
    except Exception:
        cache.value = UNKNOWN_LOCATION
        return UNKNOWN_LOCATION
    if not _COUNTRY_RE.match(code):
        code = UNKNOWN_LOCATION
    cache.value = code
    return code


# --- the event ----------------------------------------------------------------

@dataclass(frozen=True)
class AdEvent:
    gender: Gender
    age_bucket: AgeBucket
    location: str
    time_of_day: int
    day_of_week: DayOfWeek
    cookie_sync: bool
    dnt: bool
    ad_format: str
    winner_dsp: str
    iab_category: str
    price_keyword: str
    price_value: Decimal
    price_kind: EventPriceKind

    def __post_init__(self) -> None:
        if not (_COUNTRY_RE.match(self.location) or self.location == UNKNOWN_LOCATION):
            raise EventAssemblyError(f"location must be a country code, got {self.location!r}")
        if not 0 <= self.time_of_day < 24:
            raise EventAssemblyError(f"time_of_day bin out of range: {self.time_of_day}")
        if self.price_value < 0:
            raise EventAssemblyError("negative price")
        for label, text in (
            ("ad_format", self.ad_format),
            ("winner_dsp", self.winner_dsp),
            ("iab_category", self.iab_category),
            ("price_keyword", self.price_keyword),
        ):
            if _looks_like_url_or_identifier(text):
                raise EventAssemblyError(f"{label} value {text!r} looks like leaked context")


# Feature names as they appear on the wire and in granularity profiles.
FEATURE_NAMES = (
    "gender",
    "age",
    "location",
    "time_of_day",
    "day_of_week",
    "cookie_syncing",
    "do_not_track",
    "ad_format",
    "winner_dsp",
    "category",
    "price_keyword",
    "price_value",
)

_CONTEXT_FIELDS = (
    "location",
    "time_of_day",
    "day_of_week",
    "cookie_sync",
    "dnt",
    "ad_format",
    "winner_dsp",
    "iab_category",
)

def _looks_like_url_or_identifier(text: str) -> bool:
    query_shaped = "&" in text and "=" in text
    return "://" in text or "?" in text or query_shaped or len(text) > 80


@dataclass(frozen=True)
class UserMeta:
    gender: Gender = Gender.UNDISCLOSED
    age: int | None = None


@dataclass(frozen=True)
class InferredPrice:
    keyword: str
    value_usd_per_impression: Decimal


def assemble_event(
    price: PriceObservation | InferredPrice,
    context: Mapping[str, object],
    user_meta: UserMeta | None = None,
) -> AdEvent:
    """Build the reportable record, refusing anything that could deanonymize.

    `context` must contain exactly the extracted feature fields; unknown keys
    (a first-party domain, a raw URL, cookie material) abort assembly.  The
    price must already be resolved to a USD value: cleartext observations
    carry one, encrypted ones must have been run through inference first.
    """
    extra = set(context) - set(_CONTEXT_FIELDS)
    if extra:
        raise EventAssemblyError(f"forbidden context fields: {sorted(extra)}")
    missing = set(_CONTEXT_FIELDS) - set(context)
    if missing:
        raise EventAssemblyError(f"missing context fields: {sorted(missing)}")

    if isinstance(price, PriceObservation):
        if price.kind is not PriceKind.CLEARTEXT or price.value_usd_per_impression is None:
            raise EventAssemblyError("encrypted price not resolved; run inference first")
        keyword, value, kind = price.keyword, price.value_usd_per_impression, EventPriceKind.CLEARTEXT
    else:
        keyword, value, kind = price.keyword, price.value_usd_per_impression, EventPriceKind.INFERRED

    meta = user_meta or UserMeta()
    return AdEvent(
        gender=meta.gender,
        age_bucket=age_bucket(meta.age),
        location=str(context["location"]),
        time_of_day=int(context["time_of_day"]),  # type: ignore[arg-type]
        day_of_week=context["day_of_week"],  # type: ignore[arg-type]
        cookie_sync=bool(context["cookie_sync"]),
        dnt=bool(context["dnt"]),
        ad_format=str(context["ad_format"]),
        winner_dsp=str(context["winner_dsp"]),
        iab_category=str(context["iab_category"]),
        price_keyword=keyword,
        price_value=value,
        price_kind=kind,
    )


def raw_feature_value(event: AdEvent, feature: str) -> str:
    """Canonical string form of one event feature, as profile mappers see it."""
    if feature == "gender":
        return event.gender.value
    if feature == "age":
        return event.age_bucket.value
    if feature == "location":
        return event.location
    if feature == "time_of_day":
        return str(event.time_of_day)
    if feature == "day_of_week":
        return event.day_of_week.value
    if feature == "cookie_syncing":
        return "true" if event.cookie_sync else "false"
    if feature == "do_not_track":
        return "true" if event.dnt else "false"
    if feature == "ad_format":
        return event.ad_format
    if feature == "winner_dsp":
        return event.winner_dsp
    if feature == "category":
        return event.iab_category
    if feature == "price_keyword":
        return event.price_keyword
    if feature == "price_value":
        return str(event.price_value)
    raise KeyError(feature)


def event_to_dict(event: AdEvent) -> dict[str, object]:
    return {
        "gender": event.gender.value,
        "age": event.age_bucket.value,
        "location": event.location,
        "time_of_day": event.time_of_day,
        "day_of_week": event.day_of_week.value,
        "cookie_syncing": event.cookie_sync,
        "do_not_track": event.dnt,
        "ad_format": event.ad_format,
        "winner_dsp": event.winner_dsp,
        "category": event.iab_category,
        "price_keyword": event.price_keyword,
        "price_value": str(event.price_value),
        "price_kind": event.price_kind.value,
    }


def event_from_dict(data: Mapping[str, object]) -> AdEvent:
    return AdEvent(
        gender=Gender(data["gender"]),
        age_bucket=AgeBucket(data["age"]),
        location=str(data["location"]),
        time_of_day=int(data["time_of_day"]),  # type: ignore[arg-type]
        day_of_week=DayOfWeek(data["day_of_week"]),
        cookie_sync=bool(data["cookie_syncing"]),
        dnt=bool(data["do_not_track"]),
        ad_format=str(data["ad_format"]),
        winner_dsp=str(data["winner_dsp"]),
        iab_category=str(data["category"]),
        price_keyword=str(data["price_keyword"]),
        price_value=Decimal(str(data["price_value"])),
        price_kind=EventPriceKind(data.get("price_kind", "cleartext")),
    )
