"""Detection of RTB win-notification URLs and charge-price extraction.

An outgoing request is matched against a registry of known demand-side
platforms by host suffix.  Matched requests become `NurlCandidate`s whose
query parameters are scanned for the DSP's registered price keywords; the
price token is classified as cleartext (decimal) or encrypted (anything
else) and cleartext values are normalized to US dollars per impression.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from urllib.parse import unquote_plus, urlsplit

logger = logging.getLogger(__name__)

# Token shapes that count as a cleartext price: a nonnegative plain decimal
# number ("0.95", "12", ".5", "3.").  Anything else is treated as encrypted.
_CLEARTEXT_RE = re.compile(r"^(?:\d+(?:\.\d*)?|\.\d+)$")

_HOST_PATTERN_RE = re.compile(r"^[a-z0-9]([a-z0-9-]*[a-z0-9])?(\.[a-z0-9]([a-z0-9-]*[a-z0-9])?)+$")


class UrlParseError(ValueError):
    """The input string is not a usable absolute URL."""


class RegistryError(ValueError):
    """A DSP registry entry or registry file violates its invariants."""


class PriceUnit(enum.Enum):
    CPM = "cpm"
    MICROS = "micros"
    USD = "usd"


class PriceKind(enum.Enum):
    CLEARTEXT = "cleartext"
    ENCRYPTED = "encrypted"


class PriceEncoding(enum.Enum):
    """What price encoding a DSP is known to use."""

    CLEARTEXT = "cleartext"
    ENCRYPTED = "encrypted"
    EITHER = "either"


@dataclass(frozen=True)
class PriceKeyword:
    """A parameter name carrying the charge price, with its declared unit."""

    name: str
    unit: PriceUnit = PriceUnit.CPM


@dataclass(frozen=True)
class DspRegistryEntry:
    dsp_name: str
    host_patterns: tuple[str, ...]
    price_keywords: tuple[PriceKeyword, ...]
    expects: PriceEncoding = PriceEncoding.EITHER
    aux_keywords: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.dsp_name:
            raise RegistryError("registry entry without a name")
        if not self.host_patterns:
            raise RegistryError(f"{self.dsp_name}: no host patterns")
        for pat in self.host_patterns:
            if not _HOST_PATTERN_RE.match(pat):
                raise RegistryError(
                    f"{self.dsp_name}: {pat!r} is not a bare domain suffix"
                )
        if not self.price_keywords:
            raise RegistryError(f"{self.dsp_name}: no price keywords")
        names = [kw.name for kw in self.price_keywords]
        if len(set(names)) != len(names):
            raise RegistryError(f"{self.dsp_name}: duplicate price keywords")

    def keyword_unit(self, name: str) -> PriceUnit:
        for kw in self.price_keywords:
            if kw.name == name:
                return kw.unit
        raise KeyError(name)


@dataclass(frozen=True)
class Registry:
    entries: tuple[DspRegistryEntry, ...]
    version: int = 1


@dataclass(frozen=True)
class NurlCandidate:
    """An outgoing request matched to a known DSP.

    `params` holds the query pairs percent-decoded exactly once, in order and
    with duplicates preserved.  `raw_params` keeps the undecoded tokens so the
    original query string can be reproduced byte for byte; a value of None
    marks a bare flag token without '='.
    """

    url: str
    dsp: DspRegistryEntry
    params: tuple[tuple[str, str], ...]
    path_segments: tuple[str, ...]
    observed_at: float
    raw_params: tuple[tuple[str, str | None], ...] = field(default=(), repr=False)

    def reserialize_query(self) -> str:
        return "&".join(
            name if value is None else f"{name}={value}"
            for name, value in self.raw_params
        )


@dataclass(frozen=True)
class PriceObservation:
    keyword: str
    raw_token: str
    kind: PriceKind
    unit: PriceUnit = PriceUnit.CPM
    value_usd_per_impression: Decimal | None = None
    aux: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        cleartext = is_cleartext_token(self.raw_token)
        if cleartext != (self.kind is PriceKind.CLEARTEXT):
            raise ValueError(f"token {self.raw_token!r} contradicts kind {self.kind.value}")
        if self.kind is PriceKind.ENCRYPTED and self.value_usd_per_impression is not None:
            raise ValueError("encrypted observations have no value until inference")
        if self.value_usd_per_impression is not None and self.value_usd_per_impression < 0:
            raise ValueError("negative price")


def parse_query(query: str) -> tuple[tuple[tuple[str, str], ...], tuple[tuple[str, str | None], ...]]:
    """Split a raw query string into decoded pairs and lossless raw tokens."""
    if query == "":
        return (), ()
    decoded = []
    raw = []
    for token in query.split("&"):
        if "=" in token:
            rname, rvalue = token.split("=", 1)
            raw.append((rname, rvalue))
            decoded.append((unquote_plus(rname), unquote_plus(rvalue)))
        else:
            raw.append((token, None))
            decoded.append((unquote_plus(token), ""))
    return tuple(decoded), tuple(raw)


def _split_url(url: str):
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise UrlParseError(f"not an absolute http(s) URL: {url!r}")
    host = parts.hostname
    if not host:
        raise UrlParseError(f"URL without a host: {url!r}")
    return parts, host.lower()


def host_matches(host: str, pattern: str) -> bool:
    """Suffix rule: the host is the pattern or a subdomain of it."""
    return host == pattern or host.endswith("." + pattern)


def detect_nurl(
    url: str, registry: Registry | list[DspRegistryEntry], observed_at: float
) -> NurlCandidate | None:
    """Match an outgoing URL against the DSP registry.

    Returns a candidate for the entry with the longest matching host suffix,
    or None when no entry matches (the request passes untouched).  Raises
    UrlParseError for unusable URLs, which is distinct from a non-match.
    """
    entries = registry.entries if isinstance(registry, Registry) else registry
    parts, host = _split_url(url)

    best: tuple[int, DspRegistryEntry] | None = None
    for entry in entries:
        for pattern in entry.host_patterns:
            if host_matches(host, pattern):
                if best is None or len(pattern) > best[0]:
                    best = (len(pattern), entry)
    if best is None:
        return None

    params, raw_params = parse_query(parts.query)
    segments = tuple(unquote_plus(s) for s in parts.path.split("/") if s)
    return NurlCandidate(
        url=url,
        dsp=best[1],
        params=params,
        path_segments=segments,
        observed_at=observed_at,
        raw_params=raw_params,
    )


def is_cleartext_token(token: str) -> bool:
    return bool(_CLEARTEXT_RE.match(token))


def _keyword_pairs(candidate: NurlCandidate):
    """All key/value pairs a price keyword may live in, in scan order.

    Query parameters first, then path segments shaped `key=value` or
    `key/value` (two consecutive segments) as a fallback.
    """
    for name, value in candidate.params:
        yield name, value
    segments = candidate.path_segments
    for i, seg in enumerate(segments):
        if "=" in seg:
            name, value = seg.split("=", 1)
            yield name, value
        elif i + 1 < len(segments):
            yield seg, segments[i + 1]


def extract_price(candidate: NurlCandidate) -> PriceObservation | None:
    """Pull the charge price out of a candidate, or None on keyword mismatch.

    Only the DSP's registered keywords count; a price-looking parameter under
    any other name is a false positive and the request is let through.  The
    first registered keyword in parameter order wins; later occurrences are
    logged as duplicates.
    """
    keywords = {kw.name for kw in candidate.dsp.price_keywords}
    aux_names = set(candidate.dsp.aux_keywords)

    hit: tuple[str, str] | None = None
    aux: list[tuple[str, str]] = []
    for name, value in _keyword_pairs(candidate):
        if name in keywords:
            if hit is None:
                hit = (name, value)
            elif (name, value) != hit:
                logger.warning(
                    "duplicate price keyword %r on %s (kept first occurrence)",
                    name,
                    candidate.dsp.dsp_name,
                )
        elif name in aux_names and all(a[0] != name for a in aux):
            aux.append((name, value))

    if hit is None:
        return None
    keyword, token = hit
    unit = candidate.dsp.keyword_unit(keyword)
    if is_cleartext_token(token):
        return PriceObservation(
            keyword=keyword,
            raw_token=token,
            kind=PriceKind.CLEARTEXT,
            unit=unit,
            value_usd_per_impression=normalize_price(Decimal(token), unit),
            aux=tuple(aux),
        )
    return PriceObservation(
        keyword=keyword,
        raw_token=token,
        kind=PriceKind.ENCRYPTED,
        unit=unit,
        value_usd_per_impression=None,
        aux=tuple(aux),
    )


def normalize_price(value: Decimal, unit: PriceUnit) -> Decimal:
    """Convert a price to US dollars per impression, exactly.

    CPM is cost per thousand impressions; micros are 1e-6 dollars per
    impression.  Scaling moves the decimal exponent, so no rounding occurs.
    """
    if not isinstance(value, Decimal):
        raise TypeError("price values must be Decimal")
    if value.is_nan() or value < 0:
        raise ValueError(f"price must be a nonnegative decimal, got {value}")
    if unit is PriceUnit.CPM:
        return value.scaleb(-3)
    if unit is PriceUnit.MICROS:
        return value.scaleb(-6)
    return value


# --- registry file -------------------------------------------------------
#
# Line-oriented UTF-8, '#' comments, first significant line 'version N'.
# Entry lines:  name | host patterns | price keywords | encoding [| aux=...]
# Patterns and keywords are comma separated; a keyword may carry a unit
# suffix, e.g. 'winning_price:micros' (default unit is cpm).

def parse_registry(text: str) -> Registry:
    version: int | None = None
    entries: list[DspRegistryEntry] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if version is None:
            m = re.match(r"^version\s+(\d+)$", line)
            if not m:
                raise RegistryError(f"line {lineno}: expected 'version N' header")
            version = int(m.group(1))
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) not in (4, 5):
            raise RegistryError(f"line {lineno}: expected 4 or 5 fields, got {len(fields)}")
        name, patterns_s, keywords_s, expects_s = fields[:4]
        keywords = []
        for kw in keywords_s.split(","):
            kw = kw.strip()
            if ":" in kw:
                kname, unit_s = kw.split(":", 1)
                try:
                    unit = PriceUnit(unit_s)
                except ValueError:
                    raise RegistryError(f"line {lineno}: unknown price unit {unit_s!r}") from None
                keywords.append(PriceKeyword(kname, unit))
            else:
                keywords.append(PriceKeyword(kw))
        try:
            expects = PriceEncoding(expects_s)
        except ValueError:
            raise RegistryError(f"line {lineno}: unknown encoding {expects_s!r}") from None
        aux: tuple[str, ...] = ()
        if len(fields) == 5:
            m = re.match(r"^aux=(.+)$", fields[4])
            if not m:
                raise RegistryError(f"line {lineno}: fifth field must be 'aux=...'")
            aux = tuple(a.strip() for a in m.group(1).split(",") if a.strip())
        entries.append(
            DspRegistryEntry(
                dsp_name=name,
                host_patterns=tuple(p.strip() for p in patterns_s.split(",") if p.strip()),
                price_keywords=tuple(keywords),
                expects=expects,
                aux_keywords=aux,
            )
        )
    if version is None:
        raise RegistryError("empty registry file")
    return Registry(entries=tuple(entries), version=version)


def load_registry(path: str | Path) -> Registry:
    return parse_registry(Path(path).read_text(encoding="utf-8"))
