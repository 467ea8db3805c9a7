"""One implementation of the per-request ad pipeline.

Replay of traffic logs and live capture through the local engine both drive
this class: cookie-sync bookkeeping, nURL detection, price extraction,
encrypted-price inference with the rolling-average fallback, and safe event
assembly.  Requests are only ever observed, never altered.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Mapping

from . import features as feat
from .anonymity import GranularityProfile
from .features import (
    AdEvent,
    CookieJarSnapshot,
    IabMapping,
    InferredPrice,
    SessionLocationCache,
    SizeKeywords,
    UserMeta,
    assemble_event,
    detect_cookie_sync,
    extract_ad_format,
    format_ad_size,
    iab_category,
    registrable_domain,
    temporal_bins,
)
from .nurl import PriceKind, Registry, detect_nurl, extract_price
from .pricing import FALLBACK, ForestModel, RollingAverage, infer_price

logger = logging.getLogger(__name__)


def _unknown_location() -> str:
    return feat.UNKNOWN_LOCATION


@dataclass
class PipelineCounters:
    requests: int = 0
    candidates: int = 0
    events: int = 0
    keyword_mismatches: int = 0
    inferred: int = 0
    fallbacks: int = 0
    foreign_currency: int = 0
    errors: int = 0


@dataclass
class AdPipeline:
    registry: Registry
    iab: IabMapping
    trackers: frozenset[str]
    sizes: SizeKeywords
    profile: GranularityProfile
    model: ForestModel | None
    rolling: RollingAverage
    location_resolver: Callable[[], str] = _unknown_location
    bin_hours: int = 3
    counters: PipelineCounters = field(default_factory=PipelineCounters)

    def __post_init__(self) -> None:
        self.location_cache = SessionLocationCache()
        self._synced_tabs: set[str] = set()

    def process_request(
        self,
        url: str,
        first_party: str,
        ts: float,
        utc_offset_minutes: int,
        dnt: bool,
        jar: CookieJarSnapshot,
        user_meta: UserMeta | None = None,
    ) -> AdEvent | None:
        """Run one outgoing request through the pipeline.

        Returns the assembled event for a priced ad, or None for everything
        else (non-ad traffic, keyword mismatches, foreign currencies).
        """
        self.counters.requests += 1
        tab = registrable_domain(first_party)
        if detect_cookie_sync(url, first_party, jar, self.trackers):
            self._synced_tabs.add(tab)

        candidate = detect_nurl(url, self.registry, ts)
        if candidate is None:
            return None
        self.counters.candidates += 1

        observation = extract_price(candidate)
        if observation is None:
            self.counters.keyword_mismatches += 1
            return None

        currency = next(
            (v for k, v in candidate.params if k.lower() == "currency"), None
        )
        if currency is not None and currency.upper() != "USD":
            self.counters.foreign_currency += 1
            logger.warning("skipping non-USD price (currency=%s) on %s", currency, candidate.dsp.dsp_name)
            return None

        tod, dow = temporal_bins(ts, utc_offset_minutes, self.bin_hours)
        context = {
            "location": feat.resolve_location(self.location_resolver, self.location_cache),
            "time_of_day": tod,
            "day_of_week": dow,
            "cookie_sync": tab in self._synced_tabs,
            "dnt": dnt,
            "ad_format": format_ad_size(extract_ad_format(candidate, self.sizes)),
            "winner_dsp": candidate.dsp.dsp_name,
            "iab_category": iab_category(first_party, self.iab),
        }
        meta = user_meta or UserMeta()

        if observation.kind is PriceKind.CLEARTEXT:
            assert observation.value_usd_per_impression is not None
            self.rolling.add(observation.value_usd_per_impression)
            event = assemble_event(observation, context, meta)
        else:
            value = self._infer_value(observation.keyword, context, meta)
            event = assemble_event(InferredPrice(observation.keyword, value), context, meta)

        self.counters.events += 1
        return event

    def _infer_value(self, keyword: str, context: Mapping[str, object], meta: UserMeta) -> Decimal:
        self.counters.inferred += 1
        raw = {
            "gender": meta.gender.value,
            "age": feat.age_bucket(meta.age).value,
            "location": str(context["location"]),
            "time_of_day": str(context["time_of_day"]),
            "day_of_week": context["day_of_week"].value,  # type: ignore[union-attr]
            "cookie_syncing": "true" if context["cookie_sync"] else "false",
            "do_not_track": "true" if context["dnt"] else "false",
            "ad_format": str(context["ad_format"]),
            "winner_dsp": str(context["winner_dsp"]),
            "category": str(context["iab_category"]),
            "price_keyword": keyword,
        }
        if self.model is not None:
            model_feats = {}
            for spec in self.profile.features:
                if spec.feature == "price_value":
                    continue
                if spec.feature not in raw:
                    raise KeyError(
                        f"profile {self.profile.name!r} maps {spec.feature!r}, "
                        "which the pipeline cannot derive"
                    )
                model_feats[spec.feature] = str(spec.map_raw(raw[spec.feature]))
            result = infer_price(self.model, model_feats)
            if result is not FALLBACK:
                return result[1]
        self.counters.fallbacks += 1
        return self.rolling.estimate()
