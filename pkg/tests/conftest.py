from __future__ import annotations

import random
from decimal import Decimal

import pytest

from rtbmeter.features import AdEvent, AgeBucket, DayOfWeek, EventPriceKind, Gender
from rtbmeter.nurl import (
    DspRegistryEntry,
    PriceEncoding,
    PriceKeyword,
    Registry,
)

# The worked example this repo's fixtures revolve around: a mopub win
# notification with a cleartext 0.95 CPM charge price and a 1.17 CPM bid.
GOLDEN_NURL = (
    "https://cpp.imp.mpx.mopub.com/imp?ad_domain=mobileacademy.com&"
    "ad_id=a1f93c02&adgroup_id=9921&adunit_id=b8803dd1&ads_creative_id=55021&"
    "auction_time=1420072833&bid_price=1.17&bidder_id=302&bidder_name=PocketMath&"
    "campaign_id=7781&charge_price=0.95&country=ESP&currency=USD&impression_id=imp4419&"
    "latency=0.021&paid=0&pub_id=p556&pub_name=Outfit7&pub_rev0=7303147477182482&"
    "request_id=rq81720&response_id=1420072832890&units=0&adgroup_type=marketplace&"
    "adgroup_priority=9"
)

GOLDEN_TS = 1420072833.0


@pytest.fixture
def mopub_entry() -> DspRegistryEntry:
    return DspRegistryEntry(
        dsp_name="mopub",
        host_patterns=("mopub.com",),
        price_keywords=(PriceKeyword("charge_price"),),
        expects=PriceEncoding.EITHER,
        aux_keywords=("bid_price",),
    )


@pytest.fixture
def registry(mopub_entry) -> Registry:
    return Registry(entries=(mopub_entry,))


def make_event(
    price: str = "0.00095",
    *,
    gender: Gender = Gender.UNDISCLOSED,
    age: AgeBucket = AgeBucket.UNDISCLOSED,
    location: str = "ES",
    time_of_day: int = 5,
    day_of_week: DayOfWeek = DayOfWeek.SATURDAY,
    cookie_sync: bool = False,
    dnt: bool = False,
    ad_format: str = "300x250",
    winner_dsp: str = "mopub",
    iab: str = "News",
    keyword: str = "charge_price",
    kind: EventPriceKind = EventPriceKind.CLEARTEXT,
) -> AdEvent:
    return AdEvent(
        gender=gender,
        age_bucket=age,
        location=location,
        time_of_day=time_of_day,
        day_of_week=day_of_week,
        cookie_sync=cookie_sync,
        dnt=dnt,
        ad_format=ad_format,
        winner_dsp=winner_dsp,
        iab_category=iab,
        price_keyword=keyword,
        price_value=Decimal(price),
        price_kind=kind,
    )


def random_event(rng: random.Random) -> AdEvent:
    """An arbitrary-but-valid event, for volume tests."""
    countries = ["ES", "GR", "CH", "CY", "US", "DE", "FR", "GB", "BR", "JP"]
    sizes = ["300x250", "728x90", "320x50", "160x600", "970x250", "unknown"]
    dsps = ["mopub", "doubleclick", "appnexus", "rubicon", "openx", "criteo"]
    iabs = ["News", "Sports", "Technology & Computing", "Travel", "not specified IAB"]
    return make_event(
        price=str(Decimal(rng.randrange(1, 400)) * Decimal("0.00001")),
        gender=rng.choice(list(Gender)),
        age=rng.choice(list(AgeBucket)),
        location=rng.choice(countries),
        time_of_day=rng.randrange(8),
        day_of_week=rng.choice(list(DayOfWeek)),
        cookie_sync=rng.random() < 0.5,
        dnt=rng.random() < 0.3,
        ad_format=rng.choice(sizes),
        winner_dsp=rng.choice(dsps),
        iab=rng.choice(iabs),
    )
