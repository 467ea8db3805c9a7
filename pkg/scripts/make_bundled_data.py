#!/usr/bin/env python3
"""Regenerate the bundled granularity profiles and the default model.

Outputs land in src/rtbmeter/data/.  Everything here is deterministic, so the
committed files can be reproduced exactly:

    python scripts/make_bundled_data.py
"""

from __future__ import annotations

import random
import sys
from decimal import Decimal
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from rtbmeter import data as bundled  # noqa: E402
from rtbmeter.anonymity import (  # noqa: E402
    FeatureGranularity,
    GranularityProfile,
    dump_profile,
)
from rtbmeter.features import AgeBucket, DayOfWeek, Gender  # noqa: E402

DATA = ROOT / "src" / "rtbmeter" / "data"
PROFILES = DATA / "profiles"

# Uniform-assumption baseline ladder: per-column class counts for
# (gender, age, location, time_of_day, day_of_week, cookie_syncing,
#  do_not_track, ad_format, winner_dsp, category, price_keyword, price_value).
UNIFORM_LADDER = [
    (2, 100, 240, 24, 7, 200, 2, 20, 200, 500, 1, 200),
    (2, 5, 240, 24, 7, 200, 2, 20, 200, 500, 1, 200),
    (2, 5, 240, 8, 7, 200, 2, 20, 200, 500, 1, 200),
    (2, 5, 240, 8, 7, 2, 2, 20, 200, 500, 1, 200),
    (2, 5, 240, 8, 7, 2, 2, 20, 200, 30, 1, 200),
    (2, 5, 120, 8, 7, 2, 2, 20, 200, 30, 1, 200),
    (2, 5, 120, 8, 7, 2, 2, 20, 200, 30, 1, 50),
    (2, 5, 25, 8, 7, 2, 2, 20, 200, 30, 1, 50),
    (2, 5, 25, 8, 7, 2, 2, 3, 200, 30, 1, 3),
]
UNIFORM_FEATURES = (
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

# Real-dataset aggregation ladder over
# (location, day_of_week, time_of_day, ad_format, winner_dsp,
#  cookie_syncing, category).
AGGREGATED_LADDER = [
    (184, 7, 6, 17, 149, 2, 25),
    (26, 7, 6, 17, 149, 2, 25),
    (26, 2, 6, 17, 149, 2, 25),
    (26, 2, 2, 17, 149, 2, 25),
    (26, 2, 2, 3, 149, 2, 25),
    (26, 2, 2, 3, 15, 2, 25),
]
AGGREGATED_FEATURES = (
    "location",
    "day_of_week",
    "time_of_day",
    "ad_format",
    "winner_dsp",
    "cookie_syncing",
    "category",
)

IAB_TIER1 = [
    "Arts & Entertainment",
    "Automotive",
    "Business",
    "Careers",
    "Education",
    "Family & Parenting",
    "Health & Fitness",
    "Food & Drink",
    "Hobbies & Interests",
    "Home & Garden",
    "Law, Gov't & Politics",
    "News",
    "Personal Finance",
    "Society",
    "Science",
    "Pets",
    "Sports",
    "Style & Fashion",
    "Technology & Computing",
    "Travel",
    "Real Estate",
    "Shopping",
    "Religion & Spirituality",
    "Uncategorized",
    "Non-Standard Content",
    "Illegal Content",
]

COMMON_SIZES = [
    "300x250", "728x90", "320x50", "160x600", "300x600", "970x250", "468x60",
    "336x280", "320x100", "970x90", "250x250", "200x200", "120x600", "300x50",
    "640x480", "480x320", "300x100",
]


def counts_only_profile(name: str, features, counts) -> GranularityProfile:
    return GranularityProfile(
        name=name,
        features=tuple(
            FeatureGranularity(feature=f, class_count=c) for f, c in zip(features, counts)
        ),
    )


def table(feature: str, mapping: dict[str, int], count: int, default: int | None = None):
    return FeatureGranularity(
        feature=feature, class_count=count, kind="table", table=mapping, default_class=default
    )


def reporting_full() -> GranularityProfile:
    zones = bundled.country_zones()
    countries = sorted(zones)
    registry = bundled.default_registry()
    dsp_names = [e.dsp_name for e in registry.entries]
    keywords = sorted({kw.name for e in registry.entries for kw in e.price_keywords})

    features = [
        table("gender", {g.value: i for i, g in enumerate(Gender)}, len(Gender)),
        table("age", {b.value: i for i, b in enumerate(AgeBucket)}, len(AgeBucket)),
        table("location", {c: i for i, c in enumerate(countries)}, len(countries),
              default=countries.index("ZZ")),
        table("time_of_day", {str(i): i for i in range(8)}, 8),
        table("day_of_week", {d.value: i for i, d in enumerate(DayOfWeek)}, len(DayOfWeek)),
        table("cookie_syncing", {"false": 0, "true": 1}, 2),
        table("do_not_track", {"false": 0, "true": 1}, 2),
        table(
            "ad_format",
            {**{s: i for i, s in enumerate(COMMON_SIZES)}, "unknown": len(COMMON_SIZES)},
            len(COMMON_SIZES) + 1,
            default=len(COMMON_SIZES),
        ),
        table(
            "winner_dsp",
            {n: i for i, n in enumerate(dsp_names)},
            len(dsp_names) + 1,
            default=len(dsp_names),
        ),
        table(
            "category",
            {**{c: i for i, c in enumerate(IAB_TIER1)}, "not specified IAB": len(IAB_TIER1)},
            len(IAB_TIER1) + 1,
            default=len(IAB_TIER1),
        ),
        table(
            "price_keyword",
            {k: i for i, k in enumerate(keywords)},
            len(keywords) + 1,
            default=len(keywords),
        ),
        FeatureGranularity(
            feature="price_value",
            class_count=50,
            kind="bins",
            edges=tuple(Decimal(i) * Decimal("0.0002") for i in range(1, 50)),
        ),
    ]
    return GranularityProfile(name="reporting-full", features=tuple(features))


def reporting_aggregated() -> GranularityProfile:
    zones = bundled.country_zones()
    zone_names = sorted(set(zones.values()))
    zone_index = {z: i for i, z in enumerate(zone_names)}
    registry = bundled.default_registry()
    dsp_names = [e.dsp_name for e in registry.entries]

    age_classes = {
        AgeBucket.UNDER_15.value: 0,
        AgeBucket.FROM_15.value: 0,
        AgeBucket.FROM_25.value: 1,
        AgeBucket.FROM_35.value: 2,
        AgeBucket.FROM_45.value: 3,
        AgeBucket.FROM_55.value: 4,
        AgeBucket.FROM_65.value: 4,
        AgeBucket.FROM_75.value: 4,
        AgeBucket.UNDISCLOSED.value: 5,
    }
    day_night = {str(h): (0 if 2 <= h <= 5 else 1) for h in range(8)}  # 3h bins; 06:00-18:00 is day
    weekend = {
        d.value: (1 if d in (DayOfWeek.SATURDAY, DayOfWeek.SUNDAY) else 0) for d in DayOfWeek
    }
    # top-14 DSPs keep their class, everything else collapses into 'other'
    dsp_classes = {n: min(i, 14) for i, n in enumerate(dsp_names)}
    iab_classes = {c: min(i, 25) for i, c in enumerate(IAB_TIER1)}
    iab_classes["not specified IAB"] = 25

    features = [
        table("gender", {g.value: i for i, g in enumerate(Gender)}, len(Gender)),
        table("age", age_classes, 6),
        table("location", {c: zone_index[z] for c, z in zones.items()}, len(zone_names),
              default=zone_index["Unknown"]),
        table("time_of_day", day_night, 2),
        table("day_of_week", weekend, 2),
        table("cookie_syncing", {"false": 0, "true": 1}, 2),
        table("do_not_track", {"false": 0, "true": 1}, 2),
        FeatureGranularity(
            feature="ad_format",
            class_count=3,
            kind="size-area",
            edges=(Decimal(40000), Decimal(100000)),
            default_class=1,
        ),
        table("winner_dsp", dsp_classes, 15, default=14),
        table("category", iab_classes, 26, default=25),
        table("price_keyword", {"charge_price": 0}, 1, default=0),
        FeatureGranularity(
            feature="price_value",
            class_count=3,
            kind="bins",
            edges=(Decimal("0.0005"), Decimal("0.002")),
        ),
    ]
    return GranularityProfile(name="reporting-aggregated", features=tuple(features))


def default_model() -> str:
    """Train the shipped starter model on a deterministic synthetic sample."""
    from rtbmeter.features import (
        AdEvent,
        EventPriceKind,
    )
    from rtbmeter.pricing import serialize_model, train_model

    profile = reporting_aggregated()
    rng = random.Random(20190601)
    zones = bundled.country_zones()
    countries = sorted(zones)
    registry = bundled.default_registry()
    dsp_names = [e.dsp_name for e in registry.entries]

    events = []
    for _ in range(600):
        day = rng.choice(list(DayOfWeek))
        tod = rng.randrange(8)
        # weekend/evening ads price higher, echoing the shipped analytics
        base = 40 + 60 * (day in (DayOfWeek.SATURDAY, DayOfWeek.SUNDAY)) + 10 * (tod >= 5)
        price = Decimal(base + rng.randrange(40)) * Decimal("0.00001")
        events.append(
            AdEvent(
                gender=rng.choice(list(Gender)),
                age_bucket=rng.choice(list(AgeBucket)),
                location=rng.choice(countries),
                time_of_day=tod,
                day_of_week=day,
                cookie_sync=rng.random() < 0.4,
                dnt=rng.random() < 0.2,
                ad_format=rng.choice(COMMON_SIZES + ["unknown"]),
                winner_dsp=rng.choice(dsp_names),
                iab_category=rng.choice(IAB_TIER1 + ["not specified IAB"]),
                price_keyword="charge_price",
                price_value=price,
                price_kind=EventPriceKind.CLEARTEXT,
            )
        )
    model, _ = train_model(
        events, profile, forest_size=5, seed=20190601, max_depth=6, version=1
    )
    return serialize_model(model)


def main() -> None:
    PROFILES.mkdir(parents=True, exist_ok=True)
    for i, counts in enumerate(UNIFORM_LADDER, start=1):
        profile = counts_only_profile(f"uniform-c{i}", UNIFORM_FEATURES, counts)
        (PROFILES / f"uniform-c{i}.profile").write_text(dump_profile(profile), encoding="utf-8")
    for i, counts in enumerate(AGGREGATED_LADDER, start=1):
        profile = counts_only_profile(f"aggregated-c{i}", AGGREGATED_FEATURES, counts)
        (PROFILES / f"aggregated-c{i}.profile").write_text(dump_profile(profile), encoding="utf-8")
    (PROFILES / "reporting-full.profile").write_text(
        dump_profile(reporting_full()), encoding="utf-8"
    )
    (PROFILES / "reporting-aggregated.profile").write_text(
        dump_profile(reporting_aggregated()), encoding="utf-8"
    )
    (DATA / "default_model.xml").write_text(default_model(), encoding="utf-8")
    print(f"wrote {len(UNIFORM_LADDER) + len(AGGREGATED_LADDER) + 2} profiles and the default model")


if __name__ == "__main__":
    main()
