from __future__ import annotations

import random
from decimal import Decimal

import pytest

from rtbmeter.features import (
    AgeBucket,
    CookieJarSnapshot,
    DayOfWeek,
    EventAssemblyError,
    Gender,
    IabMapping,
    InferredPrice,
    NOT_SPECIFIED_IAB,
    SessionLocationCache,
    SizeKeywords,
    UserMeta,
    age_bucket,
    assemble_event,
    detect_cookie_sync,
    event_from_dict,
    event_to_dict,
    extract_ad_format,
    iab_category,
    registrable_domain,
    resolve_location,
    temporal_bins,
)
from rtbmeter.nurl import DspRegistryEntry, PriceKeyword, Registry, detect_nurl, extract_price

from conftest import GOLDEN_NURL, GOLDEN_TS, make_event

TRACKERS = frozenset({"sync.example", "tracker.example"})


def snapshot(*entries):
    return CookieJarSnapshot.build(entries)


class TestCookieSync:
    def test_short_values_never_sync(self):
        jar = snapshot(("uid", "abcdef", "tracker.example", False))
        assert jar.values == ()
        url = "https://sync.example/p?uid=abcdef"
        assert not detect_cookie_sync(url, "news.example", jar, TRACKERS)

    def test_session_cookies_excluded(self):
        jar = snapshot(("uid", "u1234567890xyz", "tracker.example", True))
        assert jar.values == ()

    def test_identifier_to_tracker_third_party(self):
        jar = snapshot(("uid", "u1234567890xyz", "tracker.example", False))
        url = "https://sync.example/pixel?uid=u1234567890xyz"
        assert detect_cookie_sync(url, "news.example", jar, TRACKERS)

    def test_same_first_party_excluded(self):
        jar = snapshot(("uid", "u1234567890xyz", "tracker.example", False))
        url = "https://sub.news.example/pixel?uid=u1234567890xyz"
        assert not detect_cookie_sync(
            url, "news.example", jar, TRACKERS | {"news.example"}
        )

    def test_non_tracker_destination_excluded(self):
        jar = snapshot(("uid", "u1234567890xyz", "tracker.example", False))
        url = "https://cdn.example/pixel?uid=u1234567890xyz"
        assert not detect_cookie_sync(url, "news.example", jar, TRACKERS)

    def test_value_in_path_detected(self):
        jar = snapshot(("uid", "u1234567890xyz", "tracker.example", False))
        url = "https://sync.example/match/u1234567890xyz/go"
        assert detect_cookie_sync(url, "news.example", jar, TRACKERS)

    def test_oracle_substring_scan(self):
        rng = random.Random(3)
        values = [f"val{i:02d}" + "x" * 10 for i in range(20)]
        for _ in range(300):
            jar_values = rng.sample(values, rng.randrange(0, 6))
            jar = snapshot(*[("c", v, "tracker.example", False) for v in jar_values])
            embedded = rng.choice(values)
            url = f"https://sync.example/p?uid={embedded}&o=1"
            got = detect_cookie_sync(url, "news.example", jar, TRACKERS)
            assert got == (embedded in jar_values)

    def test_monotone_in_jar(self):
        rng = random.Random(4)
        values = [f"id{i}" + "y" * 12 for i in range(8)]
        url = f"https://sync.example/p?uid={values[3]}"
        for _ in range(100):
            chosen = rng.sample(values, rng.randrange(0, len(values)))
            jar_full = snapshot(*[("c", v, "d.example", False) for v in chosen])
            got_full = detect_cookie_sync(url, "news.example", jar_full, TRACKERS)
            smaller = [v for v in chosen if rng.random() < 0.5]
            jar_small = snapshot(*[("c", v, "d.example", False) for v in smaller])
            got_small = detect_cookie_sync(url, "news.example", jar_small, TRACKERS)
            assert not (got_small and not got_full)


class TestIab:
    def test_lookup_and_sentinel(self, tmp_path):
        path = tmp_path / "iab.tsv"
        path.write_text("news.example\tNews\nshop.example\tShopping\n")
        mapping = IabMapping.load(path)
        assert iab_category("news.example", mapping) == "News"
        assert iab_category("unknown.example", mapping) == NOT_SPECIFIED_IAB

    def test_www_normalization_idempotent(self, tmp_path):
        path = tmp_path / "iab.tsv"
        path.write_text("www.news.example\tNews\n")
        mapping = IabMapping.load(path)
        assert iab_category("news.example", mapping) == "News"
        assert iab_category("WWW.news.example", mapping) == "News"

    def test_capacity_bound(self):
        with pytest.raises(ValueError):
            IabMapping(entries={f"d{i}.example": "News" for i in range(11)}, max_entries=10)

    def test_bundled_mapping_loads(self):
        from rtbmeter.data import default_iab_mapping

        mapping = default_iab_mapping()
        assert iab_category("cnn.com", mapping) == "News"


class TestAdFormat:
    @pytest.fixture
    def sizes(self):
        from rtbmeter.data import default_size_keywords

        return default_size_keywords()

    def candidate(self, query):
        entry = DspRegistryEntry("d", ("d.example",), (PriceKeyword("p"),))
        return detect_nurl(f"https://x.d.example/imp?{query}", Registry((entry,)), 0.0)

    def test_joint_token(self, sizes):
        assert extract_ad_format(self.candidate("format=300x250"), sizes) == (300, 250)

    def test_pairwise_keywords(self, sizes):
        assert extract_ad_format(self.candidate("w=728&h=90"), sizes) == (728, 90)

    def test_absent(self, sizes):
        assert extract_ad_format(self.candidate("a=1&b=2"), sizes) is None


class TestTemporalBins:
    def test_saturday_afternoon_slot(self):
        # 2015-01-03 16:12 UTC was a Saturday; 16:12 falls in the 15:00-18:00 bin
        ts = 1420301520.0
        assert temporal_bins(ts, 0) == (5, DayOfWeek.SATURDAY)

    def test_midnight_monday_first_bin(self):
        ts = 1420416000.0  # 2015-01-05 00:00 UTC, a Monday
        assert temporal_bins(ts, 0) == (0, DayOfWeek.MONDAY)

    def test_offsets_shift_bins_consistently(self):
        rng = random.Random(9)
        from datetime import datetime, timedelta, timezone

        for _ in range(300):
            ts = rng.randrange(1_400_000_000, 1_700_000_000)
            offset = rng.choice([-720, -300, -60, 0, 60, 180, 330, 720])
            bin_idx, dow = temporal_bins(float(ts), offset)
            local = datetime.fromtimestamp(ts, timezone.utc) + timedelta(minutes=offset)
            assert bin_idx == local.hour // 3
            assert list(DayOfWeek).index(dow) == local.weekday()

    def test_bad_bin_width(self):
        with pytest.raises(ValueError):
            temporal_bins(0.0, 0, bin_hours=5)


class TestLocation:
    def test_warm_cache_no_calls(self):
        calls = []
        cache = SessionLocationCache(value="ES")
        assert resolve_location(lambda: calls.append(1) or "GR", cache) == "ES"
        assert calls == []

    def test_cold_cache_resolves_once(self):
        calls = []

        def resolver():
            calls.append(1)
            return "es"

        cache = SessionLocationCache()
        assert resolve_location(resolver, cache) == "ES"
        assert resolve_location(resolver, cache) == "ES"
        assert len(calls) == 1

    def test_failure_yields_unknown_without_crash(self):
        def resolver():
            raise OSError("offline")

        cache = SessionLocationCache()
        assert resolve_location(resolver, cache) == "ZZ"
        # still at most one invocation per session
        assert resolve_location(resolver, cache) == "ZZ"


class TestAgeBuckets:
    def test_examples(self):
        assert age_bucket(27) is AgeBucket.FROM_25
        assert age_bucket(35) is AgeBucket.FROM_35
        assert age_bucket(None) is AgeBucket.UNDISCLOSED
        assert age_bucket(3) is AgeBucket.UNDER_15
        assert age_bucket(90) is AgeBucket.FROM_75

    def test_no_bucket_finer_than_ten_years(self):
        for age in range(0, 120):
            bucket = age_bucket(age)
            ages_in_bucket = [a for a in range(0, 131) if age_bucket(a) is bucket]
            assert max(ages_in_bucket) - min(ages_in_bucket) + 1 >= 10


class TestAssembly:
    def context(self, **overrides):
        ctx = {
            "location": "ES",
            "time_of_day": 5,
            "day_of_week": DayOfWeek.SATURDAY,
            "cookie_sync": False,
            "dnt": False,
            "ad_format": "300x250",
            "winner_dsp": "mopub",
            "iab_category": "News",
        }
        ctx.update(overrides)
        return ctx

    def golden_observation(self, registry):
        return extract_price(detect_nurl(GOLDEN_NURL, registry, GOLDEN_TS))

    def test_golden_event(self, registry):
        event = assemble_event(self.golden_observation(registry), self.context(), UserMeta())
        assert event.price_value == Decimal("0.00095")
        assert event.winner_dsp == "mopub"
        assert event.gender is Gender.UNDISCLOSED

    def test_undisclosed_demographics_valid(self, registry):
        event = assemble_event(self.golden_observation(registry), self.context(), None)
        assert event.age_bucket is AgeBucket.UNDISCLOSED

    def test_first_party_field_rejected(self, registry):
        ctx = self.context(first_party="news.example")
        with pytest.raises(EventAssemblyError):
            assemble_event(self.golden_observation(registry), ctx, UserMeta())

    def test_unresolved_encrypted_price_rejected(self, registry):
        url = "https://x.mopub.com/imp?charge_price=WAmdHg3xQjZk"
        obs = extract_price(detect_nurl(url, registry, 0.0))
        with pytest.raises(EventAssemblyError):
            assemble_event(obs, self.context(), UserMeta())

    def test_inferred_price_accepted(self):
        event = assemble_event(
            InferredPrice("charge_price", Decimal("0.0003")), self.context(), UserMeta()
        )
        assert event.price_kind.value == "inferred"

    def test_canary_strings_never_reach_events(self, registry):
        canaries = [GOLDEN_NURL, "news.example", "u1234567890canary"]
        event = assemble_event(self.golden_observation(registry), self.context(), UserMeta())
        for text in event_to_dict(event).values():
            for canary in canaries:
                assert canary != str(text)
                assert canary not in str(text)

    def test_url_shaped_context_rejected(self, registry):
        ctx = self.context(winner_dsp="https://evil.example/?a=1")
        with pytest.raises(EventAssemblyError):
            assemble_event(self.golden_observation(registry), ctx, UserMeta())

    def test_event_dict_roundtrip(self):
        event = make_event()
        assert event_from_dict(event_to_dict(event)) == event


class TestRegistrableDomain:
    def test_basic(self):
        assert registrable_domain("a.b.example.com") == "example.com"
        assert registrable_domain("news.example") == "news.example"
        assert registrable_domain("www.bbc.co.uk") == "bbc.co.uk"
