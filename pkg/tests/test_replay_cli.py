from __future__ import annotations

import json
from decimal import Decimal

import pytest

from rtbmeter import cli
from rtbmeter.data import (
    bundled_profile,
    default_iab_mapping,
    default_registry,
    default_size_keywords,
    default_trackers,
)
from rtbmeter.features import EventPriceKind
from rtbmeter.pipeline import AdPipeline
from rtbmeter.pricing import RollingAverage
from rtbmeter.replay import har_to_replay, replay_file

from conftest import GOLDEN_NURL, GOLDEN_TS


def write_log(path, lines):
    path.write_text("\n".join(json.dumps(line) for line in lines) + "\n", encoding="utf-8")


def golden_request(**overrides):
    record = {
        "kind": "request",
        "ts": GOLDEN_TS,
        "utc_offset_minutes": 60,
        "first_party": "news.example",
        "url": GOLDEN_NURL,
        "dnt": False,
    }
    record.update(overrides)
    return record


def make_pipeline(model=None, profile=None):
    return AdPipeline(
        registry=default_registry(),
        iab=default_iab_mapping(),
        trackers=default_trackers(),
        sizes=default_size_keywords(),
        profile=profile or bundled_profile("reporting-aggregated"),
        model=model,
        rolling=RollingAverage(seed_value=Decimal("0.0005")),
    )


class TestReplay:
    def test_golden_fixture_single_event(self, tmp_path):
        log = tmp_path / "session.jsonl"
        write_log(log, [golden_request()])
        result = replay_file(log, make_pipeline())
        assert len(result.events) == 1
        assert result.total_usd == Decimal("0.00095")
        event = result.events[0]
        assert event.winner_dsp == "mopub"
        assert event.price_kind is EventPriceKind.CLEARTEXT

    def test_empty_log(self, tmp_path):
        log = tmp_path / "empty.jsonl"
        log.write_text("")
        result = replay_file(log, make_pipeline())
        assert result.events == [] and result.total_usd == 0

    def test_encrypted_price_with_single_leaf_model(self, tmp_path):
        from rtbmeter.pricing import (
            DecisionTreeModel,
            ForestModel,
            LeafNode,
            schema_from_profile,
        )

        profile = bundled_profile("reporting-aggregated")
        schema = schema_from_profile(profile)
        model = ForestModel(
            trees=(DecisionTreeModel(nodes=(LeafNode(0, 2, Decimal("0.00125")),)),),
            schema=schema,
        )
        log = tmp_path / "enc.jsonl"
        write_log(
            log,
            [golden_request(url="https://x.mopub.com/imp?charge_price=WAmdHg3xQjZk")],
        )
        result = replay_file(log, make_pipeline(model=model, profile=profile))
        assert result.total_usd == Decimal("0.00125")
        assert result.events[0].price_kind is EventPriceKind.INFERRED

    def test_fallback_uses_rolling_average(self, tmp_path):
        log = tmp_path / "mix.jsonl"
        write_log(
            log,
            [
                golden_request(url="https://x.mopub.com/imp?charge_price=0.2"),
                golden_request(url="https://x.mopub.com/imp?charge_price=0.4"),
                golden_request(url="https://x.mopub.com/imp?charge_price=Zk81Abc0fff"),
            ],
        )
        result = replay_file(log, make_pipeline())  # no model -> rolling average
        assert result.events[2].price_value == Decimal("0.0003")

    def test_foreign_currency_excluded(self, tmp_path):
        log = tmp_path / "eur.jsonl"
        write_log(
            log, [golden_request(url="https://x.mopub.com/imp?charge_price=0.5&currency=EUR")]
        )
        pipeline = make_pipeline()
        result = replay_file(log, pipeline)
        assert result.events == []
        assert pipeline.counters.foreign_currency == 1

    def test_malformed_records_skipped_with_diagnostics(self, tmp_path):
        log = tmp_path / "broken.jsonl"
        lines = [json.dumps(golden_request()), json.dumps({"kind": "request"}), ""]
        log.write_text("\n".join(lines), encoding="utf-8")
        result = replay_file(log, make_pipeline())
        assert len(result.events) == 1
        assert result.skipped_lines == 1

    def test_unreadable_log_reports_line_number(self, tmp_path):
        from rtbmeter.replay import ReplayFormatError

        log = tmp_path / "notjson.jsonl"
        log.write_text('{"kind": "request"\nnot json\n')
        with pytest.raises(ReplayFormatError, match="notjson.jsonl:1"):
            replay_file(log, make_pipeline())

    def test_cookie_sync_flag_flows_into_events(self, tmp_path):
        log = tmp_path / "cs.jsonl"
        write_log(
            log,
            [
                {"kind": "jar", "id": "j1", "entries": [["uid", "uSync1234567890", "t.example", False]]},
                golden_request(
                    url="https://pixel.doubleclick.net/match?uid=uSync1234567890", jar="j1"
                ),
                golden_request(jar="j1"),
            ],
        )
        result = replay_file(log, make_pipeline())
        assert len(result.events) == 1
        assert result.events[0].cookie_sync is True

    def test_replay_is_deterministic(self, tmp_path):
        log = tmp_path / "det.jsonl"
        write_log(log, [golden_request() for _ in range(5)])
        a = replay_file(log, make_pipeline())
        b = replay_file(log, make_pipeline())
        assert a.events == b.events and a.total_usd == b.total_usd


class TestHarImport:
    def har(self):
        return {
            "log": {
                "version": "1.2",
                "pages": [{"id": "page_1", "title": "https://news.example/"}],
                "entries": [
                    {
                        "pageref": "page_1",
                        "startedDateTime": "2015-01-01T01:40:33.000+01:00",
                        "request": {
                            "url": "https://news.example/",
                            "headers": [],
                            "cookies": [],
                        },
                    },
                    {
                        "pageref": "page_1",
                        "startedDateTime": "2015-01-01T01:40:34.000+01:00",
                        "request": {
                            "url": GOLDEN_NURL,
                            "headers": [{"name": "DNT", "value": "1"}],
                            "cookies": [
                                {"name": "uid", "value": "u12345678901", "expires": "2020-01-01"}
                            ],
                        },
                    },
                ],
            }
        }

    def test_har_conversion_and_replay(self, tmp_path):
        records = har_to_replay(self.har())
        kinds = [r.get("kind") for r in records]
        assert kinds.count("jar") == 1
        assert kinds.count("request") == 2
        request = [r for r in records if r["kind"] == "request"][1]
        assert request["first_party"] == "news.example"
        assert request["utc_offset_minutes"] == 60
        assert request["dnt"] is True

        log = tmp_path / "imported.jsonl"
        write_log(log, records)
        result = replay_file(log, make_pipeline())
        assert result.total_usd == Decimal("0.00095")


class TestCli:
    def run(self, argv, capsys):
        code = cli.main(argv)
        out, err = capsys.readouterr()
        return code, out, err

    def test_replay_jsonl_output(self, tmp_path, capsys):
        log = tmp_path / "s.jsonl"
        write_log(log, [golden_request()])
        code, out, err = self.run(
            ["replay", str(log), "--output", "jsonl", "--location", "ES"], capsys
        )
        assert code == 0
        rows = [json.loads(line) for line in out.splitlines()]
        assert rows[-1]["session_total_usd"] == "0.00095"

    def test_replay_events_out_feeds_analyze_prices(self, tmp_path, capsys):
        log = tmp_path / "s.jsonl"
        write_log(log, [golden_request(), golden_request()])
        events_path = tmp_path / "events.jsonl"
        code, _, _ = self.run(
            ["replay", str(log), "--events-out", str(events_path), "--output", "jsonl"], capsys
        )
        assert code == 0
        code, out, _ = self.run(
            ["analyze-prices", str(events_path), "--group", "day-of-week", "--output", "jsonl"],
            capsys,
        )
        assert code == 0
        rows = [json.loads(line) for line in out.splitlines()]
        assert rows[0]["median"] == "0.00095"
        assert rows[0]["count"] == 2

    def test_unknown_grouping_is_input_error(self, tmp_path, capsys):
        log = tmp_path / "e.jsonl"
        log.write_text(json.dumps({"gender": "undisclosed"}) + "\n")
        code, _, _ = self.run(["analyze-prices", str(log), "--group", "day-of-week"], capsys)
        assert code == 1

    def test_missing_file_is_input_error(self, capsys):
        code, _, _ = self.run(["replay", "/nonexistent/file.jsonl"], capsys)
        assert code == 1

    def test_analyze_anonymity_uniform_only(self, capsys):
        code, out, _ = self.run(
            ["analyze-anonymity", "--profile", "uniform-c1", "--output", "jsonl"], capsys
        )
        assert code == 0
        row = json.loads(out.splitlines()[0])
        assert row["uniform_bits"] == pytest.approx(60.2, abs=0.05)

    def test_analyze_anonymity_with_events(self, tmp_path, capsys):
        from rtbmeter.features import event_to_dict
        import random as rnd

        from conftest import random_event

        rng = rnd.Random(3)
        path = tmp_path / "events.jsonl"
        with path.open("w") as fh:
            for i in range(200):
                data = event_to_dict(random_event(rng))
                data["user_id"] = f"u{i % 20}"
                fh.write(json.dumps(data) + "\n")
        code, out, _ = self.run(
            [
                "analyze-anonymity",
                "--profile", "reporting-aggregated",
                "--events", str(path),
                "--subset", "location,day_of_week,time_of_day",
                "--output", "jsonl",
            ],
            capsys,
        )
        assert code == 0
        row = json.loads(out.splitlines()[0])
        assert row["min_k"] >= 1
        assert row["min_k_restricted"] >= row["min_k"]

    def test_train_and_export_model(self, tmp_path, capsys):
        import random as rnd

        from rtbmeter.features import event_to_dict

        from conftest import random_event

        rng = rnd.Random(8)
        events_path = tmp_path / "events.jsonl"
        with events_path.open("w") as fh:
            for _ in range(100):
                fh.write(json.dumps(event_to_dict(random_event(rng))) + "\n")
        model_path = tmp_path / "model.xml"
        code, out, _ = self.run(
            [
                "train", str(events_path),
                "--profile", "reporting-aggregated",
                "--forest-size", "3",
                "--seed", "5",
                "--model-out", str(model_path),
                "--output", "jsonl",
            ],
            capsys,
        )
        assert code == 0
        from rtbmeter.pricing import deserialize_model

        model = deserialize_model(model_path.read_text())
        assert len(model.trees) == 3

    def test_import_har_roundtrip(self, tmp_path, capsys):
        har_path = tmp_path / "capture.har"
        har_path.write_text(json.dumps(TestHarImport().har()))
        code, out, _ = self.run(["import-har", str(har_path)], capsys)
        assert code == 0
        assert sum(1 for line in out.splitlines() if json.loads(line)["kind"] == "request") == 2

    def test_bind_failure_is_an_input_error(self, tmp_path, capsys):
        import socket

        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        port = blocker.getsockname()[1]
        try:
            code, _, _ = self.run(
                ["serve", "--listen", f"127.0.0.1:{port}", "--store", str(tmp_path / "s")],
                capsys,
            )
            assert code == 1
        finally:
            blocker.close()

    def test_internal_error_exits_2(self, capsys, monkeypatch):
        def boom():
            raise RuntimeError("wires crossed")

        monkeypatch.setattr("rtbmeter.cli.bundled.default_model_document", boom)
        code = cli.main(["export-model"])
        capsys.readouterr()
        assert code == 2

    def test_stdout_stays_machine_readable(self, tmp_path, capsys, caplog):
        log = tmp_path / "s.jsonl"
        lines = [json.dumps(golden_request()), json.dumps({"kind": "request"})]
        log.write_text("\n".join(lines))
        with caplog.at_level("WARNING"):
            code, out, err = self.run(["replay", str(log), "--output", "jsonl"], capsys)
        assert code == 0
        for line in out.splitlines():
            json.loads(line)  # stdout stays machine-readable
        # diagnostics go through the logging channel (stderr in production)
        assert any("skipped" in r.message for r in caplog.records)
