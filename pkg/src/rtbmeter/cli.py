"""Operator command line.

Machine-readable results go to stdout in the chosen format (table, csv or
jsonl); diagnostics go to stderr.  Exit codes: 0 success, 1 input error,
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import random
import signal
import sys
import time
from decimal import Decimal
from pathlib import Path

from . import data as bundled
from .analysis import GROUPINGS, UnknownGroupingError, analyze_prices, table_to_dicts
from .anonymity import (
    GranularityProfile,
    ProfileError,
    aggregate_event,
    fit_distributions,
    k_anonymity_tuples,
    load_profile,
    surprisal_empirical,
    surprisal_uniform,
)
from .engine import LocalEngine, make_engine_service, seeded_queue
from .features import IabMapping, SizeKeywords, event_from_dict, event_to_dict, load_tracker_domains
from .nurl import RegistryError, UrlParseError, load_registry
from .pipeline import AdPipeline
from .pricing import (
    ModelFormatError,
    RollingAverage,
    SchemaMismatchError,
    deserialize_model,
    model_seed_value,
    schema_from_profile,
    serialize_model,
    train_model,
)
from .replay import ReplayFormatError, har_to_replay, replay_file
from .server import make_collection_service
from .transport import BatchRejectedError, ServerStore, model_version_of

logger = logging.getLogger("rtbmeter")

# OSError covers unreadable files and failed socket binds at startup: both
# are problems with the operator's input or environment, not bugs.
INPUT_ERRORS = (
    OSError,
    RegistryError,
    ProfileError,
    ModelFormatError,
    ReplayFormatError,
    UnknownGroupingError,
    BatchRejectedError,
    UrlParseError,
    json.JSONDecodeError,
    UnicodeDecodeError,
)


# --- output -------------------------------------------------------------------

def emit(rows: list[dict], fmt: str, stream=None) -> None:
    stream = stream or sys.stdout
    if fmt == "jsonl":
        for row in rows:
            stream.write(json.dumps(row) + "\n")
        return
    flat = [{k: v for k, v in row.items() if not isinstance(v, (list, dict))} for row in rows]
    if fmt == "csv":
        if not flat:
            return
        keys: list[str] = []
        for row in flat:
            for key in row:
                if key not in keys:
                    keys.append(key)
        writer = csv.DictWriter(stream, fieldnames=keys)
        writer.writeheader()
        writer.writerows(flat)
        return
    # table
    if not flat:
        stream.write("(no rows)\n")
        return
    keys = []
    for row in flat:
        for key in row:
            if key not in keys:
                keys.append(key)
    widths = {k: max(len(str(k)), *(len(str(r.get(k, ""))) for r in flat)) for k in keys}
    stream.write("  ".join(str(k).ljust(widths[k]) for k in keys).rstrip() + "\n")
    for row in flat:
        stream.write("  ".join(str(row.get(k, "")).ljust(widths[k]) for k in keys).rstrip() + "\n")


# --- shared loading ---------------------------------------------------------------

def _load_profile_arg(value: str) -> GranularityProfile:
    path = Path(value)
    if path.suffix == ".profile" or path.exists():
        return load_profile(path)
    return bundled.bundled_profile(value)


def _load_model_arg(value: str | None, profile: GranularityProfile):
    """Model document for the pipeline; checked against the profile's schema."""
    if value == "none":
        return None, False
    document = (
        bundled.default_model_document()
        if value in (None, "bundled")
        else Path(value).read_text(encoding="utf-8")
    )
    try:
        model = deserialize_model(document, expected_schema=schema_from_profile(profile))
        return model, True
    except SchemaMismatchError:
        logger.warning(
            "model schema does not match profile %r; running with the rolling-average fallback only",
            profile.name,
        )
        return None, False


def _build_pipeline(args, profile: GranularityProfile) -> tuple[AdPipeline, bool]:
    registry = load_registry(args.registry) if args.registry else bundled.default_registry()
    iab = IabMapping.load(args.iab) if args.iab else bundled.default_iab_mapping()
    trackers = (
        load_tracker_domains(args.trackers) if args.trackers else bundled.default_trackers()
    )
    sizes = SizeKeywords.load(args.sizes) if args.sizes else bundled.default_size_keywords()
    model, model_active = _load_model_arg(args.model, profile)
    seed_mean = model_seed_value(model) if model else Decimal("0.0005")
    resolver = (lambda: args.location) if args.location else (lambda: "ZZ")
    pipeline = AdPipeline(
        registry=registry,
        iab=iab,
        trackers=trackers,
        sizes=sizes,
        profile=profile,
        model=model,
        rolling=RollingAverage(seed_value=seed_mean),
        location_resolver=resolver,
        bin_hours=args.bin_hours,
    )
    return pipeline, model_active


# --- subcommands ---------------------------------------------------------------------

def cmd_replay(args) -> int:
    profile = _load_profile_arg(args.profile)
    rows = []
    all_events = []
    overall = Decimal(0)
    for log_path in args.logs:
        pipeline, _ = _build_pipeline(args, profile)  # one pipeline per session file
        result = replay_file(log_path, pipeline)
        all_events.extend(result.events)
        overall += result.total_usd
        if result.skipped_lines:
            logger.warning("%s: skipped %d malformed records", log_path, result.skipped_lines)
        rows.append(
            {
                "session": str(log_path),
                "events": len(result.events),
                "session_total_usd": str(result.total_usd),
                "inferred": pipeline.counters.inferred,
                "fallbacks": pipeline.counters.fallbacks,
            }
        )
    rows.append({"session": "ALL", "events": len(all_events), "session_total_usd": str(overall)})
    if args.events_out:
        with open(args.events_out, "w", encoding="utf-8") as fh:
            for event in all_events:
                fh.write(json.dumps(event_to_dict(event)) + "\n")
    emit(rows, args.output)
    return 0


def _read_events(path: str):
    events = []
    user_ids = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        data = json.loads(line)
        user_ids.append(str(data.pop("user_id", "")))
        try:
            events.append(event_from_dict(data))
        except (KeyError, ValueError) as exc:
            raise ReplayFormatError(f"{path}:{lineno}: bad event record ({exc})") from None
    return events, user_ids


def cmd_analyze_prices(args) -> int:
    events, _ = _read_events(args.events)
    table = analyze_prices(events, args.group)
    emit(table_to_dicts(table, with_cdf=args.output == "jsonl"), args.output)
    return 0


def _cdf_points(sorted_values: list[float]) -> list[list[float]]:
    n = len(sorted_values)
    points = []
    for i, v in enumerate(sorted_values):
        if i == n - 1 or sorted_values[i + 1] != v:
            points.append([round(v, 4), (i + 1) / n])
    return points


def cmd_analyze_anonymity(args) -> int:
    profiles = [_load_profile_arg(p) for p in args.profile]
    events = user_ids = None
    if args.events:
        events, user_ids = _read_events(args.events)
        if any(not u for u in user_ids):
            raise ReplayFormatError(f"{args.events}: every record needs a user_id")
    subset = args.subset.split(",") if args.subset else None

    rows = []
    for profile in profiles:
        uniform = surprisal_uniform(profile)
        row: dict[str, object] = {
            "profile": profile.name,
            "features": len(profile.features),
            "uniform_bits": round(uniform.bits, 4),
        }
        if args.output == "jsonl":
            row["per_feature_bits"] = {f: round(b, 4) for f, b in uniform.contributions}
        if events is not None:
            tuples = [aggregate_event(e, profile) for e in events]
            dists = fit_distributions(tuples, profile)
            bits = sorted(surprisal_empirical(t, dists).bits for t in tuples)
            report = k_anonymity_tuples(list(zip(user_ids, tuples)), profile.feature_names)
            row["empirical_median_bits"] = round(bits[(len(bits) - 1) // 2], 4)
            row["empirical_p95_bits"] = round(bits[min(len(bits) - 1, int(0.95 * len(bits)))], 4)
            row["min_k"] = report.min_k
            row["median_k"] = report.median_k
            if args.output == "jsonl":
                row["surprisal_cdf"] = _cdf_points(bits)
                row["k_cdf"] = [[k, f] for k, f in report.cdf]
            if subset:
                restricted = k_anonymity_tuples(
                    list(zip(user_ids, tuples)), profile.feature_names, subset
                )
                row["min_k_restricted"] = restricted.min_k
                row["median_k_restricted"] = restricted.median_k
                if args.output == "jsonl":
                    row["k_cdf_restricted"] = [[k, f] for k, f in restricted.cdf]
        rows.append(row)
    emit(rows, args.output)
    return 0


def cmd_train(args) -> int:
    events, _ = _read_events(args.events)
    profile = _load_profile_arg(args.profile)
    version = args.version
    if args.store:
        store = ServerStore(args.store, bundled.bundled_profiles())
        current = model_version_of(store.model_document(bundled.default_model_document()))
        version = current + 1
    model, scheme = train_model(
        events,
        profile,
        forest_size=args.forest_size,
        seed=args.seed,
        version=version,
        trained_at=args.trained_at,
    )
    document = serialize_model(model)
    if not args.model_out and not args.store:
        sys.stdout.write(document + "\n")  # the document itself is the output
        return 0
    if args.model_out:
        Path(args.model_out).write_text(document, encoding="utf-8")
    if args.store:
        store.install_model(document)
    emit(
        [
            {
                "version": version,
                "trees": len(model.trees),
                "events": len(events),
                "class_boundaries": [str(b) for b in scheme.boundaries],
                "written": args.model_out or f"{args.store}/model.xml",
            }
        ],
        args.output,
    )
    return 0


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    profiles = bundled.bundled_profiles()
    for extra in args.profile or []:
        profile = _load_profile_arg(extra)
        profiles[profile.name] = profile
    store = ServerStore(args.store, profiles, rng=random.Random(args.seed))
    host, port = _parse_listen(args.listen)
    service = make_collection_service(store, bundled.default_model_document(), host, port)
    service.start()
    bound = service.address
    logger.info("collection server listening on %s:%d, store at %s", bound[0], bound[1], args.store)
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    _wait_forever(service)
    return 0


def cmd_engine(args) -> int:
    profile = _load_profile_arg(args.profile)
    pipeline, model_active = _build_pipeline(args, profile)
    queue = seeded_queue(args.seed, args.delay_min, args.delay_max)
    engine = LocalEngine(
        pipeline=pipeline,
        profile=profile,
        queue=queue,
        report_url=args.server,
        utc_offset_minutes=args.utc_offset,
        model_active=model_active,
        state_path=args.state,
    )
    host, port = _parse_listen(args.listen)
    service = make_engine_service(engine, host, port)
    service.start()
    bound = service.address
    logger.info("local engine listening on %s:%d", bound[0], bound[1])
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    _wait_forever(service)
    return 0


def _wait_forever(service) -> None:
    stop = []

    def handler(_sig, _frame):
        stop.append(True)

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    try:
        while not stop:
            time.sleep(0.2)
    finally:
        service.stop()


def cmd_export_model(args) -> int:
    if args.store:
        store = ServerStore(args.store, bundled.bundled_profiles())
        document = store.model_document(bundled.default_model_document())
    else:
        document = bundled.default_model_document()
    sys.stdout.write(document + "\n")
    return 0


def cmd_import_har(args) -> int:
    har = json.loads(Path(args.har).read_text(encoding="utf-8"))
    records = har_to_replay(har)
    out = io.StringIO()
    for record in records:
        out.write(json.dumps(record) + "\n")
    if args.output_file:
        Path(args.output_file).write_text(out.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(out.getvalue())
    return 0


# --- parser ---------------------------------------------------------------------------

def _add_pipeline_flags(sub) -> None:
    sub.add_argument("--registry", help="DSP registry file (default: bundled)")
    sub.add_argument("--model", help="model XML file, 'bundled' or 'none'", default="bundled")
    sub.add_argument("--profile", default=bundled.DEFAULT_PROFILE,
                     help="granularity profile name or .profile file")
    sub.add_argument("--iab", help="IAB mapping TSV (default: bundled)")
    sub.add_argument("--trackers", help="tracker domain list (default: bundled)")
    sub.add_argument("--sizes", help="ad-size keyword list (default: bundled)")
    sub.add_argument("--location", help="country code for the session (stub geo resolver)")
    sub.add_argument("--bin-hours", type=int, default=3, help="time-of-day bin width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtbmeter",
        description="RTB ad-price metering, analytics and anonymous reporting",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("replay", help="run traffic logs through the ad pipeline")
    p.add_argument("logs", nargs="+", metavar="LOGFILE")
    _add_pipeline_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events-out", help="write assembled events as JSONL")
    p.add_argument("--output", choices=("table", "csv", "jsonl"), default="table")
    p.set_defaults(func=cmd_replay)

    p = subs.add_parser("analyze-prices", help="grouped price statistics over events")
    p.add_argument("events", metavar="EVENTS_JSONL")
    p.add_argument("--group", required=True, choices=sorted(GROUPINGS))
    p.add_argument("--output", choices=("table", "csv", "jsonl"), default="table")
    p.set_defaults(func=cmd_analyze_prices)

    p = subs.add_parser("analyze-anonymity", help="surprisal and k-anonymity per profile")
    p.add_argument("--profile", action="append", required=True,
                   help="profile name or file; repeatable, order preserved")
    p.add_argument("--events", help="JSONL of events with user_id (for empirical/k analyses)")
    p.add_argument("--subset", help="comma-separated feature subset for the restricted attack")
    p.add_argument("--output", choices=("table", "csv", "jsonl"), default="table")
    p.set_defaults(func=cmd_analyze_anonymity)

    p = subs.add_parser("train", help="train a forest from cleartext-price events")
    p.add_argument("events", metavar="EVENTS_JSONL")
    p.add_argument("--profile", default=bundled.DEFAULT_PROFILE)
    p.add_argument("--forest-size", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--version", type=int, default=1)
    p.add_argument("--trained-at", default="1970-01-01T00:00:00Z")
    p.add_argument("--model-out", help="write the model document here")
    p.add_argument("--store", help="install into this server store (version auto-increments)")
    p.add_argument("--output", choices=("table", "csv", "jsonl"), default="table")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("serve", help="run the collection server")
    p.add_argument("--listen", default="127.0.0.1:8300")
    p.add_argument("--store", required=True)
    p.add_argument("--seed", type=int, default=None, help="store shuffle seed (testing)")
    p.add_argument("--profile", action="append", help="extra accepted profile (repeatable)")
    p.set_defaults(func=cmd_serve)

    p = subs.add_parser("engine", help="run the local capture engine for the extension")
    p.add_argument("--listen", default="127.0.0.1:8301")
    _add_pipeline_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--server", help="collection server base URL for report dispatch")
    p.add_argument("--delay-min", type=float, default=30.0)
    p.add_argument("--delay-max", type=float, default=72 * 3600.0)
    p.add_argument("--utc-offset", type=int, default=None, help="minutes east of UTC")
    p.add_argument("--state", help="persist all-time totals and settings to this file")
    p.set_defaults(func=cmd_engine)

    p = subs.add_parser("export-model", help="print the currently served model XML")
    p.add_argument("--store")
    p.set_defaults(func=cmd_export_model)

    p = subs.add_parser("import-har", help="convert a HAR 1.2 capture to a replay log")
    p.add_argument("har", metavar="HARFILE")
    p.add_argument("--output-file", help="write the replay log here instead of stdout")
    p.set_defaults(func=cmd_import_har)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        logger.error("%s", exc)
        return 1
    except ValueError as exc:
        logger.error("%s", exc)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
