"""Privacy-preserving reporting pipeline.

Clients hold finished reports locally, give each one a random dispatch delay,
and ship due records as one shuffled batch.  The server validates batches
against the report schema, appends them to a log, and periodically rewrites
its store in a freshly shuffled order so that physical position carries no
arrival information.  Records never carry client ids, sequence numbers or
timestamps finer than the aggregated bins.
"""

from __future__ import annotations

import json
import os
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .anonymity import GranularityProfile, aggregate_event
from .features import AdEvent


class BatchRejectedError(ValueError):
    """The batch violates the report schema; the store is untouched."""


@dataclass(frozen=True)
class ReportRecord:
    """One aggregated ad record: profile coordinates plus class indices only."""

    profile: str
    profile_version: int
    values: tuple[tuple[str, int], ...]

    def to_dict(self) -> dict[str, object]:
        out: dict[str, object] = {"profile": self.profile, "profile_version": self.profile_version}
        out.update(self.values)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, object], profiles: Mapping[str, GranularityProfile]):
        extra = set(data) - {"profile", "profile_version"}
        profile_name = data.get("profile")
        if not isinstance(profile_name, str) or profile_name not in profiles:
            raise BatchRejectedError(f"unknown profile {profile_name!r}")
        profile = profiles[profile_name]
        version = data.get("profile_version")
        if version != profile.version:
            raise BatchRejectedError(
                f"profile version {version!r} does not match {profile.version}"
            )
        expected = set(profile.feature_names)
        if extra != expected:
            unknown = sorted(extra - expected)
            missing = sorted(expected - extra)
            raise BatchRejectedError(
                f"record fields do not match profile {profile_name!r}"
                f" (unknown: {unknown}, missing: {missing})"
            )
        values = []
        for spec in profile.features:
            cls_index = data[spec.feature]
            if not isinstance(cls_index, int) or isinstance(cls_index, bool):
                raise BatchRejectedError(f"{spec.feature}: class index must be an integer")
            if not 0 <= cls_index < spec.class_count:
                raise BatchRejectedError(
                    f"{spec.feature}: class {cls_index} out of range 0..{spec.class_count - 1}"
                )
            values.append((spec.feature, cls_index))
        return cls(profile=profile_name, profile_version=profile.version, values=tuple(values))


def build_record(event: AdEvent, profile: GranularityProfile) -> ReportRecord:
    classes = aggregate_event(event, profile)
    return ReportRecord(
        profile=profile.name,
        profile_version=profile.version,
        values=tuple(zip(profile.feature_names, classes)),
    )


# --- client side ----------------------------------------------------------------

@dataclass
class ClientQueue:
    """Local buffer that releases records at per-record random times.

    Nothing is accepted or dispatched while opt-in is off; flipping opt-in off
    also drops anything still buffered.
    """

    rng: random.Random
    delay_min: float = 30.0
    delay_max: float = 72 * 3600.0
    opt_in: bool = True
    pending: list[tuple[float, ReportRecord]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.delay_min <= self.delay_max:
            raise ValueError("delay bounds must satisfy 0 <= min <= max")

    def enqueue(self, record: ReportRecord, now: float) -> None:
        if not self.opt_in:
            return
        dispatch_at = now + self.rng.uniform(self.delay_min, self.delay_max)
        self.pending.append((dispatch_at, record))

    def dispatch_due(self, now: float) -> list[ReportRecord] | None:
        """Remove all due records and return them as one shuffled batch."""
        due = [record for at, record in self.pending if at <= now]
        if not due:
            return None
        self.pending = [(at, record) for at, record in self.pending if at > now]
        self.rng.shuffle(due)
        return due

    def set_opt_in(self, enabled: bool) -> None:
        self.opt_in = enabled
        if not enabled:
            self.pending.clear()


# --- server side ------------------------------------------------------------------

@dataclass
class ShufflePolicy:
    record_threshold: int = 500
    max_interval: float = 24 * 3600.0


class ServerStore:
    """Record multiset with stable storage and periodic physical shuffle.

    Layout: a generation-numbered shuffled snapshot (`snapshot.N.jsonl`) plus
    an append-only journal of records since (`journal.N.jsonl`); `meta.json`
    points at the live generation and is replaced atomically, so it is the
    commit point of every compaction.  Compaction merges snapshot and journal
    into a freshly shuffled next-generation snapshot; a crash at any point
    leaves either the old or the new generation fully intact, never a mix, so
    no record is ever lost or duplicated.  Nothing about a record's source or
    arrival time is stored.  `model.xml` carries the served model document.
    """

    def __init__(
        self,
        path: str | Path,
        profiles: Mapping[str, GranularityProfile],
        policy: ShufflePolicy | None = None,
        rng: random.Random | None = None,
    ):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.profiles = dict(profiles)
        self.policy = policy or ShufflePolicy()
        self.rng = rng or random.Random()
        self._lock = threading.Lock()
        self._meta = self.path / "meta.json"
        self._model = self.path / "model.xml"
        meta = self._read_meta()
        self._generation: int = meta.get("generation", 0)
        self._since_shuffle: int = meta.get("since_shuffle", 0)
        self._last_shuffle: float = meta.get("last_shuffle", 0.0)
        self._drop_stale_generations()

    @property
    def snapshot_path(self) -> Path:
        return self.path / f"snapshot.{self._generation}.jsonl"

    @property
    def journal_path(self) -> Path:
        return self.path / f"journal.{self._generation}.jsonl"

    # -- metadata ------------------------------------------------------------

    def _read_meta(self) -> dict:
        if self._meta.exists():
            return json.loads(self._meta.read_text(encoding="utf-8"))
        return {}

    def _write_meta(self) -> None:
        meta = {
            "generation": self._generation,
            "since_shuffle": self._since_shuffle,
            "last_shuffle": self._last_shuffle,
        }
        tmp = self._meta.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(meta), encoding="utf-8")
        os.replace(tmp, self._meta)

    def _drop_stale_generations(self) -> None:
        # leftovers of interrupted compactions; the meta pointer never saw them
        keep = {self.snapshot_path.name, self.journal_path.name}
        for pattern in ("snapshot.*.jsonl", "journal.*.jsonl"):
            for stale in self.path.glob(pattern):
                if stale.name not in keep:
                    stale.unlink(missing_ok=True)

    # -- ingest ---------------------------------------------------------------

    def ingest(self, batch: Sequence[Mapping[str, object]], now: float = 0.0) -> int:
        """Validate and append a whole batch; any schema violation rejects it all."""
        records = [ReportRecord.from_dict(item, self.profiles) for item in batch]
        with self._lock:
            if records:
                with self.journal_path.open("a", encoding="utf-8") as fh:
                    for record in records:
                        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                self._since_shuffle += len(records)
            due_by_count = self._since_shuffle >= self.policy.record_threshold
            due_by_time = (
                self._since_shuffle > 0
                and now - self._last_shuffle >= self.policy.max_interval
            )
            if due_by_count or due_by_time:
                self._compact(now)
            else:
                self._write_meta()
        return len(records)

    def _compact(self, now: float) -> None:
        rows = self._read_all()
        self.rng.shuffle(rows)
        old_snapshot, old_journal = self.snapshot_path, self.journal_path
        next_snapshot = self.path / f"snapshot.{self._generation + 1}.jsonl"
        with next_snapshot.open("w", encoding="utf-8") as fh:
            fh.writelines(row + "\n" for row in rows)
            fh.flush()
            os.fsync(fh.fileno())
        self._generation += 1
        self._since_shuffle = 0
        self._last_shuffle = now
        self._write_meta()  # commit point: the new generation becomes live
        old_snapshot.unlink(missing_ok=True)
        old_journal.unlink(missing_ok=True)

    def compact(self, now: float = 0.0) -> None:
        with self._lock:
            self._compact(now)

    def _read_all(self) -> list[str]:
        rows: list[str] = []
        for path in (self.snapshot_path, self.journal_path):
            if path.exists():
                rows.extend(
                    line for line in path.read_text(encoding="utf-8").splitlines() if line
                )
        return rows

    # -- reads ------------------------------------------------------------------

    def records(self) -> list[dict]:
        """Current physical iteration order: shuffled snapshot, then journal tail."""
        with self._lock:
            return [json.loads(line) for line in self._read_all()]

    def count(self) -> int:
        with self._lock:
            return len(self._read_all())

    # -- model distribution -------------------------------------------------------

    def model_document(self, default: str) -> str:
        with self._lock:
            if self._model.exists():
                return self._model.read_text(encoding="utf-8")
            return default

    def install_model(self, document: str) -> None:
        """Replace the served model; its version must strictly increase."""
        from .pricing import deserialize_model

        new = deserialize_model(document)
        with self._lock:
            if self._model.exists():
                current = deserialize_model(self._model.read_text(encoding="utf-8"))
                if new.version <= current.version:
                    raise ValueError(
                        f"model version must increase ({new.version} <= {current.version})"
                    )
            tmp = self._model.with_suffix(".xml.tmp")
            tmp.write_text(document, encoding="utf-8")
            os.replace(tmp, self._model)


def model_version_of(document: str) -> int:
    from .pricing import deserialize_model

    return deserialize_model(document).version


def serve_model(store: ServerStore, default: str, if_version: int | None = None):
    """Return (version, document) or (version, None) when the client is current."""
    document = store.model_document(default)
    version = model_version_of(document)
    if if_version is not None and if_version == version:
        return version, None
    return version, document


def records_multiset(records: Iterable[Mapping[str, object]]) -> dict[str, int]:
    """Order-insensitive fingerprint of a record collection."""
    counts: dict[str, int] = {}
    for record in records:
        key = json.dumps(record, sort_keys=True)
        counts[key] = counts.get(key, 0) + 1
    return counts
