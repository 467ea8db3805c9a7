"""Feature aggregation and uniqueness analysis.

A granularity profile assigns every reportable feature a class count and a
mapper from raw values to class indices.  On top of aggregated tuples the
module computes surprisal under a uniform class assumption, surprisal under
empirically fitted per-feature distributions, and k-anonymity (how many
distinct users emit the same aggregated tuple).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .features import AdEvent, raw_feature_value


class ProfileError(ValueError):
    """A granularity profile violates its invariants or cannot be parsed."""


class UnmappedValueError(ProfileError):
    """A raw value fell outside a mapper's domain — a profile bug."""


class InfiniteSurprisalError(ValueError):
    """A tuple hit a zero-probability class; its surprisal is unbounded."""

    def __init__(self, feature: str, class_index: int):
        super().__init__(f"class {class_index} of feature {feature!r} has zero probability")
        self.feature = feature
        self.class_index = class_index


MAPPER_TABLE = "table"
MAPPER_BINS = "bins"
MAPPER_SIZE_AREA = "size-area"

_SIZE_RE = re.compile(r"^(\d+)[xX](\d+)$")


@dataclass(frozen=True)
class FeatureGranularity:
    """Class count plus mapper for one feature.

    Mapper kinds:
      table      raw string -> class, with an optional default class;
      bins       numeric raw, k-1 increasing edges define k classes;
      size-area  'WxH' raw, classes cut on the pixel area, default for
                 unparseable sizes.
    A feature may also carry a bare class count (no mapper); such features
    support uniform surprisal but cannot aggregate events.
    """

    feature: str
    class_count: int
    kind: str | None = None
    table: Mapping[str, int] | None = None
    default_class: int | None = None
    edges: tuple[Decimal, ...] = ()

    def __post_init__(self) -> None:
        if self.class_count < 1:
            raise ProfileError(f"{self.feature}: class count must be >= 1")
        if self.kind is None:
            if self.table or self.edges or self.default_class is not None:
                raise ProfileError(f"{self.feature}: mapper data without a mapper kind")
            return
        if self.kind == MAPPER_TABLE:
            if self.table is None:
                raise ProfileError(f"{self.feature}: table mapper without entries")
            classes = set(self.table.values())
            if self.default_class is not None:
                classes.add(self.default_class)
            if not all(0 <= c < self.class_count for c in classes):
                raise ProfileError(f"{self.feature}: class index out of range")
            if classes != set(range(self.class_count)):
                raise ProfileError(
                    f"{self.feature}: mapper is not surjective onto 0..{self.class_count - 1}"
                )
        elif self.kind in (MAPPER_BINS, MAPPER_SIZE_AREA):
            if len(self.edges) != self.class_count - 1:
                raise ProfileError(
                    f"{self.feature}: {self.class_count} classes need "
                    f"{self.class_count - 1} edges, got {len(self.edges)}"
                )
            if any(a >= b for a, b in zip(self.edges, self.edges[1:])):
                raise ProfileError(f"{self.feature}: edges must be strictly increasing")
            if self.kind == MAPPER_SIZE_AREA and self.default_class is None:
                raise ProfileError(f"{self.feature}: size-area mapper needs a default class")
        else:
            raise ProfileError(f"{self.feature}: unknown mapper kind {self.kind!r}")

    @property
    def has_mapper(self) -> bool:
        return self.kind is not None

    def map_raw(self, raw: str) -> int:
        if self.kind == MAPPER_TABLE:
            assert self.table is not None
            cls = self.table.get(raw, self.default_class)
            if cls is None:
                raise UnmappedValueError(f"{self.feature}: no class for raw value {raw!r}")
            return cls
        if self.kind == MAPPER_BINS:
            try:
                value = Decimal(raw)
            except InvalidOperation:
                raise UnmappedValueError(f"{self.feature}: {raw!r} is not numeric") from None
            return _bin_index(value, self.edges)
        if self.kind == MAPPER_SIZE_AREA:
            m = _SIZE_RE.match(raw)
            if not m:
                assert self.default_class is not None
                return self.default_class
            area = Decimal(int(m.group(1)) * int(m.group(2)))
            return _bin_index(area, self.edges)
        raise ProfileError(f"{self.feature}: feature has no mapper")


def _bin_index(value: Decimal, edges: Sequence[Decimal]) -> int:
    for i, edge in enumerate(edges):
        if value < edge:
            return i
    return len(edges)


@dataclass(frozen=True)
class GranularityProfile:
    name: str
    features: tuple[FeatureGranularity, ...]
    version: int = 1

    def __post_init__(self) -> None:
        names = [f.feature for f in self.features]
        if len(set(names)) != len(names):
            raise ProfileError(f"{self.name}: duplicate feature")
        if not self.features:
            raise ProfileError(f"{self.name}: empty profile")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.feature for f in self.features)

    def spec_for(self, feature: str) -> FeatureGranularity:
        for f in self.features:
            if f.feature == feature:
                return f
        raise KeyError(feature)

    def class_counts(self) -> tuple[int, ...]:
        return tuple(f.class_count for f in self.features)


def aggregate_event(event: AdEvent, profile: GranularityProfile) -> tuple[int, ...]:
    """Replace every profile feature with its class index. Deterministic."""
    out = []
    for spec in profile.features:
        if not spec.has_mapper:
            raise ProfileError(
                f"{profile.name}/{spec.feature}: count-only feature cannot aggregate events"
            )
        out.append(spec.map_raw(raw_feature_value(event, spec.feature)))
    return tuple(out)


def aggregate_raw(raw: Mapping[str, str], profile: GranularityProfile) -> tuple[int, ...]:
    """Aggregate an already-extracted raw feature mapping."""
    return tuple(spec.map_raw(raw[spec.feature]) for spec in profile.features)


# --- coarsening --------------------------------------------------------------

def is_coarsening_of(coarse: GranularityProfile, fine: GranularityProfile) -> bool:
    """Structural check: every coarse class is a union of fine classes."""
    if coarse.feature_names != fine.feature_names:
        return False
    for cs, fs in zip(coarse.features, fine.features):
        if cs.class_count > fs.class_count:
            return False
        if cs.kind == MAPPER_TABLE and fs.kind == MAPPER_TABLE:
            assert cs.table is not None and fs.table is not None
            if set(cs.table) != set(fs.table):
                return False
            fine_to_coarse: dict[int, int] = {}
            for raw, fine_cls in fs.table.items():
                coarse_cls = cs.table[raw]
                if fine_to_coarse.setdefault(fine_cls, coarse_cls) != coarse_cls:
                    return False
        elif cs.kind in (MAPPER_BINS, MAPPER_SIZE_AREA) and cs.kind == fs.kind:
            if not set(cs.edges) <= set(fs.edges):
                return False
        elif cs.kind is None and fs.kind is None:
            continue
        else:
            return False
    return True


# --- surprisal ----------------------------------------------------------------

@dataclass(frozen=True)
class SurprisalResult:
    bits: float
    contributions: tuple[tuple[str, float], ...]


def surprisal_uniform(profile: GranularityProfile) -> SurprisalResult:
    """Bits of surprisal when every class of every feature is equally likely."""
    contributions = tuple(
        (spec.feature, math.log2(spec.class_count)) for spec in profile.features
    )
    return SurprisalResult(
        bits=sum(bits for _, bits in contributions), contributions=contributions
    )


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Per-feature class probabilities fitted from observed tuples."""

    features: tuple[str, ...]
    probabilities: tuple[tuple[float, ...], ...]
    sample_size: int

    def __post_init__(self) -> None:
        for feature, probs in zip(self.features, self.probabilities):
            if any(p < 0 for p in probs):
                raise ValueError(f"{feature}: negative probability")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"{feature}: probabilities sum to {sum(probs)}")


def fit_distributions(
    tuples: Iterable[Sequence[int]], profile: GranularityProfile
) -> EmpiricalDistribution:
    """Per-feature relative class frequencies over aggregated tuples."""
    counts = [[0] * spec.class_count for spec in profile.features]
    n = 0
    for tpl in tuples:
        n += 1
        for i, cls in enumerate(tpl):
            counts[i][cls] += 1
    if n == 0:
        raise ValueError("cannot fit distributions from zero tuples")
    return EmpiricalDistribution(
        features=profile.feature_names,
        probabilities=tuple(tuple(c / n for c in row) for row in counts),
        sample_size=n,
    )


def surprisal_empirical(
    tpl: Sequence[int], dists: EmpiricalDistribution
) -> SurprisalResult:
    """Bits of surprisal of one aggregated tuple under fitted distributions.

    Features are assumed independent, so the bits add up per feature.  A class
    with zero fitted probability raises InfiniteSurprisalError rather than
    overflowing.
    """
    if len(tpl) != len(dists.features):
        raise ValueError("tuple arity does not match the distribution")
    contributions = []
    for feature, probs, cls in zip(dists.features, dists.probabilities, tpl):
        if not 0 <= cls < len(probs) or probs[cls] == 0.0:
            raise InfiniteSurprisalError(feature, cls)
        contributions.append((feature, -math.log2(probs[cls])))
    return SurprisalResult(
        bits=sum(bits for _, bits in contributions), contributions=tuple(contributions)
    )


def dump_distribution(dists: EmpiricalDistribution) -> str:
    """Text form of fitted distributions, so analyses replay from files alone."""
    lines = [f"distribution samples {dists.sample_size}"]
    for feature, probs in zip(dists.features, dists.probabilities):
        lines.append(f"feature {feature} probs " + " ".join(repr(p) for p in probs))
    return "\n".join(lines) + "\n"


def parse_distribution(text: str) -> EmpiricalDistribution:
    sample_size: int | None = None
    features: list[str] = []
    probabilities: list[tuple[float, ...]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "distribution":
            if len(parts) != 3 or parts[1] != "samples":
                raise ValueError(f"line {lineno}: bad distribution header")
            sample_size = int(parts[2])
        elif parts[0] == "feature":
            if len(parts) < 4 or parts[2] != "probs":
                raise ValueError(f"line {lineno}: bad feature line")
            features.append(parts[1])
            probabilities.append(tuple(float(p) for p in parts[3:]))
        else:
            raise ValueError(f"line {lineno}: unknown directive {parts[0]!r}")
    if sample_size is None:
        raise ValueError("missing distribution header")
    return EmpiricalDistribution(
        features=tuple(features), probabilities=tuple(probabilities), sample_size=sample_size
    )


# --- k-anonymity ---------------------------------------------------------------

@dataclass(frozen=True)
class AnonymityReport:
    """Distinct-user count per aggregated tuple, plus the CDF of k over tuples."""

    per_tuple: Mapping[tuple[int, ...], int]
    cdf: tuple[tuple[int, float], ...]
    features: tuple[str, ...]

    @property
    def min_k(self) -> int:
        return min(self.per_tuple.values())

    @property
    def median_k(self) -> int:
        ks = sorted(self.per_tuple.values())
        return ks[(len(ks) - 1) // 2]


def k_anonymity(
    events: Sequence[tuple[str, AdEvent]],
    profile: GranularityProfile,
    feature_subset: Sequence[str] | None = None,
) -> AnonymityReport:
    """How many distinct users emit each aggregated tuple.

    User ids exist only inside this offline analysis; they are never part of
    reports.  A feature subset restricts the attacker's view to those columns.
    """
    if not events:
        raise ValueError("k-anonymity needs at least one event")
    pairs = [(user, aggregate_event(event, profile)) for user, event in events]
    return k_anonymity_tuples(pairs, profile.feature_names, feature_subset)


def k_anonymity_tuples(
    pairs: Sequence[tuple[str, tuple[int, ...]]],
    features: Sequence[str],
    feature_subset: Sequence[str] | None = None,
) -> AnonymityReport:
    if not pairs:
        raise ValueError("k-anonymity needs at least one tuple")
    features = tuple(features)
    if feature_subset is not None:
        indices = [features.index(f) for f in feature_subset]
        features = tuple(feature_subset)
        pairs = [(user, tuple(tpl[i] for i in indices)) for user, tpl in pairs]

    users_per_tuple: dict[tuple[int, ...], set[str]] = {}
    for user, tpl in pairs:
        users_per_tuple.setdefault(tpl, set()).add(user)
    per_tuple = {tpl: len(users) for tpl, users in users_per_tuple.items()}

    ks = sorted(per_tuple.values())
    n = len(ks)
    cdf = []
    seen = 0
    for k in ks:
        seen += 1
        if seen == n or ks[seen] != k:
            cdf.append((k, seen / n))
    return AnonymityReport(per_tuple=per_tuple, cdf=tuple(cdf), features=features)


# --- profile text format --------------------------------------------------------
#
#   profile <name> version <n>
#   feature <id> classes <n> [kind table|bins|size-area] [default <class>]
#   map <raw> <class>          (table features; raw is URL-ish-escaped)
#   edges <e1> <e2> ...        (bins / size-area features)

def dump_profile(profile: GranularityProfile) -> str:
    lines = [f"profile {profile.name} version {profile.version}"]
    for spec in profile.features:
        head = f"feature {spec.feature} classes {spec.class_count}"
        if spec.kind:
            head += f" kind {spec.kind}"
        if spec.default_class is not None:
            head += f" default {spec.default_class}"
        lines.append(head)
        if spec.kind == MAPPER_TABLE:
            assert spec.table is not None
            for raw, cls in spec.table.items():
                lines.append(f"map {_escape(raw)} {cls}")
        elif spec.kind in (MAPPER_BINS, MAPPER_SIZE_AREA):
            lines.append("edges " + " ".join(str(e) for e in spec.edges))
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> GranularityProfile:
    name: str | None = None
    version = 1
    features: list[FeatureGranularity] = []
    current: dict | None = None

    def flush() -> None:
        nonlocal current
        if current is None:
            return
        features.append(
            FeatureGranularity(
                feature=current["feature"],
                class_count=current["classes"],
                kind=current["kind"],
                table=current["table"] if current["kind"] == MAPPER_TABLE else None,
                default_class=current["default"],
                edges=tuple(current["edges"]),
            )
        )
        current = None

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "profile":
            if name is not None:
                raise ProfileError(f"line {lineno}: duplicate profile header")
            if len(parts) == 4 and parts[2] == "version":
                name, version = parts[1], int(parts[3])
            elif len(parts) == 2:
                name = parts[1]
            else:
                raise ProfileError(f"line {lineno}: bad profile header")
        elif parts[0] == "feature":
            flush()
            if len(parts) < 4 or parts[2] != "classes":
                raise ProfileError(f"line {lineno}: bad feature header")
            spec = {
                "feature": parts[1],
                "classes": int(parts[3]),
                "kind": None,
                "table": {},
                "default": None,
                "edges": [],
            }
            rest = parts[4:]
            while rest:
                if rest[0] == "kind" and len(rest) >= 2:
                    spec["kind"] = rest[1]
                    rest = rest[2:]
                elif rest[0] == "default" and len(rest) >= 2:
                    spec["default"] = int(rest[1])
                    rest = rest[2:]
                else:
                    raise ProfileError(f"line {lineno}: bad feature option {rest[0]!r}")
            current = spec
        elif parts[0] == "map":
            if current is None or current["kind"] != MAPPER_TABLE:
                raise ProfileError(f"line {lineno}: 'map' outside a table feature")
            if len(parts) != 3:
                raise ProfileError(f"line {lineno}: expected 'map RAW CLASS'")
            current["table"][_unescape(parts[1])] = int(parts[2])
        elif parts[0] == "edges":
            if current is None or current["kind"] not in (MAPPER_BINS, MAPPER_SIZE_AREA):
                raise ProfileError(f"line {lineno}: 'edges' outside a binned feature")
            current["edges"] = [Decimal(e) for e in parts[1:]]
        else:
            raise ProfileError(f"line {lineno}: unknown directive {parts[0]!r}")
    flush()
    if name is None:
        raise ProfileError("missing profile header")
    return GranularityProfile(name=name, features=tuple(features), version=version)


def load_profile(path: str | Path) -> GranularityProfile:
    try:
        return parse_profile(Path(path).read_text(encoding="utf-8"))
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from None


def _escape(raw: str) -> str:
    return raw.replace("%", "%25").replace(" ", "%20").replace("#", "%23")


def _unescape(raw: str) -> str:
    return raw.replace("%23", "#").replace("%20", " ").replace("%25", "%")
