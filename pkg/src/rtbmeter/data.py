"""Access to the data files bundled with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .anonymity import GranularityProfile, load_profile
from .features import IabMapping, SizeKeywords, load_tracker_domains
from .nurl import Registry, load_registry

# Default active reporting profile.
DEFAULT_PROFILE = "reporting-aggregated"


def data_path(*parts: str) -> Path:
    path = resources.files("rtbmeter").joinpath("data", *parts)
    return Path(str(path))


def default_registry() -> Registry:
    return load_registry(data_path("dsp_registry.txt"))


def default_iab_mapping() -> IabMapping:
    return IabMapping.load(data_path("iab_categories.tsv"))


def default_trackers() -> frozenset[str]:
    return load_tracker_domains(data_path("trackers.txt"))


def default_size_keywords() -> SizeKeywords:
    return SizeKeywords.load(data_path("size_keywords.txt"))


def bundled_profile(name: str) -> GranularityProfile:
    return load_profile(data_path("profiles", f"{name}.profile"))


def bundled_profiles() -> dict[str, GranularityProfile]:
    out: dict[str, GranularityProfile] = {}
    for path in sorted(data_path("profiles").glob("*.profile")):
        profile = load_profile(path)
        out[profile.name] = profile
    return out


def default_model_document() -> str:
    return data_path("default_model.xml").read_text(encoding="utf-8")


def country_zones() -> dict[str, str]:
    zones: dict[str, str] = {}
    for line in data_path("country_zones.tsv").read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        code, zone = line.split("\t", 1)
        zones[code.strip().upper()] = zone.strip()
    return zones
