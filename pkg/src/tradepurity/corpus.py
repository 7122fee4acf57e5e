"""Ingestion and alignment of trade flows, GDP, coordinates, and union rosters.

All loaders are pure functions of their input files and collect row-level
diagnostics instead of aborting on bad rows; only structural problems
(missing file, bad header, duplicate country codes) raise. A `CountryPanel`
is the immutable per-year snapshot every downstream stage consumes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
# Coincident mean positions would give d = 0 and an undefined ln d; 1 km is
# below any real inter-country distance so the floor cannot reorder pairs.
MIN_PAIR_DISTANCE_KM = 1.0

DIRECTIONS = ("import", "export")

FLOWS_HEADER = ["reporter", "partner", "year", "direction", "value_usd"]
GDP_HEADER = ["iso", "year", "gdp_usd"]
COORDS_HEADER = ["iso", "name", "mean_lat", "mean_lon"]


class CorpusError(ValueError):
    """Input data violates a corpus contract."""


@dataclass
class LoadReport:
    """Row-level diagnostics collected while loading one file."""

    source: str
    rows_read: int = 0
    rows_loaded: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)
    unknown_iso: dict[str, int] = field(default_factory=dict)

    def reject(self, line: int, reason: str) -> None:
        self.rejected.append((line, reason))
        logger.warning("%s line %d: %s", self.source, line, reason)

    def count_unknown(self, iso: str) -> None:
        self.unknown_iso[iso] = self.unknown_iso.get(iso, 0) + 1

    @property
    def unknown_iso_count(self) -> int:
        return sum(self.unknown_iso.values())


@dataclass(frozen=True)
class CountryRecord:
    """One country: code, display name, mean position, GDP by year."""

    iso_code: str
    name: str
    mean_lat: float
    mean_lon: float
    gdp_by_year: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (-90.0 <= self.mean_lat <= 90.0):
            raise CorpusError(f"{self.iso_code}: latitude {self.mean_lat} outside [-90, 90]")
        if not (-180.0 < self.mean_lon <= 180.0):
            raise CorpusError(f"{self.iso_code}: longitude {self.mean_lon} outside (-180, 180]")
        for year, gdp in self.gdp_by_year.items():
            if not (math.isfinite(gdp) and gdp > 0):
                raise CorpusError(f"{self.iso_code}: non-positive GDP {gdp} for {year}")


@dataclass
class FlowTable:
    """Directed flow reports for one year, keyed (reporter, partner, direction)."""

    year: int
    entries: dict[tuple[str, str, str], float]
    report: LoadReport


@dataclass
class UnionRegistry:
    """Named trade unions mapped to their member country codes."""

    unions: dict[str, frozenset[str]]

    def names(self) -> list[str]:
        return list(self.unions)

    def members(self, name: str) -> frozenset[str]:
        return self.unions[name]

    def restricted_to(self, isos) -> "UnionRegistry":
        keep = frozenset(isos)
        return UnionRegistry({name: members & keep for name, members in self.unions.items()})

    def union_of_any(self) -> frozenset[str]:
        out: set[str] = set()
        for members in self.unions.values():
            out |= members
        return frozenset(out)


@dataclass
class CountryPanel:
    """One year's aligned snapshot: countries, GDP, distances, merged flows, unions.

    Countries are ordered lexicographically by iso code so every downstream
    artifact is deterministic. `flow[i, j]` is the merged flow from country i
    to country j in current USD; `distance` is symmetric with zero diagonal.
    """

    year: int
    countries: list[CountryRecord]
    gdp: np.ndarray
    distance: np.ndarray
    flow: np.ndarray
    unions: UnionRegistry
    exclusions: list[tuple[str, str]] = field(default_factory=list)

    @property
    def isos(self) -> list[str]:
        return [c.iso_code for c in self.countries]

    @property
    def n(self) -> int:
        return len(self.countries)

    def to_json(self) -> str:
        doc = {
            "year": self.year,
            "countries": [
                {
                    "iso": c.iso_code,
                    "name": c.name,
                    "mean_lat": c.mean_lat,
                    "mean_lon": c.mean_lon,
                    "gdp": self.gdp[i],
                }
                for i, c in enumerate(self.countries)
            ],
            "distance_km": self.distance.tolist(),
            "flow_usd": self.flow.tolist(),
            "unions": {name: sorted(members) for name, members in self.unions.unions.items()},
            "exclusions": [list(e) for e in self.exclusions],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CountryPanel":
        doc = json.loads(text)
        countries = [
            CountryRecord(
                iso_code=c["iso"],
                name=c["name"],
                mean_lat=c["mean_lat"],
                mean_lon=c["mean_lon"],
                gdp_by_year={doc["year"]: c["gdp"]},
            )
            for c in doc["countries"]
        ]
        return cls(
            year=doc["year"],
            countries=countries,
            gdp=np.array([c["gdp"] for c in doc["countries"]], dtype=float),
            distance=np.array(doc["distance_km"], dtype=float),
            flow=np.array(doc["flow_usd"], dtype=float),
            unions=UnionRegistry(
                {name: frozenset(members) for name, members in doc["unions"].items()}
            ),
            exclusions=[tuple(e) for e in doc["exclusions"]],
        )


def _valid_iso(code: str) -> bool:
    return len(code) == 3 and code.isalpha()


def _read_rows(path: Path, expected_header: list[str]):
    """Yield (line_number, row) after checking the header line."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return
        if [h.strip() for h in header] != expected_header:
            raise CorpusError(f"{path}: expected header {','.join(expected_header)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            yield line, [cell.strip() for cell in row]


def load_flows(path, year: int, known_isos=None) -> FlowTable:
    """Load directed flow reports for `year` from a flows CSV.

    Rows with negative, non-numeric, or self-pair data are rejected with a
    line-numbered diagnostic; rows whose reporter or partner is not in
    `known_isos` (when given) are skipped and counted. Duplicate
    (reporter, partner, direction) keys keep the larger value so the result
    is independent of row order.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"flows file not found: {path}")
    report = LoadReport(source=str(path))
    known = frozenset(known_isos) if known_isos is not None else None
    entries: dict[tuple[str, str, str], float] = {}
    for line, row in _read_rows(path, FLOWS_HEADER):
        report.rows_read += 1
        if len(row) != 5:
            report.reject(line, f"expected 5 fields, got {len(row)}")
            continue
        reporter, partner, year_s, direction, value_s = row
        reporter, partner = reporter.upper(), partner.upper()
        try:
            row_year = int(year_s)
        except ValueError:
            report.reject(line, f"non-integer year {year_s!r}")
            continue
        if row_year != year:
            continue
        if not _valid_iso(reporter) or not _valid_iso(partner):
            report.reject(line, f"bad iso code {reporter!r}/{partner!r}")
            continue
        if reporter == partner:
            report.reject(line, f"self-pair {reporter}")
            continue
        if direction not in DIRECTIONS:
            report.reject(line, f"direction {direction!r} not in {DIRECTIONS}")
            continue
        try:
            value = float(value_s)
        except ValueError:
            report.reject(line, f"non-numeric value {value_s!r}")
            continue
        if not math.isfinite(value) or value < 0:
            report.reject(line, f"negative or non-finite value {value_s!r}")
            continue
        if known is not None and (reporter not in known or partner not in known):
            for iso in (reporter, partner):
                if iso not in known:
                    report.count_unknown(iso)
            continue
        key = (reporter, partner, direction)
        if key in entries and entries[key] != value:
            report.reject(line, f"duplicate entry {key}, keeping max")
            entries[key] = max(entries[key], value)
        else:
            entries[key] = value
        report.rows_loaded += 1
    return FlowTable(year=year, entries=entries, report=report)


def merge_flows(flows: FlowTable, countries: list[CountryRecord]) -> np.ndarray:
    """Merge directed reports into an N x N flow matrix, importer preferred.

    The flow from i to j is taken from j's import report; if absent it falls
    back to i's export report; if both are absent it is 0 (a true zero the
    error model absorbs downstream).
    """
    if not countries:
        raise CorpusError("merge_flows needs at least one country")
    isos = [c.iso_code for c in countries]
    n = len(isos)
    out = np.zeros((n, n), dtype=float)
    entries = flows.entries
    for i, src in enumerate(isos):
        for j, dst in enumerate(isos):
            if i == j:
                continue
            value = entries.get((dst, src, "import"))
            if value is None:
                value = entries.get((src, dst, "export"), 0.0)
            out[i, j] = value
    return out


def great_circle_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between (lat, lon) points on a 6371 km sphere."""
    lat1, lon1 = a
    lat2, lon2 = b
    for lat, lon in (a, b):
        if not (-90.0 <= lat <= 90.0) or not (-180.0 < lon <= 180.0):
            raise CorpusError(f"coordinates ({lat}, {lon}) out of range")
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(countries: list[CountryRecord]) -> np.ndarray:
    """Symmetric pairwise distance matrix with off-diagonal floor of 1 km."""
    n = len(countries)
    out = np.zeros((n, n), dtype=float)
    for i in range(n):
        a = (countries[i].mean_lat, countries[i].mean_lon)
        for j in range(i + 1, n):
            d = great_circle_distance(a, (countries[j].mean_lat, countries[j].mean_lon))
            out[i, j] = out[j, i] = max(d, MIN_PAIR_DISTANCE_KM)
    return out


def load_coordinates(path) -> list[CountryRecord]:
    """Load mean-position records; duplicate iso codes are a hard error."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"coordinates file not found: {path}")
    records: dict[str, CountryRecord] = {}
    for line, row in _read_rows(path, COORDS_HEADER):
        if len(row) != 4:
            raise CorpusError(f"{path} line {line}: expected 4 fields")
        iso, name, lat_s, lon_s = row
        iso = iso.upper()
        if not _valid_iso(iso):
            raise CorpusError(f"{path} line {line}: bad iso code {iso!r}")
        if iso in records:
            raise CorpusError(f"{path} line {line}: duplicate iso code {iso}")
        try:
            lat, lon = float(lat_s), float(lon_s)
        except ValueError as exc:
            raise CorpusError(f"{path} line {line}: non-numeric coordinate") from exc
        records[iso] = CountryRecord(iso_code=iso, name=name, mean_lat=lat, mean_lon=lon)
    return list(records.values())


def load_gdp(path) -> tuple[dict[str, dict[int, float]], LoadReport]:
    """Load GDP rows into iso -> {year: value}; bad rows are rejected with diagnostics."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"gdp file not found: {path}")
    report = LoadReport(source=str(path))
    table: dict[str, dict[int, float]] = {}
    for line, row in _read_rows(path, GDP_HEADER):
        report.rows_read += 1
        if len(row) != 3:
            report.reject(line, f"expected 3 fields, got {len(row)}")
            continue
        iso, year_s, gdp_s = row
        iso = iso.upper()
        if not _valid_iso(iso):
            report.reject(line, f"bad iso code {iso!r}")
            continue
        try:
            year = int(year_s)
            gdp = float(gdp_s)
        except ValueError:
            report.reject(line, "non-numeric year or gdp")
            continue
        if not math.isfinite(gdp) or gdp <= 0:
            report.reject(line, f"non-positive gdp {gdp_s!r}")
            continue
        if year in table.get(iso, {}):
            report.reject(line, f"duplicate gdp for {iso}/{year}, keeping max")
            table[iso][year] = max(table[iso][year], gdp)
            continue
        table.setdefault(iso, {})[year] = gdp
        report.rows_loaded += 1
    return table, report


def load_unions(path) -> UnionRegistry:
    """Load the union roster file: one `union_name,iso1;iso2;...` record per line."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"unions file not found: {path}")
    unions: dict[str, frozenset[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for line, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            if "," not in raw:
                raise CorpusError(f"{path} line {line}: expected 'name,iso1;iso2;...'")
            name, members_s = raw.split(",", 1)
            name = name.strip()
            if name in unions:
                raise CorpusError(f"{path} line {line}: duplicate union {name}")
            members = set()
            for iso in members_s.split(";"):
                iso = iso.strip().upper()
                if not iso:
                    continue
                if not _valid_iso(iso):
                    raise CorpusError(f"{path} line {line}: bad member code {iso!r}")
                members.add(iso)
            unions[name] = frozenset(members)
    return UnionRegistry(unions)


def build_panel(
    year: int,
    flows: FlowTable,
    gdp: dict[str, dict[int, float]],
    coordinates: list[CountryRecord],
    unions: UnionRegistry,
) -> CountryPanel:
    """Assemble the aligned per-year panel.

    A country is eligible when it has coordinates, a GDP value for the year,
    and at least one flow report mentioning it. Ineligible candidates are
    listed in `exclusions` with the reason. Union rosters are restricted to
    panel members. Fewer than 3 eligible countries is a hard error.
    """
    if flows.year != year:
        raise CorpusError(f"flow table year {flows.year} != requested {year}")
    seen: set[str] = set()
    for code in (c.iso_code for c in coordinates):
        if code in seen:
            raise CorpusError(f"duplicate iso code in coordinates: {code}")
        seen.add(code)

    mentioned: set[str] = set()
    for reporter, partner, _ in flows.entries:
        mentioned.add(reporter)
        mentioned.add(partner)

    eligible: list[CountryRecord] = []
    exclusions: list[tuple[str, str]] = []
    for rec in sorted(coordinates, key=lambda c: c.iso_code):
        gdp_value = gdp.get(rec.iso_code, {}).get(year)
        if gdp_value is None:
            exclusions.append((rec.iso_code, f"no GDP for {year}"))
            continue
        if rec.iso_code not in mentioned:
            exclusions.append((rec.iso_code, f"no flow reports in {year}"))
            continue
        eligible.append(
            CountryRecord(
                iso_code=rec.iso_code,
                name=rec.name,
                mean_lat=rec.mean_lat,
                mean_lon=rec.mean_lon,
                gdp_by_year={year: gdp_value},
            )
        )
    if len(eligible) < 3:
        raise CorpusError(f"only {len(eligible)} eligible countries for {year}; need >= 3")

    panel_isos = [c.iso_code for c in eligible]
    return CountryPanel(
        year=year,
        countries=eligible,
        gdp=np.array([c.gdp_by_year[year] for c in eligible], dtype=float),
        distance=distance_matrix(eligible),
        flow=merge_flows(flows, eligible),
        unions=unions.restricted_to(panel_isos),
        exclusions=exclusions,
    )


# --- optional remote acquisition -------------------------------------------

DEFAULT_URL_TEMPLATES = {
    "trade-api": "https://comtradeapi.un.org/public/v1/get/C/A/HS?period={year}",
    "gdp-api": "https://api.worldbank.org/v2/country/all/indicator/NY.GDP.MKTP.CD?date={year}&format=csv",
}


def _default_fetcher(url: str) -> str:
    import urllib.request

    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read().decode("utf-8")


def fetch_remote(
    source: str,
    years,
    cache_dir,
    url_template: str | None = None,
    fetcher=None,
    max_retries: int = 3,
    backoff_s: float = 1.0,
    sleep=None,
) -> list[Path]:
    """Download and cache raw yearly files for `source` in {trade-api, gdp-api}.

    Cached years are never re-fetched. Transient failures are retried with
    exponential backoff; after `max_retries` attempts a RuntimeError points
    at any cached copy. Never required by the rest of the pipeline, which
    runs entirely from local files.
    """
    import time as _time

    if source not in DEFAULT_URL_TEMPLATES:
        raise CorpusError(f"unknown source {source!r}; expected one of {sorted(DEFAULT_URL_TEMPLATES)}")
    template = url_template or DEFAULT_URL_TEMPLATES[source]
    fetch = fetcher or _default_fetcher
    wait = sleep or _time.sleep

    cache_dir = Path(cache_dir)
    src_dir = cache_dir / source
    src_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = cache_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    paths = []
    for year in years:
        target = src_dir / f"{year}.csv"
        if target.exists():
            logger.info("cache hit for %s/%s", source, year)
            paths.append(target)
            continue
        url = template.format(year=year)
        last_error = None
        for attempt in range(max_retries):
            try:
                text = fetch(url)
                break
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                if attempt < max_retries - 1:
                    wait(backoff_s * (2**attempt))
        else:
            raise RuntimeError(
                f"failed to fetch {source}/{year} after {max_retries} attempts "
                f"({last_error}); use a cached copy under {src_dir} if available"
            )
        target.write_text(text, encoding="utf-8")
        manifest[f"{source}/{year}"] = {
            "url": url,
            "retrieved_at": _time.strftime("%Y-%m-%dT%H:%M:%SZ", _time.gmtime()),
        }
        paths.append(target)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths
