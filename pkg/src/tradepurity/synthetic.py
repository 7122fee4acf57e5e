"""Deterministic synthetic corpus generator with planted structure.

Builds flow/GDP/coordinate/union files exercising every pipeline stage with
known ground truth. Countries sit in tight regional polygon clusters whose
centers are far apart, so each country trades mostly with its neighbors; one
union's members form their own cluster and get a resistance discount (cheaper
to trade inside), while a decoy union is scattered across regions. A fraction
of cross-region pairs carry prohibitive artificial barriers whose flows fall
below the reporting floor and so appear as true zeros. Reported flows are
split between importer and exporter reports to exercise the merge rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import great_circle_distance

GDP_LN_MEAN = 27.6  # median mass ~ 1e12 in current USD
GDP_LN_STD = 0.8
BAND_LATS = (55.0, 30.0, 5.0, -25.0, -50.0)
CENTER_SEPARATION_KM = 2400.0


@dataclass
class SyntheticSpec:
    """Knobs of the planted world; defaults produce the bundled 20-country corpus."""

    n_countries: int = 20
    year: int = 2011
    seed: int = 11
    alpha: float = 1.0
    union_name: str = "PACT"
    union_size: int = 6
    decoy_name: str = "SCAT"
    decoy_size: int = 4
    intercept: float = 25.0
    elasticity: float = 1.0
    sigma1: float = 0.1
    union_discount: float = 1.2
    cat2_prob: float = 0.12
    cat2_mu: float = 55.0
    cat2_sigma: float = 1.0
    eps_mu: float = 0.4
    eps_sigma: float = 0.01
    min_flow: float = 1e3
    flow_tilt: float = 0.15
    union_center: tuple[float, float] = (12.0, 24.0)
    union_radius_deg: float = 4.0
    cluster_radius_deg: float = 3.0
    cluster_size: int = 5
    gdp_gap_count: int = 0
    coverage: tuple[float, float, float] = (0.7, 0.2, 0.1)


@dataclass
class SyntheticTruth:
    """Ground truth the generator planted, for assertions in tests."""

    isos: list[str]
    union_members: list[str]
    decoy_members: list[str]
    clusters: dict[str, int] = field(default_factory=dict)
    category2_pairs: set[tuple[str, str]] = field(default_factory=set)
    ln_resistance: dict[tuple[str, str], float] = field(default_factory=dict)
    mass: dict[str, float] = field(default_factory=dict)
    tilt: dict[str, float] = field(default_factory=dict)


def iso_code(i: int) -> str:
    """Deterministic 3-letter codes AAA, AAB, ... in lexicographic order."""
    if not (0 <= i < 26**3):
        raise ValueError("index out of range for 3-letter codes")
    return chr(65 + i // 676) + chr(65 + (i // 26) % 26) + chr(65 + i % 26)


def _wrap_lon(lon: float) -> float:
    lon = lon % 360.0
    return lon - 360.0 if lon > 180.0 else lon


def _regional_centers(count: int, avoid: tuple[float, float]) -> list[tuple[float, float]]:
    """Deterministic well-separated cluster centers, skipping slots near `avoid`."""
    centers = []
    for k in range(12):
        for band, lat in enumerate(BAND_LATS):
            lon = _wrap_lon(-170.0 + 30.0 * k + 6.0 * band)
            if great_circle_distance(avoid, (lat, lon)) < CENTER_SEPARATION_KM:
                continue
            centers.append((lat, lon))
            if len(centers) == count:
                return centers
    raise ValueError("country count exceeds the available cluster slots")


def _polygon(rng, center: tuple[float, float], size: int, radius_deg: float) -> list[tuple[float, float]]:
    """Near-regular polygon of points around a center, with small jitter."""
    clat, clon = center
    phase = rng.uniform(0.0, 2.0 * math.pi)
    lon_scale = max(math.cos(math.radians(clat)), 0.2)
    points = []
    for m in range(size):
        theta = phase + 2.0 * math.pi * m / size
        lat = clat + radius_deg * math.cos(theta) + rng.uniform(-0.15, 0.15)
        lon = clon + radius_deg * math.sin(theta) / lon_scale + rng.uniform(-0.15, 0.15)
        points.append((lat, _wrap_lon(lon)))
    return points


def _split_sizes(total: int, target: int) -> list[int]:
    """Partition `total` into near-equal cluster sizes close to `target`."""
    k = max(1, round(total / target))
    base, extra = divmod(total, k)
    return [base + 1] * extra + [base] * (k - extra)


def generate(spec: SyntheticSpec) -> tuple[dict[str, str], SyntheticTruth]:
    """Render the four corpus files as strings plus the planted ground truth."""
    if spec.union_size + spec.decoy_size > spec.n_countries:
        raise ValueError("union and decoy rosters exceed the country count")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_countries
    isos = [iso_code(i) for i in range(n)]
    union = isos[: spec.union_size]

    # lay out the union cluster plus regional clusters of the remainder
    sizes = _split_sizes(n - spec.union_size, spec.cluster_size)
    centers = _regional_centers(len(sizes), spec.union_center)
    coords = _polygon(rng, spec.union_center, spec.union_size, spec.union_radius_deg)
    clusters = {iso: 0 for iso in union}
    cluster_members: list[list[str]] = []
    cursor = spec.union_size
    for c, (size, center) in enumerate(zip(sizes, centers), start=1):
        members = isos[cursor : cursor + size]
        cursor += size
        coords.extend(_polygon(rng, center, size, spec.cluster_radius_deg))
        for iso in members:
            clusters[iso] = c
        cluster_members.append(members)

    # decoy members scattered round-robin across the regional clusters
    decoy = []
    rank = 0
    while len(decoy) < spec.decoy_size:
        for members in cluster_members:
            if rank < len(members) and len(decoy) < spec.decoy_size:
                decoy.append(members[rank])
        rank += 1

    mass = np.exp(rng.normal(GDP_LN_MEAN, GDP_LN_STD, size=n))
    # directional tilt: exports get (1 + t_i - t_j), imports the mirror image,
    # so the pair sum F_ij + F_ji is tilt-free and resistance is unaffected
    tilt = rng.uniform(-spec.flow_tilt, spec.flow_tilt, size=n)
    truth = SyntheticTruth(
        isos=isos,
        union_members=list(union),
        decoy_members=list(decoy),
        clusters=clusters,
        mass={isos[i]: float(mass[i]) for i in range(n)},
        tilt={isos[i]: float(tilt[i]) for i in range(n)},
    )

    union_set = frozenset(union)
    decoy_set = frozenset(decoy)
    log_m = spec.alpha * np.log(mass)
    flow = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = max(great_circle_distance(coords[i], coords[j]), 1.0)
            same_union = (isos[i] in union_set and isos[j] in union_set) or (
                isos[i] in decoy_set and isos[j] in decoy_set
            )
            cross_region = clusters[isos[i]] != clusters[isos[j]]
            if cross_region and not same_union and rng.random() < spec.cat2_prob:
                ln_r = rng.normal(spec.cat2_mu, spec.cat2_sigma)
                truth.category2_pairs.add((isos[i], isos[j]))
            else:
                ln_r = (
                    spec.intercept
                    + spec.elasticity * math.log(d)
                    + rng.normal(0.0, spec.sigma1)
                )
                if same_union:
                    ln_r -= spec.union_discount
            truth.ln_resistance[(isos[i], isos[j])] = float(ln_r)
            base = math.exp(log_m[i] + log_m[j] - ln_r)
            for a, b in ((i, j), (j, i)):
                eps = math.exp(rng.normal(spec.eps_mu, spec.eps_sigma))
                flow[a, b] = max(base * (1.0 + tilt[a] - tilt[b]) - eps, 0.0)

    # flows file: importer-preferred merge sees the import row first
    flow_lines = ["reporter,partner,year,direction,value_usd"]
    for i in range(n):
        for j in range(n):
            if i == j or flow[i, j] < spec.min_flow:
                continue
            u = rng.random()
            both, imp_only, _ = spec.coverage
            value = flow[i, j]
            if u < both:
                flow_lines.append(
                    f"{isos[j]},{isos[i]},{spec.year},import,{float(value)!r}"
                )
                flow_lines.append(
                    f"{isos[i]},{isos[j]},{spec.year},export,{float(value * 0.98)!r}"
                )
            elif u < both + imp_only:
                flow_lines.append(
                    f"{isos[j]},{isos[i]},{spec.year},import,{float(value)!r}"
                )
            else:
                flow_lines.append(
                    f"{isos[i]},{isos[j]},{spec.year},export,{float(value)!r}"
                )

    gdp_gaps = set(
        int(k) for k in rng.choice(n, size=spec.gdp_gap_count, replace=False)
    ) if spec.gdp_gap_count else set()
    gdp_lines = ["iso,year,gdp_usd"]
    for i in range(n):
        if i in gdp_gaps:
            continue
        gdp_lines.append(f"{isos[i]},{spec.year},{float(mass[i])!r}")

    coord_lines = ["iso,name,mean_lat,mean_lon"]
    for i in range(n):
        coord_lines.append(
            f"{isos[i]},Country {isos[i]},{float(coords[i][0])!r},{float(coords[i][1])!r}"
        )

    union_lines = [
        f"{spec.union_name},{';'.join(union)}",
        f"{spec.decoy_name},{';'.join(decoy)}",
    ]

    files = {
        "flows.csv": "\n".join(flow_lines) + "\n",
        "gdp.csv": "\n".join(gdp_lines) + "\n",
        "coordinates.csv": "\n".join(coord_lines) + "\n",
        "unions.csv": "\n".join(union_lines) + "\n",
    }
    return files, truth


def bundled_corpus_dir() -> Path:
    """Directory of the packaged 20-country corpus (four CSVs plus config.json)."""
    return Path(str(resources.files("tradepurity").joinpath("data", "synthetic")))


def write_corpus(out_dir, spec: SyntheticSpec | None = None) -> tuple[dict[str, Path], SyntheticTruth]:
    """Write the four corpus files under out_dir; returns their paths and truth."""
    spec = spec or SyntheticSpec()
    files, truth = generate(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in files.items():
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        paths[name] = path
    return paths, truth


def planted_mixture_sample(
    seed: int,
    n_pairs: int = 5000,
    a: float = 2.0,
    b: float = 0.9,
    sigma1: float = 0.3,
    mu: float = 12.0,
    sigma2: float = 1.0,
    mix: float = 0.5,
    ln_d_range: tuple[float, float] = (2.0, 8.0),
):
    """Labeled two-category pair sample for EM recovery tests."""
    rng = np.random.default_rng(seed)
    ln_d = rng.uniform(*ln_d_range, size=n_pairs)
    labels = rng.random(n_pairs) < mix
    ln_r = np.where(
        labels,
        a + b * ln_d + rng.normal(0.0, sigma1, n_pairs),
        rng.normal(mu, sigma2, n_pairs),
    )
    return ln_r, ln_d, labels


def planted_gravity_panel(
    seed: int,
    n: int = 60,
    mu: float = 0.4,
    sigma: float = 0.01,
    alpha: float = 1.0,
):
    """Masses and flows generated from the gravity-with-error relation.

    Pair resistance is planted at (m_i m_j)^(alpha/2) so the gravity-predicted
    flow stays far above the error scale and the recovered error distribution
    is centered on the planted one.
    """
    rng = np.random.default_rng(seed)
    mass = rng.uniform(5.0, 50.0, size=n)
    log_m = alpha * np.log(mass)
    ln_gravity = log_m[:, None] + log_m[None, :]
    ln_resist = ln_gravity / 2.0
    eps = np.exp(rng.normal(mu, sigma, size=(n, n)))
    flow = np.exp(ln_gravity - ln_resist) - eps
    np.fill_diagonal(flow, 0.0)
    if np.any(flow < 0):
        raise ValueError("planted design produced a negative flow; adjust scales")
    return mass, flow
