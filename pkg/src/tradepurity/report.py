"""Plot-ready tables and summaries distilled from fitted stage outputs.

Produces the union resistance comparison table, per-country TPI scatter data
with trade-balance labels, histogram/density data for resistance and TPI
distributions, and a schema-versioned machine-readable summary document.
Nothing here renders images; every artifact is CSV or JSON.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"

#: Stages whose outputs the summary document embeds when they ran.
_STAGE_SECTIONS = {"gravity": "gravity", "mixture": "mixture", "network": "network"}

SUMMARY_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "tradepurity yearly summary",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "schema_version",
        "year",
        "stages_run",
        "gravity",
        "mixture",
        "tpi",
        "network",
        "files",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "year": {"type": "integer"},
        "stages_run": {
            "type": "array",
            "items": {
                "enum": ["ingest", "gravity", "mixture", "network", "report"]
            },
        },
        "gravity": {
            "type": ["object", "null"],
            "required": ["alpha", "scale", "mu", "sigma", "expected_eps", "excluded_pair_count"],
        },
        "mixture": {
            "type": ["object", "null"],
            "required": ["a", "b", "sigma1", "mu", "sigma2", "iterations", "converged", "loglik_final"],
        },
        "tpi": {
            "type": ["object", "null"],
            "required": ["mean", "n_countries", "excluded"],
        },
        "network": {
            "type": ["object", "null"],
            "required": ["q", "n_communities", "alpha_s", "seed", "mean_clustering", "ei_degree", "ei_weight"],
        },
        "files": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


class ReportError(ValueError):
    """Invalid report inputs or missing stage outputs."""


@dataclass(frozen=True)
class UnionResistanceRow:
    """Mean ln r within a union, between it and the rest, and worldwide."""

    year: int
    union: str
    mean_ln_r_member: float
    mean_ln_r_others: float | None
    world_mean: float
    member_pairs: int
    other_pairs: int

    @property
    def full_coverage(self) -> bool:
        """True when the union spans the whole panel, so no mixed pairs exist."""
        return self.other_pairs == 0


@dataclass
class UnionResistanceTable:
    rows: list[UnionResistanceRow]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["year,union,member_mean,others_mean,world_mean,member_pairs,other_pairs"]
        for r in self.rows:
            others = "" if r.mean_ln_r_others is None else f"{r.mean_ln_r_others:.4f}"
            lines.append(
                f"{r.year},{r.union},{r.mean_ln_r_member:.4f},{others},"
                f"{r.world_mean:.4f},{r.member_pairs},{r.other_pairs}"
            )
        return "\n".join(lines) + "\n"


def union_resistance_table(rmat, unions) -> UnionResistanceTable:
    """Per-union mean ln r over member pairs and member-nonmember pairs.

    Unions with fewer than two panel members are skipped and noted; a union
    covering the whole panel gets an undefined "others" mean and is flagged
    through the row's ``full_coverage`` property.
    """
    isos = list(rmat.isos)
    index = {iso: k for k, iso in enumerate(isos)}
    n = len(isos)
    iu = np.triu_indices(n, k=1)
    world_mean = float(np.mean(rmat.ln_r[iu]))

    rows = []
    skipped = []
    for name in unions.names():
        members = {iso for iso in unions.members(name) if iso in index}
        if len(members) < 2:
            reason = f"only {len(members)} of its members are in the panel"
            skipped.append((name, reason))
            logger.warning("union %s skipped: %s", name, reason)
            continue
        member_vals = []
        other_vals = []
        for i in range(n):
            for j in range(i + 1, n):
                a_in = isos[i] in members
                b_in = isos[j] in members
                if a_in and b_in:
                    member_vals.append(rmat.ln_r[i, j])
                elif a_in or b_in:
                    other_vals.append(rmat.ln_r[i, j])
        others_mean = float(np.mean(other_vals)) if other_vals else None
        if others_mean is None:
            logger.warning("union %s covers the whole panel; others mean undefined", name)
        rows.append(
            UnionResistanceRow(
                year=rmat.year,
                union=name,
                mean_ln_r_member=float(np.mean(member_vals)),
                mean_ln_r_others=others_mean,
                world_mean=world_mean,
                member_pairs=len(member_vals),
                other_pairs=len(other_vals),
            )
        )
    return UnionResistanceTable(rows=rows, skipped=skipped)


@dataclass(frozen=True)
class TpiScatterPoint:
    """One country in one union: purity inside vs outside plus trade balance."""

    iso: str
    union: str
    tpi_inside: float
    tpi_outside: float
    net_flow: float
    balance_label: str

    def __post_init__(self):
        expected = "surplus" if self.net_flow >= 0 else "deficit"
        if self.balance_label != expected:
            raise ReportError(
                f"{self.iso}: balance label {self.balance_label} contradicts net flow {self.net_flow}"
            )


def tpi_union_scatter(resp, unions, flow: np.ndarray) -> list[TpiScatterPoint]:
    """Scatter data: per union member, mean tau inside vs outside the union.

    `flow` is the merged directional matrix aligned with `resp.isos`
    (entry [i, j] = flow from i to j); net flow is total exports minus total
    imports. Members without a defined inside or outside mean are skipped.
    """
    isos = list(resp.isos)
    n = len(isos)
    flow = np.asarray(flow, dtype=float)
    if flow.shape != (n, n):
        raise ReportError(f"flow matrix must be {n}x{n}, got {flow.shape}")
    index = {iso: k for k, iso in enumerate(isos)}

    points = []
    for name in unions.names():
        members = {iso for iso in unions.members(name) if iso in index}
        for iso in sorted(members):
            i = index[iso]
            inside = [
                resp.tau[i, index[m]]
                for m in members
                if m != iso and np.isfinite(resp.tau[i, index[m]])
            ]
            outside = [
                resp.tau[i, j]
                for j in range(n)
                if j != i and isos[j] not in members and np.isfinite(resp.tau[i, j])
            ]
            if not inside or not outside:
                logger.warning(
                    "scatter point %s/%s skipped: no %s partners with defined tau",
                    name, iso, "inside" if not inside else "outside",
                )
                continue
            net = float(np.sum(flow[i, :]) - np.sum(flow[:, i]))
            points.append(
                TpiScatterPoint(
                    iso=iso,
                    union=name,
                    tpi_inside=float(np.mean(inside)),
                    tpi_outside=float(np.mean(outside)),
                    net_flow=net,
                    balance_label="surplus" if net >= 0 else "deficit",
                )
            )
    return points


def scatter_to_csv(points: list[TpiScatterPoint]) -> str:
    lines = ["iso,union,tpi_inside,tpi_outside,net_flow,balance"]
    for p in points:
        lines.append(
            f"{p.iso},{p.union},{p.tpi_inside:.4f},{p.tpi_outside:.4f},"
            f"{p.net_flow:.4f},{p.balance_label}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class DistributionReport:
    """Equal-width histogram plus moments, optionally with a mixture density."""

    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float
    std: float
    density_x: np.ndarray | None = None
    density_y: np.ndarray | None = None

    def histogram_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for k in range(len(self.counts)):
            lines.append(
                f"{self.bin_edges[k]:.4f},{self.bin_edges[k + 1]:.4f},{int(self.counts[k])}"
            )
        return "\n".join(lines) + "\n"

    def density_csv(self) -> str:
        if self.density_x is None:
            raise ReportError("no fitted density attached to this distribution report")
        lines = ["x,density"]
        for x, y in zip(self.density_x, self.density_y):
            lines.append(f"{x:.6f},{float(y)!r}")
        return "\n".join(lines) + "\n"


def _mixture_density(grid: np.ndarray, params, ln_d: np.ndarray) -> np.ndarray:
    """Equal-weight two-component density marginalized over the observed ln d."""
    s1, s2 = params.sigma1, params.sigma2
    means1 = params.a + params.b * ln_d
    norm1 = 1.0 / (s1 * math.sqrt(2.0 * math.pi))
    norm2 = 1.0 / (s2 * math.sqrt(2.0 * math.pi))
    out = np.empty(grid.size)
    # chunk the grid so the (grid x pairs) broadcast stays small
    for lo in range(0, grid.size, 512):
        block = grid[lo : lo + 512, None]
        comp1 = np.mean(norm1 * np.exp(-0.5 * ((block - means1[None, :]) / s1) ** 2), axis=1)
        comp2 = norm2 * np.exp(-0.5 * ((grid[lo : lo + 512] - params.mu) / s2) ** 2)
        out[lo : lo + 512] = 0.5 * comp1 + 0.5 * comp2
    return out


def distribution_report(values, bins: int, params=None, ln_d=None) -> DistributionReport:
    """Histogram and moments of a value vector, plus an overlay-ready density.

    When mixture `params` and the pair `ln_d` vector are given, the fitted
    two-component density is evaluated on a grid extending past the histogram
    range far enough to integrate to one.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ReportError("distribution_report needs a nonempty value vector")
    if not isinstance(bins, (int, np.integer)) or bins < 1:
        raise ReportError(f"bins must be a positive integer, got {bins!r}")
    counts, edges = np.histogram(values, bins=int(bins))

    density_x = density_y = None
    if params is not None:
        if ln_d is None:
            raise ReportError("a fitted density needs the pair ln_d vector")
        ln_d = np.asarray(ln_d, dtype=float)
        means1 = params.a + params.b * ln_d
        lo = min(float(edges[0]), float(means1.min()) - 8 * params.sigma1, params.mu - 8 * params.sigma2)
        hi = max(float(edges[-1]), float(means1.max()) + 8 * params.sigma1, params.mu + 8 * params.sigma2)
        # step fine relative to the narrowest component so trapezoid sums are exact
        step = min(params.sigma1, params.sigma2) / 2.0
        n_points = int(math.ceil((hi - lo) / step)) + 1
        if n_points > 100_000:
            n_points = 100_000
            logger.warning("density grid capped at %d points; components are very narrow", n_points)
        density_x = np.linspace(lo, hi, max(n_points, 2))
        density_y = _mixture_density(density_x, params, ln_d)

    return DistributionReport(
        bin_edges=edges,
        counts=counts,
        mean=float(np.mean(values)),
        median=float(np.median(values)),
        std=float(np.std(values)),
        density_x=density_x,
        density_y=density_y,
    )


def summary_report(
    year: int,
    stages_run: list[str],
    gravity: dict | None = None,
    mixture: dict | None = None,
    tpi: dict | None = None,
    network: dict | None = None,
    files: dict | None = None,
) -> dict:
    """Assemble the per-year summary document from serialized stage outputs.

    A stage listed in `stages_run` must come with its output section; stages
    that did not run produce explicit nulls so partial pipelines stay valid.
    """
    sections = {"gravity": gravity, "mixture": mixture, "network": network}
    for stage, section in _STAGE_SECTIONS.items():
        if stage in stages_run and sections[section] is None:
            raise ReportError(f"stage '{stage}' ran but its output section is missing")
    if "mixture" in stages_run and tpi is None:
        raise ReportError("stage 'mixture' ran but the tpi section is missing")
    known = {"ingest", "gravity", "mixture", "network", "report"}
    unknown = [s for s in stages_run if s not in known]
    if unknown:
        raise ReportError(f"unknown stages in stages_run: {unknown}")

    return {
        "schema_version": SCHEMA_VERSION,
        "year": int(year),
        "stages_run": list(stages_run),
        "gravity": gravity if "gravity" in stages_run else None,
        "mixture": mixture if "mixture" in stages_run else None,
        "tpi": tpi if "mixture" in stages_run else None,
        "network": network if "network" in stages_run else None,
        "files": dict(files or {}),
    }


def summary_to_json(doc: dict) -> str:
    """Canonical serialization: two identical runs give byte-identical text."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
