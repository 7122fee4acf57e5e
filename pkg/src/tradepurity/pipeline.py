"""Configuration and stage orchestration: ingest through report, per year.

Each stage reads its predecessors' serialized artifacts from the output
directory and writes its own, so any stage can be rerun in isolation. Stage
artifacts are content-addressed: a `<stage>.hash` marker records a digest of
the stage's configuration subset and input digests, and a stage is skipped
only when its marker matches and all its outputs exist. Identical configs and
inputs therefore give byte-identical outputs, and stale artifacts are never
silently reused.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corpus, gravity, mixture, netgraph, report

logger = logging.getLogger(__name__)

STAGES = ("ingest", "gravity", "mixture", "network", "report")

_DEPS = {
    "ingest": (),
    "gravity": ("ingest",),
    "mixture": ("gravity",),
    "network": ("gravity",),
    "report": ("mixture",),  # network joins the report only when fresh
}

_OUTPUTS = {
    "ingest": ("panel.json",),
    "gravity": ("resistance.csv", "gravity.json"),
    "mixture": ("mixture.json", "tau.csv", "tpi.csv"),
    "network": ("edges.csv", "partition.csv", "similarity.csv", "network.json"),
    "report": (
        "union_table.csv",
        "scatter.csv",
        "resistance_hist.csv",
        "resistance_density.csv",
        "tpi_hist.csv",
        "summary.json",
    ),
}

#: Documented configuration keys (the file is a flat JSON object of these).
CONFIG_KEYS = {
    "flows": "path to the flow CSV (reporter,partner,year,direction,value_usd)",
    "gdp": "path to the GDP CSV (iso,year,gdp_usd)",
    "coordinates": "path to the coordinates CSV (iso,name,mean_lat,mean_lon)",
    "unions": "path to the union roster CSV (name,iso1;iso2;...)",
    "years": "list of years to process",
    "alpha": 'gravity GDP exponent: a positive number, or "search"',
    "scale": "gravity proportionality constant (default 1.0)",
    "alpha_s": "disparity-filter significance level in (0, 1)",
    "seed": "community-detection seed",
    "em_tol": "EM convergence tolerance (> 0)",
    "pml_tol": "error-model convergence tolerance (> 0)",
    "bins": "histogram bin count (>= 1)",
    "out_dir": "output directory",
    "cache_dir": "cache directory for fetched data",
    "url_templates": "optional source -> URL template overrides for fetch",
}

_PATH_KEYS = ("flows", "gdp", "coordinates", "unions", "out_dir", "cache_dir")


class PipelineError(ValueError):
    """Invalid configuration or orchestration request."""


@dataclass
class PipelineConfig:
    """Validated knobs of one pipeline run; see CONFIG_KEYS for the file schema."""

    flows: Path | None = None
    gdp: Path | None = None
    coordinates: Path | None = None
    unions: Path | None = None
    years: list[int] = field(default_factory=list)
    alpha: float | str = 1.0
    scale: float = 1.0
    alpha_s: float = 0.05
    seed: int = 42
    em_tol: float = 1e-6
    pml_tol: float = 1e-8
    bins: int = 30
    out_dir: Path = Path("out")
    cache_dir: Path = Path("cache")
    url_templates: dict[str, str] = field(default_factory=dict)
    source_text: str | None = None  # verbatim config file contents, if loaded
    unknown_keys: list[str] = field(default_factory=list)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PipelineError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise PipelineError(f"{path}: config must be a JSON object")
        config = cls(source_text=text)
        known = {f.name for f in fields(cls)} - {"source_text", "unknown_keys"}
        for key, value in doc.items():
            if key not in known:
                config.unknown_keys.append(key)
                continue
            if key in _PATH_KEYS and value is not None:
                value = Path(value)
                if not value.is_absolute():
                    value = (path.parent / value).resolve()
            setattr(config, key, value)
        return config

    def to_json(self) -> str:
        doc = {}
        for f in fields(self):
            if f.name in ("source_text", "unknown_keys"):
                continue
            value = getattr(self, f.name)
            doc[f.name] = str(value) if isinstance(value, Path) else value
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def validate(config: PipelineConfig) -> list[str]:
    """All config invariants and path existence; returns violations, touches no network."""
    violations = []
    for key in ("flows", "gdp", "coordinates", "unions"):
        path = getattr(config, key)
        if path is None:
            violations.append(f"{key}: data path is not set")
        elif not Path(path).is_file():
            violations.append(f"{key}: path {path} does not exist")
    if not config.years:
        violations.append("years: year range must be non-empty")
    elif not all(isinstance(y, int) and not isinstance(y, bool) for y in config.years):
        violations.append("years: every entry must be an integer")
    if config.alpha != "search":
        if not isinstance(config.alpha, (int, float)) or isinstance(config.alpha, bool) \
                or not config.alpha > 0:
            violations.append(f'alpha: must be a positive number or "search", got {config.alpha!r}')
    if not (isinstance(config.scale, (int, float)) and config.scale > 0):
        violations.append(f"scale: must be positive, got {config.scale!r}")
    if not (isinstance(config.alpha_s, (int, float)) and 0.0 < config.alpha_s < 1.0):
        violations.append(f"alpha_s: must lie strictly between 0 and 1, got {config.alpha_s!r}")
    for key in ("em_tol", "pml_tol"):
        tol = getattr(config, key)
        if not (isinstance(tol, (int, float)) and tol > 0):
            violations.append(f"{key}: tolerance must be > 0, got {tol!r}")
    if not (isinstance(config.bins, int) and not isinstance(config.bins, bool) and config.bins >= 1):
        violations.append(f"bins: must be an integer >= 1, got {config.bins!r}")
    if not isinstance(config.seed, int) or isinstance(config.seed, bool):
        violations.append(f"seed: must be an integer, got {config.seed!r}")
    for key in config.unknown_keys:
        violations.append(f"{key}: unknown configuration key")
    return violations


# --- content addressing ------------------------------------------------------


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_digest(path: Path) -> str:
    return _digest(Path(path).read_bytes())


def _stage_digest(stage: str, payload: dict) -> str:
    body = json.dumps({"stage": stage, **payload}, sort_keys=True)
    return _digest(body.encode("utf-8"))


def _artifact_digests(ydir: Path, stage: str) -> dict[str, str]:
    return {name: _file_digest(ydir / name) for name in _OUTPUTS[stage]}


def _stage_payload(config: PipelineConfig, year: int, ydir: Path, stage: str) -> dict:
    """Configuration subset plus input digests that address one stage's outputs."""
    if stage == "ingest":
        return {
            "year": year,
            "inputs": {
                key: _file_digest(getattr(config, key))
                for key in ("flows", "gdp", "coordinates", "unions")
            },
        }
    if stage == "gravity":
        return {
            "alpha": config.alpha,
            "scale": config.scale,
            "pml_tol": config.pml_tol,
            "em_tol": config.em_tol if config.alpha == "search" else None,
            "inputs": _artifact_digests(ydir, "ingest"),
        }
    if stage == "mixture":
        return {
            "em_tol": config.em_tol,
            "inputs": {**_artifact_digests(ydir, "ingest"), **_artifact_digests(ydir, "gravity")},
        }
    if stage == "network":
        return {
            "alpha_s": config.alpha_s,
            "seed": config.seed,
            "inputs": {**_artifact_digests(ydir, "ingest"), **_artifact_digests(ydir, "gravity")},
        }
    if stage == "report":
        inputs = {
            **_artifact_digests(ydir, "ingest"),
            **_artifact_digests(ydir, "gravity"),
            **_artifact_digests(ydir, "mixture"),
        }
        if _is_fresh(config, year, ydir, "network"):
            inputs.update(_artifact_digests(ydir, "network"))
        return {"bins": config.bins, "inputs": inputs}
    raise PipelineError(f"unknown stage {stage!r}")


def _hash_path(ydir: Path, stage: str) -> Path:
    return ydir / f"{stage}.hash"


def _is_fresh(config: PipelineConfig, year: int, ydir: Path, stage: str) -> bool:
    """A stage is fresh iff all outputs exist and the stored digest matches."""
    marker = _hash_path(ydir, stage)
    if not marker.is_file():
        return False
    if not all((ydir / name).is_file() for name in _OUTPUTS[stage]):
        return False
    try:
        expected = _stage_digest(stage, _stage_payload(config, year, ydir, stage))
    except FileNotFoundError:
        return False  # a predecessor artifact vanished; cannot certify
    return marker.read_text(encoding="utf-8").strip() == expected


# --- stage bodies ------------------------------------------------------------


def _load_panel(ydir: Path) -> corpus.CountryPanel:
    return corpus.CountryPanel.from_json((ydir / "panel.json").read_text(encoding="utf-8"))


def _load_resistance(ydir: Path) -> gravity.ResistanceMatrix:
    return gravity.ResistanceMatrix.from_csv(
        (ydir / "resistance.csv").read_text(encoding="utf-8"),
        (ydir / "gravity.json").read_text(encoding="utf-8"),
    )


def _pair_ln_d(panel: corpus.CountryPanel) -> np.ndarray:
    iu = np.triu_indices(panel.n, k=1)
    return np.log(panel.distance[iu])


def _run_ingest(config: PipelineConfig, year: int, ydir: Path) -> None:
    flows = corpus.load_flows(config.flows, year)
    gdp_table, gdp_report = corpus.load_gdp(config.gdp)
    coordinates = corpus.load_coordinates(config.coordinates)
    unions = corpus.load_unions(config.unions)
    panel = corpus.build_panel(year, flows, gdp_table, coordinates, unions)
    logger.info(
        "year %d: panel of %d countries (%d excluded, %d flow rows rejected, %d gdp rows rejected)",
        year, panel.n, len(panel.exclusions), len(flows.report.rejected), len(gdp_report.rejected),
    )
    (ydir / "panel.json").write_text(panel.to_json(), encoding="utf-8")


def _run_gravity(config: PipelineConfig, year: int, ydir: Path) -> None:
    panel = _load_panel(ydir)
    if config.alpha == "search":
        search = mixture.estimate_alpha(panel, scale=config.scale, em_tol=config.em_tol)
        alpha = search.alpha
        logger.info("year %d: alpha search settled on %.4f (flat=%s)", year, alpha, search.flat_objective)
    else:
        alpha = float(config.alpha)
    params = gravity.GravityParams(alpha=alpha, scale=config.scale)
    fit = gravity.fit_error_params(panel, params, tol=config.pml_tol)
    rmat = gravity.resistance_matrix(panel, fit, params)
    (ydir / "resistance.csv").write_text(rmat.to_csv(), encoding="utf-8")
    (ydir / "gravity.json").write_text(rmat.sidecar_json(), encoding="utf-8")


def _run_mixture(config: PipelineConfig, year: int, ydir: Path) -> None:
    panel = _load_panel(ydir)
    rmat = _load_resistance(ydir)
    values = rmat.pair_values()
    ln_d = _pair_ln_d(panel)
    fit = mixture.fit_em(values, ln_d, tol=config.em_tol)
    ks = mixture.ks_test(fit, values, ln_d) if fit.converged else None
    resp = mixture.Responsibilities.from_pair_values(rmat.isos, fit.tau)
    tpi_vec = mixture.tpi(resp, year=year)
    (ydir / "mixture.json").write_text(mixture.fit_to_json(year, fit, ks), encoding="utf-8")
    (ydir / "tau.csv").write_text(resp.to_csv(), encoding="utf-8")
    (ydir / "tpi.csv").write_text(tpi_vec.to_csv(), encoding="utf-8")


def _run_network(config: PipelineConfig, year: int, ydir: Path) -> None:
    panel = _load_panel(ydir)
    rmat = _load_resistance(ydir)
    graph = netgraph.build_graph(rmat)
    backbone = netgraph.disparity_backbone(graph, config.alpha_s)
    partition = netgraph.louvain(backbone, seed=config.seed)
    mean_clust = netgraph.mean_clustering(backbone)
    ei_backbone = netgraph.ei_indices(backbone, partition.assignment)
    ei_full = netgraph.ei_indices(graph, partition.assignment)
    similarity = netgraph.jaccard_matrix(panel.unions, partition)
    (ydir / "edges.csv").write_text(netgraph.backbone_to_csv(graph, backbone), encoding="utf-8")
    (ydir / "partition.csv").write_text(netgraph.partition_to_csv(partition), encoding="utf-8")
    (ydir / "similarity.csv").write_text(similarity.to_csv(), encoding="utf-8")
    (ydir / "network.json").write_text(
        netgraph.partition_summary_json(partition, config.alpha_s, mean_clust, ei_backbone, ei_full),
        encoding="utf-8",
    )


def _run_report(config: PipelineConfig, year: int, ydir: Path) -> None:
    panel = _load_panel(ydir)
    rmat = _load_resistance(ydir)
    mixture_doc = json.loads((ydir / "mixture.json").read_text(encoding="utf-8"))
    resp = mixture.Responsibilities.from_csv((ydir / "tau.csv").read_text(encoding="utf-8"))
    params = mixture.MixtureParams(
        a=mixture_doc["a"],
        b=mixture_doc["b"],
        sigma1=mixture_doc["sigma1"],
        mu=mixture_doc["mu"],
        sigma2=mixture_doc["sigma2"],
    )
    tpi_values = {}
    for line in (ydir / "tpi.csv").read_text(encoding="utf-8").splitlines()[1:]:
        iso, value = line.split(",")
        tpi_values[iso] = float(value)

    table = report.union_resistance_table(rmat, panel.unions)
    points = report.tpi_union_scatter(resp, panel.unions, panel.flow)
    resistance_dist = report.distribution_report(
        rmat.pair_values(), config.bins, params=params, ln_d=_pair_ln_d(panel)
    )
    tpi_dist = report.distribution_report(list(tpi_values.values()), config.bins)

    (ydir / "union_table.csv").write_text(table.to_csv(), encoding="utf-8")
    (ydir / "scatter.csv").write_text(report.scatter_to_csv(points), encoding="utf-8")
    (ydir / "resistance_hist.csv").write_text(resistance_dist.histogram_csv(), encoding="utf-8")
    (ydir / "resistance_density.csv").write_text(resistance_dist.density_csv(), encoding="utf-8")
    (ydir / "tpi_hist.csv").write_text(tpi_dist.histogram_csv(), encoding="utf-8")

    network_fresh = _is_fresh(config, year, ydir, "network")
    stages_run = ["ingest", "gravity", "mixture"] + (["network"] if network_fresh else []) + ["report"]
    files = {name: f"{year}/{name}" for s in stages_run if s != "report" for name in _OUTPUTS[s]}
    files.update({name: f"{year}/{name}" for name in _OUTPUTS["report"] if name != "summary.json"})
    mean_tpi = float(np.mean(list(tpi_values.values()))) if tpi_values else float("nan")
    excluded = sorted(set(rmat.isos) - set(tpi_values))
    doc = report.summary_report(
        year,
        stages_run,
        gravity=json.loads((ydir / "gravity.json").read_text(encoding="utf-8")),
        mixture=mixture_doc,
        tpi={"mean": mean_tpi, "n_countries": len(tpi_values), "excluded": excluded},
        network=json.loads((ydir / "network.json").read_text(encoding="utf-8")) if network_fresh else None,
        files=files,
    )
    (ydir / "summary.json").write_text(report.summary_to_json(doc), encoding="utf-8")


_STAGE_BODIES = {
    "ingest": _run_ingest,
    "gravity": _run_gravity,
    "mixture": _run_mixture,
    "network": _run_network,
    "report": _run_report,
}


# --- orchestration -----------------------------------------------------------


@dataclass
class RunResult:
    """Outcome of one run(): exit status plus what happened per (year, stage)."""

    status: int
    violations: list[str] = field(default_factory=list)
    ran: list[tuple[int, str]] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    failures: list[tuple[int, str, str]] = field(default_factory=list)


def _closure(stages) -> list[str]:
    requested = set(stages)
    unknown = requested - set(STAGES)
    if unknown:
        raise PipelineError(f"unknown stages: {sorted(unknown)}; expected a subset of {list(STAGES)}")
    while True:
        expanded = set(requested)
        for stage in requested:
            expanded.update(_DEPS[stage])
        if expanded == requested:
            return [s for s in STAGES if s in requested]
        requested = expanded


def run(config: PipelineConfig, stages=None) -> RunResult:
    """Execute the requested stages (dependencies included) for every year.

    Config violations return status 1 before anything is written. A stage
    failure writes a `<stage>.failed` marker, preserves partial outputs,
    skips that year's downstream stages, and yields status 2.
    """
    violations = validate(config)
    if violations:
        for violation in violations:
            logger.error("config: %s", violation)
        return RunResult(status=1, violations=violations)

    order = _closure(stages if stages is not None else STAGES)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # durable record of what produced this directory, byte-for-byte
    (out_dir / "config.json").write_text(
        config.source_text if config.source_text is not None else config.to_json(),
        encoding="utf-8",
    )

    result = RunResult(status=0)
    for year in config.years:
        ydir = out_dir / str(year)
        ydir.mkdir(parents=True, exist_ok=True)
        broken = False
        for stage in order:
            if broken:
                result.skipped.append((year, stage))
                continue
            missing = [d for d in _DEPS[stage] if d not in order and not _is_fresh(config, year, ydir, d)]
            if missing:
                message = f"stage '{stage}' needs fresh '{missing[0]}' outputs; run that stage first"
                _hash_path(ydir, stage).unlink(missing_ok=True)
                (ydir / f"{stage}.failed").write_text(message + "\n", encoding="utf-8")
                result.failures.append((year, stage, message))
                broken = True
                continue
            if _is_fresh(config, year, ydir, stage):
                logger.info("year %d: %s is fresh, skipping", year, stage)
                result.skipped.append((year, stage))
                continue
            _hash_path(ydir, stage).unlink(missing_ok=True)
            try:
                _STAGE_BODIES[stage](config, year, ydir)
            except Exception as exc:
                message = f"{type(exc).__name__}: {exc}"
                (ydir / f"{stage}.failed").write_text(message + "\n", encoding="utf-8")
                logger.error("year %d: stage %s failed: %s", year, stage, message)
                result.failures.append((year, stage, message))
                broken = True
                continue
            (ydir / f"{stage}.failed").unlink(missing_ok=True)
            marker = _stage_digest(stage, _stage_payload(config, year, ydir, stage))
            _hash_path(ydir, stage).write_text(marker + "\n", encoding="utf-8")
            result.ran.append((year, stage))
    result.status = 2 if result.failures else 0
    return result
