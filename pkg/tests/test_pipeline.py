"""Configuration, staging, caching, and CLI behavior of the orchestrator."""

import hashlib
import json
from pathlib import Path

import jsonschema
import pytest

from tradepurity import cli, pipeline
from tradepurity.pipeline import PipelineConfig, PipelineError
from tradepurity.report import SUMMARY_SCHEMA
from tradepurity.synthetic import SyntheticSpec, write_corpus

ALL_OUTPUTS = [name for stage in pipeline.STAGES for name in pipeline._OUTPUTS[stage]]


def write_config(base: Path, spec: SyntheticSpec | None = None, **overrides) -> Path:
    """Corpus files plus a config.json under `base`; returns the config path."""
    write_corpus(base / "data", spec)
    doc = {
        "flows": "data/flows.csv",
        "gdp": "data/gdp.csv",
        "coordinates": "data/coordinates.csv",
        "unions": "data/unions.csv",
        "years": [2011],
        "alpha": 1.0,
        "scale": 1.0,
        "alpha_s": 0.05,
        "seed": 42,
        "em_tol": 1e-6,
        "pml_tol": 1e-8,
        "bins": 24,
        "out_dir": "out",
        "cache_dir": "cache",
    }
    doc.update(overrides)
    path = base / "config.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def tree_digests(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# --- configuration -----------------------------------------------------------------


def test_config_from_file_resolves_relative_paths(tmp_path):
    cfg_path = write_config(tmp_path)
    config = PipelineConfig.from_file(cfg_path)
    assert config.flows == (tmp_path / "data" / "flows.csv").resolve()
    assert config.out_dir == (tmp_path / "out").resolve()
    assert config.years == [2011]
    assert config.unknown_keys == []
    assert pipeline.validate(config) == []


def test_config_unknown_keys_are_violations(tmp_path):
    cfg_path = write_config(tmp_path, turbo=True)
    config = PipelineConfig.from_file(cfg_path)
    assert config.unknown_keys == ["turbo"]
    violations = pipeline.validate(config)
    assert any("turbo" in v and "unknown" in v for v in violations)


def test_config_rejects_malformed_json(tmp_path):
    bad = tmp_path / "config.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(PipelineError, match="not valid JSON"):
        PipelineConfig.from_file(bad)
    lst = tmp_path / "list.json"
    lst.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(PipelineError, match="JSON object"):
        PipelineConfig.from_file(lst)


def test_validate_names_offending_fields(tmp_path):
    config = PipelineConfig(
        years=[],
        alpha=-1.0,
        scale=0.0,
        alpha_s=1.5,
        em_tol=0.0,
        pml_tol=-1e-8,
        bins=0,
        seed="lucky",
        out_dir=tmp_path / "out",
    )
    violations = pipeline.validate(config)
    text = "\n".join(violations)
    for key in ("flows", "gdp", "coordinates", "unions", "years", "alpha",
                "scale", "alpha_s", "em_tol", "pml_tol", "bins", "seed"):
        assert f"{key}:" in text
    assert 'alpha: must be a positive number or "search"' in text


def test_validate_accepts_alpha_search(tmp_path):
    cfg_path = write_config(tmp_path, alpha="search")
    assert pipeline.validate(PipelineConfig.from_file(cfg_path)) == []


def test_missing_data_path_is_reported(tmp_path):
    cfg_path = write_config(tmp_path, gdp="data/nope.csv")
    violations = pipeline.validate(PipelineConfig.from_file(cfg_path))
    assert len(violations) == 1
    assert violations[0].startswith("gdp:") and "does not exist" in violations[0]


# --- full runs ----------------------------------------------------------------------


def test_bad_config_returns_status_one_without_writing(tmp_path):
    config = PipelineConfig(out_dir=tmp_path / "out")
    result = pipeline.run(config)
    assert result.status == 1
    assert result.violations
    assert result.ran == []
    assert not (tmp_path / "out").exists()


def test_full_run_writes_every_artifact(tmp_path):
    cfg_path = write_config(tmp_path)
    config = PipelineConfig.from_file(cfg_path)
    result = pipeline.run(config)
    assert result.status == 0
    assert result.failures == []
    assert [s for _, s in result.ran] == list(pipeline.STAGES)

    ydir = tmp_path / "out" / "2011"
    for name in ALL_OUTPUTS:
        assert (ydir / name).is_file(), name
    for stage in pipeline.STAGES:
        assert (ydir / f"{stage}.hash").is_file()
        assert not (ydir / f"{stage}.failed").exists()
    # the config that produced the directory is preserved byte for byte
    assert (tmp_path / "out" / "config.json").read_text() == cfg_path.read_text()

    doc = json.loads((ydir / "summary.json").read_text())
    jsonschema.validate(doc, SUMMARY_SCHEMA)
    assert doc["stages_run"] == list(pipeline.STAGES)
    assert doc["network"] is not None and doc["network"]["seed"] == 42
    assert doc["files"]["resistance.csv"] == "2011/resistance.csv"


def test_rerun_skips_all_stages_and_touches_nothing(tmp_path):
    cfg_path = write_config(tmp_path)
    pipeline.run(PipelineConfig.from_file(cfg_path))
    before = tree_digests(tmp_path / "out")

    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 0
    assert result.ran == []
    assert [s for _, s in result.skipped] == list(pipeline.STAGES)
    assert tree_digests(tmp_path / "out") == before


def test_identical_inputs_give_byte_identical_outputs(tmp_path):
    digests = []
    for sub in ("one", "two"):
        base = tmp_path / sub
        base.mkdir()
        cfg_path = write_config(base)
        assert pipeline.run(PipelineConfig.from_file(cfg_path)).status == 0
        digests.append(tree_digests(base / "out"))
    assert digests[0] == digests[1]


def test_seed_change_reruns_only_network_and_report(tmp_path):
    pipeline.run(PipelineConfig.from_file(write_config(tmp_path)))
    cfg_path = write_config(tmp_path, seed=43)
    gravity_hash = (tmp_path / "out" / "2011" / "gravity.hash").read_bytes()

    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 0
    assert [s for _, s in result.ran] == ["network", "report"]
    assert [s for _, s in result.skipped] == ["ingest", "gravity", "mixture"]
    assert (tmp_path / "out" / "2011" / "gravity.hash").read_bytes() == gravity_hash
    doc = json.loads((tmp_path / "out" / "2011" / "network.json").read_text())
    assert doc["seed"] == 43


def test_edited_input_reruns_from_ingest(tmp_path):
    cfg_path = write_config(tmp_path)
    pipeline.run(PipelineConfig.from_file(cfg_path))

    # an inert edit (a duplicate flow row below the kept maximum) forces
    # ingest to rerun, but the byte-identical panel keeps downstream fresh
    flows = tmp_path / "data" / "flows.csv"
    flows.write_text(flows.read_text() + "AAA,AAB,2011,export,123.0\n", encoding="utf-8")
    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 0
    assert [s for _, s in result.ran] == ["ingest"]
    assert [s for _, s in result.skipped] == ["gravity", "mixture", "network", "report"]

    # a real edit (one GDP value doubled) cascades through every stage
    gdp = tmp_path / "data" / "gdp.csv"
    lines = gdp.read_text().splitlines()
    iso, year, value = lines[1].split(",")
    lines[1] = f"{iso},{year},{2.0 * float(value)!r}"
    gdp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 0
    assert [s for _, s in result.ran] == list(pipeline.STAGES)


# --- stage subsets -------------------------------------------------------------------


def test_stage_subset_pulls_dependencies(tmp_path):
    cfg_path = write_config(tmp_path)
    config = PipelineConfig.from_file(cfg_path)
    result = pipeline.run(config, stages=["mixture"])
    assert result.status == 0
    assert [s for _, s in result.ran] == ["ingest", "gravity", "mixture"]
    ydir = tmp_path / "out" / "2011"
    assert (ydir / "tpi.csv").is_file()
    assert not (ydir / "edges.csv").exists()
    assert not (ydir / "summary.json").exists()


def test_report_without_network_emits_null_section(tmp_path):
    cfg_path = write_config(tmp_path)
    config = PipelineConfig.from_file(cfg_path)
    result = pipeline.run(config, stages=["report"])
    assert result.status == 0
    assert [s for _, s in result.ran] == ["ingest", "gravity", "mixture", "report"]

    doc = json.loads((tmp_path / "out" / "2011" / "summary.json").read_text())
    jsonschema.validate(doc, SUMMARY_SCHEMA)
    assert doc["network"] is None
    assert doc["stages_run"] == ["ingest", "gravity", "mixture", "report"]


def test_unknown_stage_is_rejected(tmp_path):
    config = PipelineConfig.from_file(write_config(tmp_path))
    with pytest.raises(PipelineError, match="unknown stages"):
        pipeline.run(config, stages=["teleport"])


# --- failures ------------------------------------------------------------------------


def test_ingest_failure_marks_and_blocks(tmp_path):
    cfg_path = write_config(tmp_path)
    (tmp_path / "data" / "flows.csv").write_text("wrong,header\n1,2\n", encoding="utf-8")
    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 2
    assert len(result.failures) == 1
    year, stage, message = result.failures[0]
    assert (year, stage) == (2011, "ingest")
    assert "CorpusError" in message
    assert [s for _, s in result.skipped] == ["gravity", "mixture", "network", "report"]

    ydir = tmp_path / "out" / "2011"
    assert "CorpusError" in (ydir / "ingest.failed").read_text()
    assert not (ydir / "ingest.hash").exists()


def test_midstream_failure_preserves_upstream_outputs(tmp_path):
    # four countries give six pairs, below the mixture stage's minimum
    spec = SyntheticSpec(n_countries=4, union_size=2, decoy_size=0)
    cfg_path = write_config(tmp_path, spec=spec)
    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 2
    (failure,) = result.failures
    assert failure[:2] == (2011, "mixture")
    assert "MixtureError" in failure[2]
    assert [s for _, s in result.skipped] == ["network", "report"]

    ydir = tmp_path / "out" / "2011"
    assert (ydir / "resistance.csv").is_file()
    assert (ydir / "gravity.hash").is_file()
    assert (ydir / "mixture.failed").is_file()
    assert not (ydir / "mixture.hash").exists()
    assert not (ydir / "summary.json").exists()

    # upstream stages stay cached on the next attempt; the failure repeats
    again = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert again.status == 2
    assert [s for _, s in again.skipped[:2]] == ["ingest", "gravity"]


def test_failure_then_fix_recovers(tmp_path):
    cfg_path = write_config(tmp_path)
    good = (tmp_path / "data" / "flows.csv").read_text()
    (tmp_path / "data" / "flows.csv").write_text("wrong,header\n", encoding="utf-8")
    assert pipeline.run(PipelineConfig.from_file(cfg_path)).status == 2

    (tmp_path / "data" / "flows.csv").write_text(good, encoding="utf-8")
    result = pipeline.run(PipelineConfig.from_file(cfg_path))
    assert result.status == 0
    assert not (tmp_path / "out" / "2011" / "ingest.failed").exists()
    assert (tmp_path / "out" / "2011" / "summary.json").is_file()


# --- command line --------------------------------------------------------------------


def test_parse_years_forms():
    assert cli.parse_years("2007") == [2007]
    assert cli.parse_years("2007,2009") == [2007, 2009]
    assert cli.parse_years("2007-2010") == [2007, 2008, 2009, 2010]
    assert cli.parse_years("2007-2008,2011") == [2007, 2008, 2011]
    with pytest.raises(ValueError, match="backwards"):
        cli.parse_years("2010-2007")
    with pytest.raises(ValueError, match="no years"):
        cli.parse_years(",")


def test_cli_run_full(tmp_path):
    cfg_path = write_config(tmp_path)
    assert cli.main(["run", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "2011" / "summary.json").is_file()


def test_cli_subcommand_runs_single_stage(tmp_path):
    cfg_path = write_config(tmp_path)
    assert cli.main(["ingest", "--config", str(cfg_path)]) == 0
    ydir = tmp_path / "out" / "2011"
    assert (ydir / "panel.json").is_file()
    assert not (ydir / "resistance.csv").exists()


def test_cli_overrides_seed_and_out(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "elsewhere"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "9"]) == 0
    doc = json.loads((out / "2011" / "network.json").read_text())
    assert doc["seed"] == 9


def test_cli_config_error_exits_one(tmp_path, capsys):
    cfg_path = write_config(tmp_path, years=[])
    assert cli.main(["run", "--config", str(cfg_path)]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_stage_failure_exits_two(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    (tmp_path / "data" / "flows.csv").write_text("wrong,header\n", encoding="utf-8")
    assert cli.main(["run", "--config", str(cfg_path)]) == 2
    assert "ingest failed" in capsys.readouterr().err


def test_cli_unknown_stage_exits_one(tmp_path):
    cfg_path = write_config(tmp_path)
    assert cli.main(["run", "--config", str(cfg_path), "--stages", "teleport"]) == 1


def test_cli_fetch_from_file_url(tmp_path, capsys):
    remote = tmp_path / "remote"
    remote.mkdir()
    (remote / "2011.csv").write_text("iso,year,gdp_usd\nAAA,2011,5.0\n", encoding="utf-8")
    cfg_path = write_config(
        tmp_path,
        url_templates={"gdp-api": f"file://{remote}/{{year}}.csv"},
    )
    assert cli.main(["fetch", "--config", str(cfg_path), "--source", "gdp-api"]) == 0
    cached = tmp_path / "cache" / "gdp-api" / "2011.csv"
    assert cached.read_text() == "iso,year,gdp_usd\nAAA,2011,5.0\n"
    assert str(cached) in capsys.readouterr().out
    manifest = json.loads((tmp_path / "cache" / "manifest.json").read_text())
    assert "gdp-api/2011" in manifest
    assert manifest["gdp-api/2011"]["url"].startswith("file://")


def test_cli_fetch_requires_years(tmp_path):
    cfg_path = write_config(tmp_path, years=[])
    assert cli.main(["fetch", "--config", str(cfg_path), "--source", "gdp-api"]) == 1
