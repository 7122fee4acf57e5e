"""Acceptance gate: one test per release criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line per
criterion alongside the measured margin and runtime. Every tolerance here is
pinned; loosening one is a release decision, not a test fix.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from tradepurity import corpus, gravity, mixture, netgraph, pipeline
from tradepurity.gravity import GravityParams, expected_error_mean
from tradepurity.netgraph import (
    WeightedGraph,
    disparity_backbone,
    disparity_significance,
    ei_indices,
    louvain,
    modularity,
)
from tradepurity.synthetic import (
    SyntheticSpec,
    planted_gravity_panel,
    planted_mixture_sample,
    write_corpus,
)

from _oracles import brute_force_best_q, random_connected_ish_graph


def verdict(num: int, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {num:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


#: Published yearly error-model rows: year -> (mu, sigma, expected mean).
PUBLISHED_ERROR_ROWS = {
    2007: (0.00694, 0.00050, 1.00697),
    2008: (0.00228, 0.00020, 1.00229),
    2009: (0.02364, 0.00047, 1.02392),
    2010: (0.56409, 0.00027, 1.75785),
    2011: (0.00339, 0.00024, 1.00340),
    2012: (0.01529, 0.00072, 1.01540),
    2013: (0.81314, 0.00018, 2.25498),
    2014: (0.05607, 0.00061, 1.05767),
    2015: (0.40263, 0.00017, 1.49575),
    2016: (0.31945, 0.00028, 1.37637),
    2017: (0.02362, 0.00047, 1.02390),
}


def test_criterion_01_lognormal_error_mean():
    t0 = time.perf_counter()
    worst = 0.0
    for year, (mu, sigma, expected) in PUBLISHED_ERROR_ROWS.items():
        got = expected_error_mean(mu, sigma)
        worst = max(worst, abs(got - expected))
    elapsed = time.perf_counter() - t0
    verdict(
        1,
        worst <= 5e-4 and elapsed < 1.0,
        f"all 11 published (mu, sigma, E) rows within 5e-4 "
        f"(worst {worst:.2e}, {elapsed:.2f}s < 1s)",
    )


def test_criterion_02_em_recovery():
    t0 = time.perf_counter()
    truth = {"a": 2.0, "b": 0.9, "sigma1": 0.3, "mu": 12.0, "sigma2": 1.0}
    worst_a = worst_rel = 0.0
    worst_acc = 1.0
    monotone = True
    for seed in range(1, 6):
        ln_r, ln_d, labels = planted_mixture_sample(seed, n_pairs=5000)
        fit = mixture.fit_em(ln_r, ln_d)
        p = fit.params
        worst_a = max(worst_a, abs(p.a - truth["a"]))
        for name in ("b", "sigma1", "mu", "sigma2"):
            worst_rel = max(worst_rel, abs(getattr(p, name) / truth[name] - 1.0))
        worst_acc = min(worst_acc, float(np.mean((fit.tau > 0.5) == labels)))
        monotone = monotone and float(np.min(np.diff(fit.loglik_trace))) >= -1e-9
    elapsed = time.perf_counter() - t0
    verdict(
        2,
        worst_a <= 0.05 and worst_rel <= 0.05 and worst_acc >= 0.99
        and monotone and elapsed < 30.0,
        f"5 seeded 5000-pair fits: |a-2| <= 0.05 (worst {worst_a:.3f}), others "
        f"within 5% (worst {100 * worst_rel:.1f}%), accuracy >= 99% "
        f"(worst {100 * worst_acc:.2f}%), traces monotone within 1e-9 "
        f"({elapsed:.1f}s < 30s)",
    )


def test_criterion_03_pml_sanity():
    t0 = time.perf_counter()
    mass, flow = planted_gravity_panel(seed=5, n=60, mu=0.4, sigma=0.01)
    fit = gravity.fit_error_params_arrays(mass, flow, GravityParams(alpha=1.0))
    mu_err = abs(fit.model.mu - 0.4)

    # all-positive flows far above the error mean: fitted E must be negligible
    rng = np.random.default_rng(17)
    n = 30
    big_mass = rng.uniform(1e4, 1e5, size=n)
    log_m = np.log(big_mass)
    eps = np.exp(rng.normal(0.4, 0.01, size=(n, n)))
    big_flow = np.exp((log_m[:, None] + log_m[None, :]) / 2.0) - eps
    np.fill_diagonal(big_flow, 0.0)
    params = GravityParams(alpha=1.0)
    big_fit = gravity.fit_error_params_arrays(big_mass, big_flow, params)
    with_e = gravity.resistance_matrix_arrays(big_mass, big_flow, big_fit.expected_eps, params)
    with np.errstate(divide="ignore"):  # the E = 0 surrogate divides by 0 on the diagonal
        without_e = gravity.resistance_matrix_arrays(big_mass, big_flow, 0.0, params)
    off = ~np.eye(n, dtype=bool)
    worst_shift = float(np.max(np.abs(with_e[off] / without_e[off] - 1.0)))
    elapsed = time.perf_counter() - t0
    verdict(
        3,
        fit.converged and mu_err <= 0.05 and worst_shift <= 1e-3 and elapsed < 30.0,
        f"planted mu recovered within 0.05 (off by {mu_err:.4f}); fitted error "
        f"mean shifts no resistance by more than 0.1% "
        f"(worst {100 * worst_shift:.4f}%) ({elapsed:.1f}s < 30s)",
    )


def test_criterion_04_disparity_filter():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 40))
        p = float(rng.uniform(0.0, 0.999))
        integral, _ = integrate.quad(lambda x: (1.0 - x) ** (k - 2), 0.0, p)
        worst = max(worst, abs(disparity_significance(p, k) - (1.0 - (k - 1) * integral)))

    nodes = ["HHH", "AAA", "BBB", "CCC", "DDD", "EEE"]
    index = {name: i for i, name in enumerate(nodes)}
    edges = {
        ("HHH", "AAA"): 97.0, ("HHH", "BBB"): 1.0, ("HHH", "CCC"): 1.0,
        ("HHH", "DDD"): 1.0, ("AAA", "BBB"): 1.0, ("DDD", "EEE"): 5.0,
    }
    g = WeightedGraph(
        nodes=nodes,
        edges={tuple(sorted((index[a], index[b]))): w for (a, b), w in edges.items()},
    )
    bb = disparity_backbone(g, alpha_s=0.05)
    expected = {
        tuple(sorted((index[a], index[b])))
        for a, b in (("HHH", "AAA"), ("HHH", "CCC"), ("DDD", "EEE"))
    }
    backbone_ok = set(bb.base.edges) == expected
    elapsed = time.perf_counter() - t0
    verdict(
        4,
        worst <= 1e-9 and backbone_ok and elapsed < 5.0,
        f"closed form vs quadrature on 1000 (k, p) draws within 1e-9 "
        f"(worst {worst:.2e}); 6-node backbone matches the hand-derived edge "
        f"set ({elapsed:.1f}s < 5s)",
    )


def test_criterion_05_modularity_louvain():
    t0 = time.perf_counter()
    two_triangles = WeightedGraph(
        nodes=["AAA", "BBB", "CCC", "DDD", "EEE", "FFF"],
        edges={(0, 1): 1.0, (1, 2): 1.0, (0, 2): 1.0,
               (3, 4): 1.0, (4, 5): 1.0, (3, 5): 1.0},
    )
    part = louvain(two_triangles, seed=42)
    triangle_gap = abs(part.q - 0.5)

    rng = np.random.default_rng(123)
    worst_gap = 0.0
    for _ in range(100):
        g = random_connected_ish_graph(rng)
        best = brute_force_best_q(g)
        q = louvain(g, seed=int(rng.integers(0, 100000))).q
        worst_gap = max(worst_gap, best - q)
        assert q <= best + 1e-9, "louvain must never beat the exhaustive optimum"
    elapsed = time.perf_counter() - t0
    verdict(
        5,
        triangle_gap <= 1e-12 and worst_gap <= 0.02 and elapsed < 60.0,
        f"two-triangle Q = 0.5 within 1e-12 (off by {triangle_gap:.1e}); 100 "
        f"seeded graphs with <= 8 nodes within 0.02 of brute force "
        f"(worst gap {worst_gap:.4f}) ({elapsed:.1f}s < 60s)",
    )


def test_criterion_06_ei_indices():
    t0 = time.perf_counter()
    two_triangles = WeightedGraph(
        nodes=["AAA", "BBB", "CCC", "DDD", "EEE", "FFF"],
        edges={(0, 1): 1.0, (1, 2): 1.0, (0, 2): 1.0,
               (3, 4): 1.0, (4, 5): 1.0, (3, 5): 1.0},
    )
    split = {"AAA": 0, "BBB": 0, "CCC": 0, "DDD": 1, "EEE": 1, "FFF": 1}
    internal = ei_indices(two_triangles, split)
    matching = WeightedGraph(
        nodes=["AAA", "BBB", "CCC", "DDD"], edges={(0, 1): 2.0, (2, 3): 5.0}
    )
    external = ei_indices(matching, {n: k for k, n in enumerate(matching.nodes)})
    extremes_ok = (internal.degree_index, internal.weight_index) == (1.0, 1.0) and (
        external.degree_index, external.weight_index) == (-1.0, -1.0)

    rng = np.random.default_rng(21)
    invariant_ok = True
    for _ in range(20):
        g = random_connected_ish_graph(rng)
        seed = int(rng.integers(0, 100000))
        bb = disparity_backbone(g, alpha_s=0.1)
        part = louvain(g, seed=seed)
        ei = ei_indices(g, part.assignment)
        scaled = WeightedGraph(
            nodes=list(g.nodes), edges={k: 1000.0 * w for k, w in g.edges.items()}
        )
        bb_s = disparity_backbone(scaled, alpha_s=0.1)
        part_s = louvain(scaled, seed=seed)
        ei_s = ei_indices(scaled, part_s.assignment)
        invariant_ok = invariant_ok and (
            set(bb_s.base.edges) == set(bb.base.edges)
            and part_s.assignment == part.assignment
            and abs(part_s.q - part.q) <= 1e-12
            and abs(ei_s.degree_index - ei.degree_index) <= 1e-12
            and abs(ei_s.weight_index - ei.weight_index) <= 1e-12
        )
    elapsed = time.perf_counter() - t0
    verdict(
        6,
        extremes_ok and invariant_ok and elapsed < 5.0,
        f"all-internal -> (+1, +1), all-external -> (-1, -1); weight rescale "
        f"by 1000 leaves backbone, partition, Q, and E-I identical on 20 "
        f"seeded graphs ({elapsed:.1f}s < 5s)",
    )


def test_criterion_07_ks_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    rejections = sum(
        1 for _ in range(100) if mixture.ks_uniform(rng.random(10000)).p_value < 0.05
    )
    elapsed = time.perf_counter() - t0
    verdict(
        7,
        rejections <= 10 and elapsed < 30.0,
        f"uniform PIT samples (n=10000, 100 replications) rejected at 5% in "
        f"{rejections} <= 10 runs ({elapsed:.1f}s < 30s)",
    )


def _run_bundled_pipeline(base: Path) -> Path:
    write_corpus(base / "data")
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
    cfg_path = base / "config.json"
    cfg_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    result = pipeline.run(pipeline.PipelineConfig.from_file(cfg_path))
    assert result.status == 0, result.failures
    return base / "out"


def _tree_digests(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_criterion_08_end_to_end(tmp_path):
    t0 = time.perf_counter()
    out_one = _run_bundled_pipeline(tmp_path / "one")
    elapsed_run = time.perf_counter() - t0
    out_two = _run_bundled_pipeline(tmp_path / "two")
    deterministic = _tree_digests(out_one) == _tree_digests(out_two)

    ydir = out_one / "2011"
    table_lines = (ydir / "union_table.csv").read_text().splitlines()
    header = table_lines[0].split(",")
    pact = next(
        dict(zip(header, line.split(","))) for line in table_lines[1:]
        if line.split(",")[1] == "PACT"
    )
    member, others = float(pact["member_mean"]), float(pact["others_mean"])
    ordering_ok = member < others and member < float(pact["world_mean"])

    tpi_values = [
        float(line.split(",")[1])
        for line in (ydir / "tpi.csv").read_text().splitlines()[1:]
    ]
    tpi_ok = len(tpi_values) > 0 and all(0.0 <= v <= 1.0 for v in tpi_values)

    sim_lines = (ydir / "similarity.csv").read_text().splitlines()
    pact_sim = next(l for l in sim_lines[2:] if l.startswith("PACT,"))
    best_j = max(float(cell) for cell in pact_sim.split(",")[2:])

    elapsed = time.perf_counter() - t0
    verdict(
        8,
        elapsed_run < 10.0 and deterministic and ordering_ok and tpi_ok and best_j >= 0.8,
        f"bundled 20-country run in {elapsed_run:.2f}s < 10s, byte-identical "
        f"across directories; planted union mean {member:.2f} < others "
        f"{others:.2f}; TPI within [0, 1] for all {len(tpi_values)} countries; "
        f"best community Jaccard {best_j:.2f} >= 0.8 ({elapsed:.1f}s total)",
    )


def test_criterion_09_scale(tmp_path):
    spec = SyntheticSpec(n_countries=198, union_size=8, decoy_size=6)
    paths, _ = write_corpus(tmp_path, spec)
    flows = corpus.load_flows(paths["flows.csv"], spec.year)
    gdp_table, _ = corpus.load_gdp(paths["gdp.csv"])
    coords = corpus.load_coordinates(paths["coordinates.csv"])
    unions = corpus.load_unions(paths["unions.csv"])
    panel = corpus.build_panel(spec.year, flows, gdp_table, coords, unions)
    n_pairs = panel.n * (panel.n - 1) // 2
    assert (panel.n, n_pairs) == (198, 19503)

    t0 = time.perf_counter()
    params = GravityParams(alpha=spec.alpha)
    fit = gravity.fit_error_params(panel, params)
    rmat = gravity.resistance_matrix(panel, fit, params)
    iu = np.triu_indices(panel.n, k=1)
    em = mixture.fit_em(rmat.pair_values(), np.log(panel.distance[iu]))
    graph = netgraph.build_graph(rmat)
    backbone = netgraph.disparity_backbone(graph, 0.05)
    partition = netgraph.louvain(backbone, seed=42)
    netgraph.ei_indices(backbone, partition.assignment)
    netgraph.jaccard_matrix(panel.unions, partition)
    elapsed = time.perf_counter() - t0
    verdict(
        9,
        fit.converged and em.converged and elapsed < 60.0,
        f"198 countries / {n_pairs} pairs through gravity + EM + network in "
        f"{elapsed:.1f}s < 60s single-threaded",
    )


def test_criterion_10_live_data_comparison():
    print(
        "ACCEPTANCE 10 SKIP: optional criterion needs live 2007 trade and GDP "
        "snapshots plus a fitted exponent; it is non-blocking by design"
    )
    pytest.skip("needs live remote data; marked optional and non-blocking")
