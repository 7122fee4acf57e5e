"""Two-component decomposition of ln-resistance into natural and artificial barriers.

Category I pairs follow the distance relation ln r = a + b ln d + eta with
eta ~ N(0, sigma1^2); category II pairs sit at an artificial-barrier level
ln r = xi with xi ~ N(mu, sigma2^2). The parameter set
Theta = {a, b, sigma1, mu, sigma2} is fitted by EM with fixed equal priors:
the E step computes per-pair responsibilities tau = p1/(p1 + p2) and the M
step maximizes the expected complete-data log-likelihood, which gives
closed-form tau-weighted least squares and moment updates. A country's
Trade Purity Indicator is its mean responsibility over partners. Goodness
of fit uses the probability integral transform, whose null is exactly
Uniform(0, 1) despite the per-pair covariate, followed by a one-sample
Kolmogorov-Smirnov test.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .gravity import GravityParams, fit_error_params, resistance_matrix

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
WEIGHT_FLOOR = 1e-9
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
MONOTONE_SLACK = 1e-9


class MixtureError(ValueError):
    """Inputs violate a mixture-stage contract, or the fit degenerated."""


@dataclass(frozen=True)
class MixtureParams:
    """Theta = {a, b, sigma1, mu, sigma2}."""

    a: float
    b: float
    sigma1: float
    mu: float
    sigma2: float

    def __post_init__(self):
        for name in ("a", "b", "sigma1", "mu", "sigma2"):
            if not math.isfinite(getattr(self, name)):
                raise MixtureError(f"{name} must be finite")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise MixtureError("sigma1 and sigma2 must be positive")

    def as_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "sigma1": self.sigma1,
            "mu": self.mu,
            "sigma2": self.sigma2,
        }


def _check_pairs(ln_r, ln_d) -> tuple[np.ndarray, np.ndarray]:
    ln_r = np.asarray(ln_r, dtype=float).ravel()
    ln_d = np.asarray(ln_d, dtype=float).ravel()
    if ln_r.shape != ln_d.shape:
        raise MixtureError(f"ln_r and ln_d differ in length: {ln_r.shape} vs {ln_d.shape}")
    if not (np.all(np.isfinite(ln_r)) and np.all(np.isfinite(ln_d))):
        raise MixtureError("ln_r and ln_d must be finite")
    return ln_r, ln_d


def _log_densities(params: MixtureParams, ln_r: np.ndarray, ln_d: np.ndarray):
    """Log densities of both components at each pair."""
    resid1 = ln_r - params.a - params.b * ln_d
    log_p1 = -0.5 * math.log(2.0 * math.pi) - math.log(params.sigma1) - resid1**2 / (
        2.0 * params.sigma1**2
    )
    resid2 = ln_r - params.mu
    log_p2 = -0.5 * math.log(2.0 * math.pi) - math.log(params.sigma2) - resid2**2 / (
        2.0 * params.sigma2**2
    )
    return log_p1, log_p2


def e_step(params: MixtureParams, ln_r, ln_d) -> np.ndarray:
    """Responsibilities tau = p1/(p1 + p2) per pair, computed from log densities.

    The logistic form sigmoid(log p1 - log p2) never evaluates a raw density,
    so tau stays defined when both densities underflow.
    """
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    log_p1, log_p2 = _log_densities(params, ln_r, ln_d)
    return special.expit(log_p1 - log_p2)


def observed_loglik(params: MixtureParams, ln_r, ln_d) -> float:
    """Observed-data log-likelihood sum(ln(p1/2 + p2/2)) under equal priors."""
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    log_p1, log_p2 = _log_densities(params, ln_r, ln_d)
    return float(np.sum(np.logaddexp(log_p1, log_p2) + math.log(0.5)))


def m_step(tau, ln_r, ln_d) -> MixtureParams:
    """Closed-form maximizer of the expected complete-data log-likelihood.

    (a, b) solve the tau-weighted normal equations of ln r on ln d; sigma1^2
    is the tau-weighted mean squared residual; (mu, sigma2) are the
    (1 - tau)-weighted mean and standard deviation of ln r. Both variances
    are floored at 1e-4 to prevent single-point collapse. Vanishing category-I
    weight is fatal (the regression is undefined without it); vanishing
    category-II weight falls back to unweighted moments of ln r.
    """
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    tau = np.asarray(tau, dtype=float).ravel()
    if tau.shape != ln_r.shape:
        raise MixtureError("tau length must match the pair arrays")
    if np.any((tau < 0) | (tau > 1)):
        raise MixtureError("tau values must lie in [0, 1]")

    w1 = tau
    w2 = 1.0 - tau
    s1, s2 = float(np.sum(w1)), float(np.sum(w2))
    if s1 < WEIGHT_FLOOR:
        raise MixtureError(
            f"degenerate collapse: category I total weight {s1:.3e} < {WEIGHT_FLOOR:.0e}"
        )

    sw_x = float(np.sum(w1 * ln_d))
    sw_xx = float(np.sum(w1 * ln_d * ln_d))
    sw_y = float(np.sum(w1 * ln_r))
    sw_xy = float(np.sum(w1 * ln_d * ln_r))
    det = s1 * sw_xx - sw_x * sw_x
    if abs(det) < 1e-12 * max(1.0, s1 * sw_xx):
        raise MixtureError("distance covariate is degenerate; (a, b) are not identifiable")
    a = (sw_y * sw_xx - sw_x * sw_xy) / det
    b = (s1 * sw_xy - sw_x * sw_y) / det
    resid1 = ln_r - a - b * ln_d
    sigma1 = max(math.sqrt(float(np.sum(w1 * resid1**2)) / s1), SIGMA_FLOOR)

    if s2 < WEIGHT_FLOOR:
        # category II carries no weight; its moments degrade gracefully to the
        # unweighted sample moments (the uniform-infinitesimal-weight limit)
        logger.warning(
            "category II total weight %.3e below %.0e; falling back to sample moments",
            s2,
            WEIGHT_FLOOR,
        )
        mu = float(np.mean(ln_r))
        sigma2 = max(float(np.std(ln_r)), SIGMA_FLOOR)
    else:
        mu = float(np.sum(w2 * ln_r)) / s2
        sigma2 = max(math.sqrt(float(np.sum(w2 * (ln_r - mu) ** 2)) / s2), SIGMA_FLOOR)

    return MixtureParams(a=a, b=b, sigma1=sigma1, mu=mu, sigma2=sigma2)


def initial_params(ln_r, ln_d) -> MixtureParams:
    """Deterministic data-driven start: unweighted line fit, category II from
    the top quartile of residuals (the high-resistance pairs)."""
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    if ln_r.size < 4:
        raise MixtureError("need at least 4 pairs to initialize")
    b, a = np.polyfit(ln_d, ln_r, 1)
    resid = ln_r - a - b * ln_d
    sigma1 = max(float(np.std(resid)), SIGMA_FLOOR)
    cut = np.quantile(resid, 0.75)
    top = ln_r[resid >= cut]
    mu = float(np.mean(top))
    sigma2 = max(float(np.std(top)), SIGMA_FLOOR)
    return MixtureParams(a=float(a), b=float(b), sigma1=sigma1, mu=mu, sigma2=sigma2)


@dataclass
class MixtureFit:
    """EM result: parameters, responsibilities, and the likelihood trace."""

    params: MixtureParams
    tau: np.ndarray
    loglik_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def loglik_final(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float("-inf")


def fit_em(
    ln_r,
    ln_d,
    init: MixtureParams | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> MixtureFit:
    """Alternate e_step/m_step until the largest parameter change is < tol.

    The observed-data log-likelihood is recorded after every M step; under
    the expected complete-data objective it is non-decreasing, which the
    loop asserts (slack 1e-9) as a self-check of the update algebra.
    """
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    if ln_r.size < 10:
        raise MixtureError(f"need at least 10 pairs, got {ln_r.size}")
    if tol <= 0:
        raise MixtureError("tol must be positive")
    params = init or initial_params(ln_r, ln_d)

    trace: list[float] = []
    tau = e_step(params, ln_r, ln_d)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_params = m_step(tau, ln_r, ln_d)
        ll = observed_loglik(new_params, ln_r, ln_d)
        if not math.isfinite(ll):
            raise MixtureError(f"non-finite likelihood at iteration {it}")
        if trace and ll < trace[-1] - MONOTONE_SLACK:
            raise MixtureError(
                f"likelihood decreased at iteration {it}: {trace[-1]} -> {ll}"
            )
        trace.append(ll)
        delta = max(
            abs(new_params.a - params.a),
            abs(new_params.b - params.b),
            abs(new_params.sigma1 - params.sigma1),
            abs(new_params.mu - params.mu),
            abs(new_params.sigma2 - params.sigma2),
        )
        params = new_params
        tau = e_step(params, ln_r, ln_d)
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("EM did not converge in %d iterations", max_iter)
    return MixtureFit(params=params, tau=tau, loglik_trace=trace, iterations=it, converged=converged)


# --- responsibilities as a symmetric matrix ---------------------------------


@dataclass
class Responsibilities:
    """Symmetric per-pair category-I probabilities over a fixed iso order."""

    isos: list[str]
    tau: np.ndarray

    def __post_init__(self):
        n = len(self.isos)
        if self.tau.shape != (n, n):
            raise MixtureError(f"tau must be {n}x{n}")

    @classmethod
    def from_pair_values(cls, isos: list[str], pair_tau: np.ndarray) -> "Responsibilities":
        """Build the symmetric matrix from upper-triangle (i < j) values."""
        n = len(isos)
        pair_tau = np.asarray(pair_tau, dtype=float)
        if pair_tau.size != n * (n - 1) // 2:
            raise MixtureError("pair value count does not match the iso list")
        tau = np.full((n, n), np.nan)
        iu = np.triu_indices(n, k=1)
        tau[iu] = pair_tau
        tau[(iu[1], iu[0])] = pair_tau
        return cls(isos=list(isos), tau=tau)

    def to_csv(self) -> str:
        lines = ["iso_a,iso_b,tau"]
        n = len(self.isos)
        for i in range(n):
            for j in range(i + 1, n):
                lines.append(f"{self.isos[i]},{self.isos[j]},{float(self.tau[i, j])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Responsibilities":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "iso_a,iso_b,tau":
            raise MixtureError("expected header iso_a,iso_b,tau")
        entries = {}
        isos_set = set()
        for ln in lines[1:]:
            a, b, v = ln.split(",")
            entries[(a, b)] = float(v)
            isos_set.update((a, b))
        isos = sorted(isos_set)
        idx = {iso: k for k, iso in enumerate(isos)}
        tau = np.full((len(isos), len(isos)), np.nan)
        for (a, b), v in entries.items():
            tau[idx[a], idx[b]] = tau[idx[b], idx[a]] = v
        return cls(isos=isos, tau=tau)


@dataclass
class TpiVector:
    """Per-country trade purity: mean responsibility over defined partners."""

    year: int
    values: dict[str, float]
    excluded: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iso,tpi"]
        for iso in sorted(self.values):
            lines.append(f"{iso},{float(self.values[iso])!r}")
        return "\n".join(lines) + "\n"


def tpi(resp: Responsibilities, year: int = 0) -> TpiVector:
    """TPI_i = mean of tau over partners with a defined pair value.

    Countries with no defined partner are excluded and listed rather than
    given an arbitrary score.
    """
    values: dict[str, float] = {}
    excluded: list[str] = []
    n = len(resp.isos)
    for i, iso in enumerate(resp.isos):
        row = np.delete(resp.tau[i], i)
        defined = row[np.isfinite(row)]
        if defined.size == 0:
            excluded.append(iso)
            logger.warning("country %s has no defined partners; excluded from TPI", iso)
            continue
        values[iso] = float(np.mean(defined))
    if n and not values:
        raise MixtureError("no country has any defined partner")
    return TpiVector(year=year, values=values, excluded=excluded)


# --- goodness of fit ---------------------------------------------------------


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    sample_size: int


def pit_values(params: MixtureParams, ln_r, ln_d) -> np.ndarray:
    """Probability integral transform under the fitted equal-prior mixture.

    u = Phi((ln r - a - b ln d)/sigma1)/2 + Phi((ln r - mu)/sigma2)/2 is
    exactly Uniform(0, 1) when the data come from the fitted model.
    """
    ln_r, ln_d = _check_pairs(ln_r, ln_d)
    z1 = (ln_r - params.a - params.b * ln_d) / params.sigma1
    z2 = (ln_r - params.mu) / params.sigma2
    return 0.5 * stats.norm.cdf(z1) + 0.5 * stats.norm.cdf(z2)


def ks_uniform(u) -> KsResult:
    """One-sample Kolmogorov-Smirnov test of u against Uniform(0, 1)."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size < 10:
        raise MixtureError(f"KS test needs at least 10 values, got {u.size}")
    res = stats.kstest(u, "uniform", method="asymp")
    return KsResult(statistic=float(res.statistic), p_value=float(res.pvalue), sample_size=u.size)


def ks_test(fit: MixtureFit, ln_r, ln_d) -> KsResult:
    """PIT-based KS goodness of fit for a converged mixture fit."""
    if not fit.converged:
        raise MixtureError("KS test requires a converged fit")
    return ks_uniform(pit_values(fit.params, ln_r, ln_d))


# --- optional outer search over the mass exponent ---------------------------


@dataclass
class AlphaSearchResult:
    alpha: float
    fit: MixtureFit
    flat_objective: bool
    evaluations: list[tuple[float, float]]


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def estimate_alpha(
    panel,
    search_range: tuple[float, float] = (0.1, 1.5),
    grid_points: int = 5,
    refine_iters: int = 12,
    scale: float = 1.0,
    em_tol: float = DEFAULT_TOL,
    flat_tol: float = 1e-9,
) -> AlphaSearchResult:
    """Pick the mass exponent maximizing the converged mixture log-likelihood.

    Coarse grid over the range, then golden-section refinement inside the
    best grid bracket; the returned alpha attains the maximum over every
    evaluation. A grid whose objective is flat (all values within `flat_tol`
    relative spread, e.g. all masses equal) is reported as unidentifiable
    and the default exponent 1.0 is returned. Optional: the default pipeline
    never calls this.
    """
    lo, hi = search_range
    if not (lo < hi):
        raise MixtureError(f"empty search range {search_range}")
    if grid_points < 3:
        raise MixtureError("need at least 3 grid points")

    n = panel.n
    iu = np.triu_indices(n, k=1)
    ln_d = np.log(panel.distance[iu])
    cache: dict[float, tuple[float, MixtureFit]] = {}

    def evaluate(alpha: float) -> tuple[float, MixtureFit | None]:
        alpha = float(alpha)
        if alpha not in cache:
            try:
                params = GravityParams(alpha=alpha, scale=scale)
                pml = fit_error_params(panel, params)
                rmat = resistance_matrix(panel, pml, params)
                fit = fit_em(rmat.ln_r[iu], ln_d, tol=em_tol)
                obj = fit.loglik_final if fit.converged else -math.inf
            except (MixtureError, ValueError) as exc:
                logger.warning("alpha=%.4f evaluation failed: %s", alpha, exc)
                obj, fit = -math.inf, None
            cache[alpha] = (obj, fit)
        return cache[alpha]

    grid = np.linspace(lo, hi, grid_points)
    grid_vals = [evaluate(a)[0] for a in grid]
    finite = [v for v in grid_vals if math.isfinite(v)]
    if not finite:
        raise MixtureError("objective non-finite everywhere on the alpha grid")

    spread = max(finite) - min(finite)
    flat = len(finite) == len(grid_vals) and spread <= flat_tol * max(1.0, abs(max(finite)))
    if flat:
        logger.warning(
            "alpha objective is flat across %s (spread %.3e); alpha is unidentifiable",
            [round(float(a), 4) for a in grid],
            spread,
        )
        alpha_star = 1.0 if lo <= 1.0 <= hi else (lo + hi) / 2.0
        _, fit = evaluate(alpha_star)
        evals = sorted((a, cache[float(a)][0]) for a in cache)
        return AlphaSearchResult(alpha=alpha_star, fit=fit, flat_objective=True, evaluations=evals)

    best = int(np.argmax(grid_vals))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid_points - 1)]
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = evaluate(x1)[0], evaluate(x2)[0]
    for _ in range(refine_iters):
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = evaluate(x1)[0]
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = evaluate(x2)[0]

    alpha_star = max(cache, key=lambda k: cache[k][0])
    obj, fit = cache[alpha_star]
    if fit is None or not math.isfinite(obj):
        raise MixtureError("alpha objective non-finite at every evaluated point")
    evals = sorted((a_, cache[a_][0]) for a_ in cache)
    return AlphaSearchResult(alpha=alpha_star, fit=fit, flat_objective=False, evaluations=evals)


# --- serialization -----------------------------------------------------------


def fit_to_json(year: int, fit: MixtureFit, ks: KsResult | None) -> str:
    doc = {
        "year": year,
        **fit.params.as_dict(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "loglik_final": fit.loglik_final,
        "ks_statistic": ks.statistic if ks else None,
        "ks_pvalue": ks.p_value if ks else None,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
