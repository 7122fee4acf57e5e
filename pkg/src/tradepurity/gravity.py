"""Bilateral trade resistance from a gravity relation with an additive error.

The observed flow between two economies is modeled as the gravity ratio
(product of masses raised to alpha, divided by a symmetric resistance)
minus a multiplicative-lognormal measurement error:

    F_ij = scale * (m_i * m_j)**alpha / r_ij - eps_ij,   ln eps ~ N(mu, sigma^2)

Subtracting the error lets genuinely zero flows (pairs that trade nothing)
carry information instead of being dropped. Solving the symmetrized relation
for the pair resistance by least squares gives

    r*_ij = 2 * scale * (m_i * m_j)**alpha / (F_ij + F_ji + 2 * E[eps])

with E[eps] = exp(mu + sigma^2 / 2). The error parameters are fitted by
pseudo maximum likelihood: each ordered pair contributes the lognormal
density evaluated at x_ij = r*_ij - F_ij, and the expectation entering r*
is updated to self-consistency.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MU_BOUNDS = (-2.0, 2.0)
SIGMA_BOUNDS = (1e-6, 1.0)
_LOG_SIGMA_BOUNDS = (math.log(SIGMA_BOUNDS[0]), math.log(SIGMA_BOUNDS[1]))
DEFAULT_ALPHA = 1.0
DEFAULT_SCALE = 1.0


class GravityError(ValueError):
    """Inputs violate a gravity-stage contract."""


@dataclass(frozen=True)
class GravityParams:
    """Structural knobs of the gravity relation: mass exponent and scale."""

    alpha: float = DEFAULT_ALPHA
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise GravityError(f"alpha must be positive and finite, got {self.alpha}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise GravityError(f"scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True)
class ErrorModel:
    """Lognormal error: ln eps ~ N(mu, sigma^2)."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise GravityError(f"mu must be finite, got {self.mu}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise GravityError(f"sigma must be positive, got {self.sigma}")

    @property
    def expected_eps(self) -> float:
        return expected_error_mean(self.mu, self.sigma)


def expected_error_mean(mu: float, sigma: float) -> float:
    """Mean of the lognormal error, exp(mu + sigma^2 / 2)."""
    if not (sigma > 0):
        raise GravityError(f"sigma must be positive, got {sigma}")
    return math.exp(mu + sigma**2 / 2.0)


def log_density(x, mu: float, sigma: float) -> np.ndarray:
    """Lognormal log density at x > 0; -inf where x <= 0."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, -np.inf)
    pos = x > 0
    lx = np.log(x[pos])
    out[pos] = (
        -lx
        - math.log(sigma)
        - 0.5 * math.log(2.0 * math.pi)
        - (lx - mu) ** 2 / (2.0 * sigma**2)
    )
    return out


def resistance(
    flow_ij: float,
    flow_ji: float,
    mass_i: float,
    mass_j: float,
    params: GravityParams,
    error: ErrorModel,
) -> float:
    """Symmetric pair resistance r* from the least-squares inversion of the flow pair.

    Strictly positive and finite even when both flows are zero, because the
    error mean keeps the denominator positive.
    """
    if mass_i <= 0 or mass_j <= 0:
        raise GravityError("masses must be positive")
    if flow_ij < 0 or flow_ji < 0:
        raise GravityError("flows must be non-negative")
    return (
        2.0
        * params.scale
        * (mass_i * mass_j) ** params.alpha
        / (flow_ij + flow_ji + 2.0 * error.expected_eps)
    )


def _gravity_numerator(mass: np.ndarray, params: GravityParams) -> np.ndarray:
    """scale * (m_i * m_j)^alpha over all pairs, computed in logs for range safety."""
    log_m = params.alpha * np.log(mass)
    return params.scale * np.exp(log_m[:, None] + log_m[None, :])


def _implied_errors(
    mass: np.ndarray, flow: np.ndarray, expected_eps: float, params: GravityParams
) -> np.ndarray:
    """Density arguments x_ij = r*_ij - F_ij over ordered pairs i != j."""
    n = mass.shape[0]
    gravity_num = _gravity_numerator(mass, params)
    x = 2.0 * gravity_num / (flow + flow.T + 2.0 * expected_eps) - flow
    return x[~np.eye(n, dtype=bool)]


def _pattern_search(objective, start, bounds, tol=1e-10, max_iter=400):
    """Coordinate pattern search maximizing `objective` inside box `bounds`.

    Accepts only improving steps, halving the step vector when no axis move
    improves, so the visited-objective sequence is monotone.
    """
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x = np.clip(np.asarray(start, dtype=float), lo, hi)
    fx = objective(x)
    step = (hi - lo) / 8.0
    for _ in range(max_iter):
        improved = False
        for axis in range(x.size):
            for sign in (1.0, -1.0):
                trial = x.copy()
                trial[axis] = np.clip(trial[axis] + sign * step[axis], lo[axis], hi[axis])
                if trial[axis] == x[axis]:
                    continue
                ft = objective(trial)
                if ft > fx:
                    x, fx = trial, ft
                    improved = True
        if not improved:
            step /= 2.0
            if np.all(step < tol):
                break
    return x, fx


@dataclass
class PmlFit:
    """Result of the self-consistent pseudo maximum likelihood fit."""

    model: ErrorModel
    expected_eps: float
    loglik: float
    iterations: int
    converged: bool
    excluded_pair_count: int
    n_pairs: int


def fit_error_params_arrays(
    mass: np.ndarray,
    flow: np.ndarray,
    params: GravityParams,
    tol: float = 1e-8,
    max_outer: int = 200,
    initial: ErrorModel | None = None,
) -> PmlFit:
    """Fit (mu, sigma) of the lognormal error by pseudo maximum likelihood.

    Alternates two half-steps to self-consistency: (1) with E[eps] held
    fixed, maximize the summed lognormal log density of the arguments
    x_ij = r*_ij - F_ij over (mu, ln sigma) inside the bounded box
    mu in [-2, 2], sigma in [1e-6, 1] by pattern search; (2) update E[eps]
    toward exp(mu + sigma^2/2). The expectation update is damped (averaged
    with the previous value) because the plain fixed-point map can oscillate
    with period two. Ordered pairs whose argument is not positive are
    excluded from the likelihood and counted. Converged when the largest
    parameter change drops below `tol`.
    """
    mass = np.asarray(mass, dtype=float)
    flow = np.asarray(flow, dtype=float)
    if mass.ndim != 1:
        raise GravityError("mass must be a 1-d array")
    n = mass.shape[0]
    if flow.shape != (n, n):
        raise GravityError(f"flow must be {n}x{n}, got {flow.shape}")
    if np.any(~np.isfinite(mass)) or np.any(mass <= 0):
        raise GravityError("masses must be positive and finite")
    if np.any(~np.isfinite(flow)) or np.any(flow < 0):
        raise GravityError("flows must be non-negative and finite")
    if n < 3:
        raise GravityError("need at least 3 countries to fit the error model")

    model = initial or ErrorModel(mu=0.0, sigma=0.5)
    expected = model.expected_eps

    def make_objective(exp_eps):
        x = _implied_errors(mass, flow, exp_eps, params)
        excluded = int(np.count_nonzero(x <= 0))
        if excluded == x.size:
            counts, edges = np.histogram(x, bins=10)
            hist = ", ".join(
                f"[{edges[k]:.3g}, {edges[k + 1]:.3g}): {int(counts[k])}"
                for k in range(len(counts))
            )
            raise GravityError(
                "no pair has a positive density argument; the likelihood is empty. "
                f"Density-argument histogram: {hist}"
            )
        keep = x[x > 0]

        def objective(theta):
            return float(np.sum(log_density(keep, float(theta[0]), math.exp(float(theta[1])))))

        return objective, excluded, np.log(keep)

    loglik = -np.inf
    excluded = 0
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        objective, excluded, log_args = make_objective(expected)
        # seed the direct search at the clipped closed-form lognormal optimum;
        # the search then only has to confirm (or repair) stationarity
        mu0 = min(max(float(np.mean(log_args)), MU_BOUNDS[0]), MU_BOUNDS[1])
        sigma0 = math.sqrt(float(np.mean((log_args - mu0) ** 2)))
        sigma0 = min(max(sigma0, SIGMA_BOUNDS[0]), SIGMA_BOUNDS[1])
        theta, loglik = _pattern_search(
            objective, (mu0, math.log(sigma0)), [MU_BOUNDS, _LOG_SIGMA_BOUNDS]
        )
        new_model = ErrorModel(mu=float(theta[0]), sigma=float(math.exp(theta[1])))
        # damped expectation update: the undamped map can oscillate with period 2
        new_expected = 0.5 * expected + 0.5 * new_model.expected_eps
        delta = max(
            abs(new_model.mu - model.mu),
            abs(new_model.sigma - model.sigma),
            abs(new_expected - expected) / max(1.0, abs(expected)),
        )
        model, expected = new_model, new_expected
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("error-model fit did not converge in %d outer iterations", max_outer)

    return PmlFit(
        model=model,
        expected_eps=expected,
        loglik=loglik,
        iterations=it,
        converged=converged,
        excluded_pair_count=excluded,
        n_pairs=n * (n - 1),
    )


def fit_error_params(panel, params: GravityParams, **kwargs) -> PmlFit:
    """Panel-level wrapper: masses are the panel GDPs, flows the merged matrix."""
    return fit_error_params_arrays(panel.gdp, panel.flow, params, **kwargs)


@dataclass
class ResistanceMatrix:
    """Symmetric ln-resistance values with the parameters that produced them.

    The diagonal of `ln_r` is NaN (self-resistance is undefined); all
    off-diagonal entries are finite.
    """

    year: int
    isos: list[str]
    ln_r: np.ndarray
    params: GravityParams
    fit: PmlFit

    def pair_values(self) -> np.ndarray:
        """Upper-triangle ln r values in (i < j) row-major order."""
        n = len(self.isos)
        iu = np.triu_indices(n, k=1)
        return self.ln_r[iu]

    def to_csv(self) -> str:
        """CSV rows `iso_a,iso_b,ln_r` over unordered pairs, iso_a < iso_b."""
        n = len(self.isos)
        lines = ["iso_a,iso_b,ln_r"]
        for i in range(n):
            for j in range(i + 1, n):
                a, b = sorted((self.isos[i], self.isos[j]))
                lines.append(f"{a},{b},{float(self.ln_r[i, j])!r}")
        return "\n".join(lines) + "\n"

    def sidecar_json(self) -> str:
        doc = {
            "year": self.year,
            "alpha": self.params.alpha,
            "scale": self.params.scale,
            "mu": self.fit.model.mu,
            "sigma": self.fit.model.sigma,
            "expected_eps": self.fit.expected_eps,
            "excluded_pair_count": self.fit.excluded_pair_count,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_csv(cls, text: str, sidecar: str) -> "ResistanceMatrix":
        meta = json.loads(sidecar)
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "iso_a,iso_b,ln_r":
            raise GravityError("expected header iso_a,iso_b,ln_r")
        entries = {}
        isos_set = set()
        for ln in lines[1:]:
            a, b, v = ln.split(",")
            entries[(a, b)] = float(v)
            isos_set.update((a, b))
        isos = sorted(isos_set)
        idx = {iso: k for k, iso in enumerate(isos)}
        n = len(isos)
        ln_r = np.full((n, n), np.nan)
        for (a, b), v in entries.items():
            ln_r[idx[a], idx[b]] = ln_r[idx[b], idx[a]] = v
        params = GravityParams(alpha=meta["alpha"], scale=meta["scale"])
        model = ErrorModel(mu=meta["mu"], sigma=meta["sigma"])
        fit = PmlFit(
            model=model,
            expected_eps=meta["expected_eps"],
            loglik=float("nan"),
            iterations=0,
            converged=True,
            excluded_pair_count=meta["excluded_pair_count"],
            n_pairs=n * (n - 1),
        )
        return cls(year=meta["year"], isos=isos, ln_r=ln_r, params=params, fit=fit)


def resistance_matrix_arrays(
    mass: np.ndarray, flow: np.ndarray, expected_eps: float, params: GravityParams
) -> np.ndarray:
    """Matrix of pair resistances r* (not logs); NaN diagonal."""
    mass = np.asarray(mass, dtype=float)
    flow = np.asarray(flow, dtype=float)
    gravity_num = _gravity_numerator(mass, params)
    out = 2.0 * gravity_num / (flow + flow.T + 2.0 * expected_eps)
    np.fill_diagonal(out, np.nan)
    return out


def resistance_matrix(panel, fit: PmlFit, params: GravityParams) -> ResistanceMatrix:
    """Panel-level resistance extraction using a completed error fit."""
    r = resistance_matrix_arrays(panel.gdp, panel.flow, fit.expected_eps, params)
    with np.errstate(invalid="ignore"):
        ln_r = np.log(r)
    off = ~np.eye(len(panel.isos), dtype=bool)
    if not np.all(np.isfinite(ln_r[off])):
        raise GravityError("non-finite resistance encountered off-diagonal")
    return ResistanceMatrix(year=panel.year, isos=list(panel.isos), ln_r=ln_r, params=params, fit=fit)
