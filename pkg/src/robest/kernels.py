"""Robust reweighting kernels and the alternating estimation loop.

Implements three Bayesian reweighting heuristics that wrap an arbitrary
weighted non-minimal solver:

- EROR: Student-t derived weights  w = 1/(1 + r^2/mu)  with mu adapted each
  iteration from the extreme squared residuals, floored at the inlier
  threshold.
- ESOR: logistic weights  w = 1/(1 + exp(0.5 (r^2 - rho^2)))  with rho^2 set
  to the weight-weighted centroid of the squared residuals, floored at the
  inlier threshold.
- ASOR: variational scheme with a Bernoulli-Gamma outlier indicator; the
  weight is the posterior mixture mean  w = Omega + (1 - Omega) alpha/beta
  with a learned common outlier-scale parameter b_hat.

GNC-GM and GNC-TLS (graduated non-convexity with Geman-McClure / truncated
least squares surrogates) are provided as comparison baselines.

All squared residuals are expected in precision-scaled (whitened) units:
the exponential rules are not scale-free, so callers must fold measurement
precision into the residuals (see `robest.registration.residuals_registration`).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np
from scipy.special import expit

__all__ = [
    "RobustMethod",
    "StoppingRule",
    "StopReason",
    "AsorHyperParams",
    "AsorState",
    "GncControl",
    "RobustConfig",
    "WeightState",
    "ResidualEvaluation",
    "IterationRecord",
    "RunTrace",
    "ProblemInstance",
    "RobustSolveError",
    "WeightSumFloorError",
    "eror_weight",
    "eror_mu_update",
    "esor_weight",
    "esor_rho_update",
    "asor_iteration_update",
    "gnc_baseline_update",
    "run_robust",
]

# Guard for the normalized cost-change denominator when all residuals vanish.
_COST_FLOOR = 1e-12

# Annealing factor shared by both GNC schedules, per the original GNC method.
_GNC_ANNEAL = 1.4
# Cap on the TLS control parameter; the weight band is numerically binary
# well before this point.
_GNC_TLS_MU_MAX = 1e12


class RobustMethod(Enum):
    """Reweighting method selector. NONE runs plain weighted least squares."""

    EROR = "eror"
    ESOR = "esor"
    ASOR = "asor"
    GNC_GM = "gnc-gm"
    GNC_TLS = "gnc-tls"
    NONE = "none"

    @classmethod
    def from_string(cls, name: str) -> "RobustMethod":
        key = name.strip().lower().replace("_", "-")
        for method in cls:
            if method.value == key:
                return method
        raise ValueError(f"unknown robust method: {name!r}")


class StoppingRule(Enum):
    COST_CHANGE = "cost-change"
    MAX_WEIGHTED_RESIDUAL = "max-weighted-residual"

    @classmethod
    def from_string(cls, name: str) -> "StoppingRule":
        key = name.strip().lower().replace("_", "-")
        for rule in cls:
            if rule.value == key:
                return rule
        raise ValueError(f"unknown stopping rule: {name!r}")


class StopReason(Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    WEIGHT_SUM_FLOOR = "weight_sum_floor"
    MAX_WEIGHTED_RESIDUAL_MET = "max_weighted_residual_met"


class WeightSumFloorError(ValueError):
    """Sum of weights is (numerically) zero; the outer loop should break."""


class RobustSolveError(RuntimeError):
    """Inner solver failure, annotated with the iteration it occurred in."""


@dataclass(frozen=True)
class AsorHyperParams:
    """Priors of the adaptive outlier-indicator scheme.

    Attributes:
        indicator_shape: Gamma shape of the outlier-indicator prior (> 0).
        scale_prior_shape: shape of the Gamma prior on the common outlier
            scale; must exceed 1 so the scale update stays positive.
        scale_prior_rate: rate of that prior (> 0).
        scale_init: initial outlier-scale estimate b_hat (> 0).
        inlier_prior: prior no-outlier probability, shared across channels,
            in (0, 1).

    Defaults are the initialization found to perform best across the studied
    applications.
    """

    indicator_shape: float = 0.5
    scale_prior_shape: float = 10000.0
    scale_prior_rate: float = 1000.0
    scale_init: float = 10000.0
    inlier_prior: float = 0.5

    def __post_init__(self) -> None:
        if not self.indicator_shape > 0:
            raise ValueError("indicator_shape must be > 0")
        if not self.scale_prior_shape > 1:
            raise ValueError("scale_prior_shape must be > 1")
        if not self.scale_prior_rate > 0:
            raise ValueError("scale_prior_rate must be > 0")
        if not self.scale_init > 0:
            raise ValueError("scale_init must be > 0")
        if not 0.0 < self.inlier_prior < 1.0:
            raise ValueError("inlier_prior must lie in (0, 1)")

    # Derived quantities are recomputed on access so they can never go stale.
    @property
    def posterior_shape(self) -> float:
        """Shape of the posterior Gamma factor: indicator_shape + 0.5."""
        return self.indicator_shape + 0.5

    @property
    def prior_odds_scale(self) -> float:
        """Prior-odds normalization (1/theta - 1) Gamma(alpha)/Gamma(a)."""
        return (1.0 / self.inlier_prior - 1.0) * (
            math.gamma(self.posterior_shape) / math.gamma(self.indicator_shape)
        )


@dataclass(frozen=True)
class RobustConfig:
    """Method selection plus every hyperparameter of the outer loop.

    `inlier_threshold_sq` is the maximum squared residual expected for an
    inlier, in the same (precision-scaled) units as the residuals. It doubles
    as the floor of the EROR/ESOR parametric updates and as the threshold of
    the alternative stopping rule.
    """

    method: RobustMethod
    inlier_threshold_sq: float
    asor: AsorHyperParams = field(default_factory=AsorHyperParams)
    convergence_tol: float = 1e-5
    max_iterations: int = 1000
    stopping_rule: StoppingRule = StoppingRule.COST_CHANGE
    weight_sum_floor: float = 1e-8

    def __post_init__(self) -> None:
        if not self.inlier_threshold_sq > 0:
            raise ValueError("inlier_threshold_sq must be > 0")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.weight_sum_floor < 0:
            raise ValueError("weight_sum_floor must be >= 0")


@dataclass(frozen=True)
class AsorState:
    """Per-measurement posterior parameters of the adaptive scheme.

    beta stacks the posterior Gamma rates (beta_i = 0.5 r_i^2 + b_hat), omega
    the posterior no-outlier probabilities. b_hat is the current common
    outlier-scale point estimate.
    """

    beta: np.ndarray
    omega: np.ndarray
    b_hat: float


@dataclass(frozen=True)
class GncControl:
    """Annealing state of a GNC baseline: surrogate control and step count."""

    mu: float
    iteration: int


@dataclass(frozen=True)
class WeightState:
    """Final weights plus the method-specific latent parameters.

    Only the fields of the active method are populated. `prior_weight_fixed`
    records that the (optional) prior term at index 0 is always weighted 1;
    `weights` covers measurement indices only.
    """

    weights: np.ndarray
    prior_weight_fixed: bool = False
    mu: Optional[float] = None
    rho_sq: Optional[float] = None
    asor: Optional[AsorState] = None
    gnc: Optional[GncControl] = None


@dataclass(frozen=True)
class ResidualEvaluation:
    """Squared residuals at an estimate plus the weighted cost."""

    squared_residuals: np.ndarray
    weighted_cost: float


@dataclass(frozen=True)
class IterationRecord:
    """Trace entry for one outer iteration.

    weighted_cost pairs the weights used by this iteration's variable update
    with the residuals it produced. `param` is the parametric value computed
    by this iteration (mu, rho^2, b_hat, or the GNC control), None when the
    iteration stopped before its parametric update ran.
    """

    weighted_cost: float
    param: Optional[float]
    weight_min: float
    weight_max: float
    weight_mean: float
    wall_time: float


@dataclass(frozen=True)
class RunTrace:
    iterations: tuple[IterationRecord, ...]
    stop_reason: StopReason


@dataclass(frozen=True)
class ProblemInstance:
    """A batch of residual generators consumable by `run_robust`.

    residual_sq_fn maps an estimate to the vector of squared measurement
    residuals (length num_measurements, precision-scaled). prior_sq_fn, when
    present, returns the squared residual of the Gaussian prior term; its
    weight is pinned to 1 throughout.
    """

    residual_sq_fn: Callable[[Any], np.ndarray]
    num_measurements: int
    prior_sq_fn: Optional[Callable[[Any], float]] = None

    def __post_init__(self) -> None:
        if self.num_measurements < 1:
            raise ValueError("problem needs at least one measurement residual")


# A weighted solver takes the measurement weight vector and an optional warm
# start, and returns the new estimate.
WeightedSolver = Callable[[np.ndarray, Any], Any]


def _check_finite(name: str, value: np.ndarray | float) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} must be finite")


def eror_weight(r_sq, mu):
    """Student-t derived weight  w = 1 / (1 + r_sq / mu).

    Strictly decreasing in r_sq with w(0) = 1 and w(mu) = 0.5. Accepts
    scalars or arrays.
    """
    r_sq = np.asarray(r_sq, dtype=float)
    _check_finite("r_sq", r_sq)
    if np.any(r_sq < 0):
        raise ValueError("r_sq must be nonnegative")
    if not (np.isfinite(mu) and mu > 0):
        raise ValueError("mu must be positive and finite")
    w = 1.0 / (1.0 + r_sq / mu)
    return float(w) if w.ndim == 0 else w


def _extreme_midpoint(r_max: float, r_min: float) -> float:
    # Geometric mean of the extreme squared residuals: the only symmetric
    # combine that sits far below the largest and far above the smallest
    # residual when they are orders of magnitude apart, which is what the
    # weight rule needs to span the (0, 1) range. The arithmetic midpoint
    # is pinned at r_max/2 and leaves gross outliers at weight ~ 1/3.
    return math.sqrt(r_max * r_min)


def eror_mu_update(squared_residuals, chi: float) -> float:
    """Adapt mu from the extreme squared residuals, floored at chi.

    mu = max(midpoint(r_max^2, r_min^2), chi) with max/min taken over the
    measurement residuals (the prior term, when present, is excluded by the
    caller).
    """
    r = np.asarray(squared_residuals, dtype=float)
    if r.size == 0:
        raise ValueError("at least one measurement residual is required")
    _check_finite("squared_residuals", r)
    if np.any(r < 0):
        raise ValueError("squared residuals must be nonnegative")
    if not (np.isfinite(chi) and chi > 0):
        raise ValueError("chi must be positive and finite")
    return max(_extreme_midpoint(float(r.max()), float(r.min())), chi)


def esor_weight(r_sq, rho_sq):
    """Logistic weight  w = 1 / (1 + exp(0.5 (r_sq - rho_sq))).

    Computed through the numerically safe sigmoid so large residuals
    saturate to 0 instead of overflowing. Accepts scalars or arrays.
    """
    r_sq = np.asarray(r_sq, dtype=float)
    _check_finite("r_sq", r_sq)
    if np.any(r_sq < 0):
        raise ValueError("r_sq must be nonnegative")
    if not (np.isfinite(rho_sq) and rho_sq > 0):
        raise ValueError("rho_sq must be positive and finite")
    w = expit(-0.5 * (r_sq - rho_sq))
    return float(w) if w.ndim == 0 else w


def esor_rho_update(weights, squared_residuals, gamma: float) -> float:
    """Weighted centroid of the squared residuals, floored at gamma.

    rho^2 = max(sum(w r^2) / sum(w), gamma). The sums run over every present
    index, including the prior term when one exists. A zero weight sum is
    the loop's exception-break condition and raises WeightSumFloorError.
    """
    w = np.asarray(weights, dtype=float)
    r = np.asarray(squared_residuals, dtype=float)
    if w.shape != r.shape or w.size == 0:
        raise ValueError("weights and squared_residuals must match and be nonempty")
    _check_finite("weights", w)
    _check_finite("squared_residuals", r)
    if not (np.isfinite(gamma) and gamma > 0):
        raise ValueError("gamma must be positive and finite")
    total = float(w.sum())
    if total <= 0.0:
        raise WeightSumFloorError("sum of weights is zero; cannot form the centroid")
    return max(float(np.dot(w, r)) / total, gamma)


def asor_iteration_update(
    squared_residuals,
    state: Optional[AsorState],
    hp: AsorHyperParams,
) -> tuple[AsorState, np.ndarray]:
    """One parametric update of the adaptive scheme, in Algorithm order.

    Given the current squared residuals and the previous outlier scale
    b_hat (from `state`, or hp.scale_init on the first call), computes in
    sequence:

        beta_i  = 0.5 r_i^2 + b_hat
        Omega_i = sigmoid(-(ln zeta + a ln b_hat - alpha ln beta_i + 0.5 r_i^2))
        b_hat'  = (A - 1 + sum_i a (1 - Omega_i))
                  / (B + sum_i (1 - Omega_i) alpha / beta_i)
        w_i     = Omega_i + (1 - Omega_i) alpha / beta_i

    Omega is evaluated in the log domain: the direct form overflows double
    precision once 0.5 r^2 exceeds ~709. The result is clipped to the
    smallest positive normal so the mathematically open interval (0, 1)
    survives float underflow.

    Returns the updated state and the weight vector.
    """
    r = np.asarray(squared_residuals, dtype=float)
    if r.size == 0:
        raise ValueError("at least one measurement residual is required")
    _check_finite("squared_residuals", r)
    if np.any(r < 0):
        raise ValueError("squared residuals must be nonnegative")
    b_hat = hp.scale_init if state is None else state.b_hat
    if not (np.isfinite(b_hat) and b_hat > 0):
        raise ValueError("b_hat must be positive and finite")

    a = hp.indicator_shape
    alpha = hp.posterior_shape
    beta = 0.5 * r + b_hat
    log_odds = (
        math.log(hp.prior_odds_scale)
        + a * math.log(b_hat)
        - alpha * np.log(beta)
        + 0.5 * r
    )
    omega = expit(-log_odds)
    info = np.finfo(float)
    omega = np.clip(omega, info.tiny, 1.0 - info.epsneg)

    gamma_mean = alpha / beta
    rejected = 1.0 - omega
    b_new = (hp.scale_prior_shape - 1.0 + a * float(rejected.sum())) / (
        hp.scale_prior_rate + float(np.dot(rejected, gamma_mean))
    )
    weights = omega + rejected * gamma_mean
    return AsorState(beta=beta, omega=omega, b_hat=b_new), weights


def gnc_baseline_update(
    method: RobustMethod,
    squared_residuals,
    control: Optional[GncControl],
    inlier_threshold_sq: float,
) -> tuple[np.ndarray, GncControl]:
    """Weight and schedule update for the GNC-GM / GNC-TLS baselines.

    Follows the graduated non-convexity reference method. GM starts with
    mu = 2 r_max^2 / cbar^2 and divides by 1.4 each iteration down to 1;
    its weights are (mu cbar^2 / (r^2 + mu cbar^2))^2. TLS starts with
    mu = cbar^2 / (2 r_max^2 - cbar^2) and multiplies by 1.4; its weights
    are 1 below the band [mu/(mu+1) cbar^2, (mu+1)/mu cbar^2], 0 above it
    and sqrt(cbar^2 mu(mu+1)/r^2) - mu inside, reaching exactly {0, 1} at
    the end of the schedule.

    Pass control=None on the first call; the schedule is initialized from
    the residuals of the unweighted solve.
    """
    r = np.asarray(squared_residuals, dtype=float)
    if r.size == 0:
        raise ValueError("at least one measurement residual is required")
    _check_finite("squared_residuals", r)
    c2 = inlier_threshold_sq
    if not (np.isfinite(c2) and c2 > 0):
        raise ValueError("inlier_threshold_sq must be positive and finite")
    r_max = float(r.max())

    if method is RobustMethod.GNC_GM:
        if control is None:
            mu = max(1.0, 2.0 * r_max / c2)
        else:
            mu = max(1.0, control.mu / _GNC_ANNEAL)
        weights = (mu * c2 / (r + mu * c2)) ** 2
    elif method is RobustMethod.GNC_TLS:
        if control is None:
            denom = 2.0 * r_max - c2
            mu = c2 / denom if denom > 0 else _GNC_TLS_MU_MAX
            mu = min(max(mu, 1e-12), _GNC_TLS_MU_MAX)
        else:
            mu = min(control.mu * _GNC_ANNEAL, _GNC_TLS_MU_MAX)
        low = mu / (mu + 1.0) * c2
        high = (mu + 1.0) / mu * c2
        weights = np.zeros_like(r)
        weights[r <= low] = 1.0
        band = (r > low) & (r < high)
        if band.any():
            weights[band] = np.clip(
                np.sqrt(c2 * mu * (mu + 1.0) / r[band]) - mu, 0.0, 1.0
            )
    else:
        raise ValueError(f"not a GNC baseline: {method}")

    iteration = 1 if control is None else control.iteration + 1
    return weights, GncControl(mu=mu, iteration=iteration)


def _weight_summary(weights: np.ndarray) -> tuple[float, float, float]:
    return float(weights.min()), float(weights.max()), float(weights.mean())


def run_robust(
    problem: ProblemInstance,
    solver: WeightedSolver,
    config: RobustConfig,
    initial_guess: Any = None,
) -> tuple[Any, WeightState, RunTrace]:
    """Alternating variable / residual / parametric / weight updates.

    Starting from unit weights, each iteration re-solves the weighted
    problem through the injected non-minimal solver, re-evaluates the
    squared residuals, and applies the active method's parametric and
    weight updates. The loop stops when:

    - the normalized change of the weighted cost sum(w r^2) between
      consecutive iterations falls below config.convergence_tol
      (GNC-GM instead converges on weight change once its schedule has
      reached the floor, matching the original method), or
    - config.max_iterations is reached, or
    - the measurement weight sum falls below config.weight_sum_floor, or
    - with StoppingRule.MAX_WEIGHTED_RESIDUAL, additionally as soon as
      max_i(w_i r_i^2) < inlier_threshold_sq.

    With method NONE the solver is called exactly once with unit weights.

    Returns (estimate, WeightState, RunTrace). The function is pure: the
    same inputs produce the same estimate, weights, and trace (wall times
    excepted).
    """
    method = config.method
    m = problem.num_measurements
    weights = np.ones(m)
    has_prior = problem.prior_sq_fn is not None

    mu: Optional[float] = None
    rho_sq: Optional[float] = None
    asor_state: Optional[AsorState] = None
    gnc: Optional[GncControl] = None

    records: list[IterationRecord] = []
    estimate: Any = None
    warm: Any = initial_guess
    prev_cost: Optional[float] = None
    stop: Optional[StopReason] = None

    for iteration in range(1, config.max_iterations + 1):
        started = time.perf_counter()
        try:
            estimate = solver(weights, warm)
        except Exception as exc:
            raise RobustSolveError(
                f"weighted solver failed at iteration {iteration}"
            ) from exc
        warm = estimate

        r = np.asarray(problem.residual_sq_fn(estimate), dtype=float)
        if r.shape != (m,):
            raise ValueError(
                f"residual_sq_fn returned shape {r.shape}, expected ({m},)"
            )
        prior_r = float(problem.prior_sq_fn(estimate)) if has_prior else 0.0
        cost = float(np.dot(weights, r)) + prior_r

        w_min, w_max, w_mean = _weight_summary(weights)

        def finish(param: Optional[float]) -> IterationRecord:
            return IterationRecord(
                weighted_cost=cost,
                param=param,
                weight_min=w_min,
                weight_max=w_max,
                weight_mean=w_mean,
                wall_time=time.perf_counter() - started,
            )

        if method is RobustMethod.NONE:
            records.append(finish(None))
            stop = StopReason.CONVERGED
            break

        if (
            config.stopping_rule is StoppingRule.MAX_WEIGHTED_RESIDUAL
            and float(np.max(weights * r)) < config.inlier_threshold_sq
        ):
            records.append(finish(None))
            stop = StopReason.MAX_WEIGHTED_RESIDUAL_MET
            break

        if (
            method is not RobustMethod.GNC_GM
            and prev_cost is not None
            and abs(cost - prev_cost) / max(cost, _COST_FLOOR)
            < config.convergence_tol
        ):
            records.append(finish(None))
            stop = StopReason.CONVERGED
            break
        prev_cost = cost

        if method is RobustMethod.EROR:
            mu = eror_mu_update(r, chi=config.inlier_threshold_sq)
            new_weights = eror_weight(r, mu)
            param = mu
        elif method is RobustMethod.ESOR:
            if has_prior:
                centroid_w = np.concatenate(([1.0], weights))
                centroid_r = np.concatenate(([prior_r], r))
            else:
                centroid_w, centroid_r = weights, r
            rho_sq = esor_rho_update(
                centroid_w, centroid_r, gamma=config.inlier_threshold_sq
            )
            new_weights = esor_weight(r, rho_sq)
            param = rho_sq
        elif method is RobustMethod.ASOR:
            asor_state, new_weights = asor_iteration_update(r, asor_state, config.asor)
            param = asor_state.b_hat
        elif method in (RobustMethod.GNC_GM, RobustMethod.GNC_TLS):
            new_weights, gnc = gnc_baseline_update(
                method, r, gnc, config.inlier_threshold_sq
            )
            param = gnc.mu
        else:  # pragma: no cover - enum is exhaustive
            raise ValueError(f"unhandled method: {method}")

        weight_change = float(np.max(np.abs(new_weights - weights)))
        weights = new_weights
        records.append(finish(param))

        if float(weights.sum()) < config.weight_sum_floor:
            stop = StopReason.WEIGHT_SUM_FLOOR
            break
        if (
            method is RobustMethod.GNC_GM
            and gnc is not None
            and gnc.mu <= 1.0
            and weight_change < config.convergence_tol
        ):
            stop = StopReason.CONVERGED
            break
    else:
        stop = StopReason.MAX_ITERS

    state = WeightState(
        weights=weights,
        prior_weight_fixed=has_prior,
        mu=mu,
        rho_sq=rho_sq,
        asor=asor_state,
        gnc=gnc,
    )
    return estimate, state, RunTrace(iterations=tuple(records), stop_reason=stop)
