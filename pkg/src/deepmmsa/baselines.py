"""Classical survival estimators: Kaplan-Meier, Nelson-Aalen and Cox regression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function.

    ``f(t) = initial_value`` for ``t < knots[0]`` and ``values[k]`` on
    ``[knots[k], knots[k+1])``. Evaluating exactly at a knot gives the
    post-jump value.
    """

    knots: np.ndarray
    values: np.ndarray
    initial_value: float

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-D and of equal length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right")
        table = np.concatenate([[self.initial_value], self.values])
        out = table[idx]
        return float(out) if out.ndim == 0 else out

    def to_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.knots.tolist(), self.values.tolist()))


def _check_survival_input(times, events):
    t = np.asarray(times, dtype=np.float64).ravel()
    e = np.asarray(events).ravel()
    if t.size == 0:
        raise ValueError("empty input")
    if t.shape != e.shape:
        raise ValueError(f"{t.size} times but {e.size} events")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    if np.any(t < 0):
        raise ValueError("times must be non-negative")
    if not np.all((e == 0) | (e == 1)):
        raise ValueError("events must be 0 or 1")
    return t, e.astype(bool)


def _event_table(times, events):
    """Distinct event times with death counts and at-risk counts."""
    t, e = _check_survival_input(times, events)
    event_times, deaths = np.unique(t[e], return_counts=True)
    sorted_t = np.sort(t)
    at_risk = t.size - np.searchsorted(sorted_t, event_times, side="left")
    return event_times, deaths, at_risk


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit estimate of the survival function."""
    event_times, deaths, at_risk = _event_table(times, events)
    surv = np.cumprod(1.0 - deaths / at_risk)
    return StepFunction(event_times, surv, 1.0)


def nelson_aalen(times, events) -> StepFunction:
    """Cumulative hazard estimate ``H(t) = sum over event times <= t of d/n``."""
    event_times, deaths, at_risk = _event_table(times, events)
    return StepFunction(event_times, np.cumsum(deaths / at_risk), 0.0)


# ---------------------------------------------------------------- Cox regression


class CoxFitError(RuntimeError):
    pass


class ConvergenceError(CoxFitError):
    def __init__(self, message, coefficients, log_likelihoods):
        super().__init__(message)
        self.coefficients = coefficients
        self.log_likelihoods = log_likelihoods


class DivergentCoefficientError(CoxFitError):
    def __init__(self, message, coefficients):
        super().__init__(message)
        self.coefficients = coefficients


@dataclass(frozen=True)
class CoxConfig:
    max_iter: int = 50
    tol: float = 1e-8
    max_halvings: int = 10
    beta_bound: float = 30.0
    flat_information: float = 1e-6


@dataclass(frozen=True)
class CoxModel:
    coefficients: np.ndarray
    baseline_hazard: StepFunction
    n_iterations: int
    final_log_partial_likelihood: float
    initial_log_partial_likelihood: float
    log_likelihood_history: list = field(default_factory=list)

    @property
    def n_covariates(self) -> int:
        return self.coefficients.size


class _PartialLikelihood:
    """Breslow log partial likelihood with gradient and Hessian."""

    def __init__(self, x: np.ndarray, times: np.ndarray, events: np.ndarray):
        order = np.argsort(-times, kind="stable")
        self.x = x[order]
        self.t = times[order]
        self.e = events[order]
        # index of the last member of each subject's tie group in descending order,
        # so cumulative sums up to it cover the full risk set {j : t_j >= t_i}
        _, first = np.unique(-self.t, return_index=True)
        group_end = np.append(first[1:], self.t.size) - 1
        group_of = np.searchsorted(first, np.arange(self.t.size), side="right") - 1
        self.risk_end = group_end[group_of]

    def __call__(self, beta: np.ndarray, derivatives: bool = True):
        x, e = self.x, self.e
        eta = x @ beta
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = np.cumsum(w)[self.risk_end]
        ll = float(np.sum(eta[e] - shift - np.log(s0[e])))
        if not derivatives:
            return ll
        wx = w[:, None] * x
        s1 = np.cumsum(wx, axis=0)[self.risk_end]
        s2 = np.cumsum(wx[:, :, None] * x[:, None, :], axis=0)[self.risk_end]
        xbar = s1[e] / s0[e, None]
        grad = (x[e] - xbar).sum(axis=0)
        hess = -(s2[e] / s0[e, None, None] - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
        return ll, grad, hess


def cox_fit(covariates, times, events, config: CoxConfig | None = None) -> CoxModel:
    """Newton-Raphson fit of the Cox model on internally standardized covariates.

    Steps that lower the log partial likelihood are halved (up to
    ``max_halvings`` times). Coefficients are reported on the original scale;
    constant columns get coefficient 0.
    """
    config = config or CoxConfig()
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    t, e = _check_survival_input(times, events)
    if x.shape[0] != t.size:
        raise ValueError(f"{x.shape[0]} covariate rows but {t.size} times")
    if t.size < 2:
        raise ValueError("cox_fit needs at least 2 subjects")
    if not e.any():
        raise ValueError("cox_fit needs at least one event")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")

    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    active = sd > 0
    z = (x[:, active] - mean[active]) / sd[active]
    beta_z = np.zeros(z.shape[1])
    pl = _PartialLikelihood(z, t, e)

    ll0 = pl(beta_z, derivatives=False)
    history = [ll0]
    n_iter = 0
    if z.shape[1]:
        ll, grad, hess = pl(beta_z)
        while np.max(np.abs(grad)) > config.tol:
            if n_iter >= config.max_iter:
                raise ConvergenceError(
                    f"Cox fit did not converge in {config.max_iter} iterations "
                    f"(gradient max-norm {np.max(np.abs(grad)):.3g})",
                    _to_original(beta_z, active, sd), history)
            try:
                step = np.linalg.solve(-hess, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
            candidate = beta_z + step
            new_ll = pl(candidate, derivatives=False)
            halvings = 0
            while not new_ll >= ll and halvings < config.max_halvings:
                step = step / 2
                candidate = beta_z + step
                new_ll = pl(candidate, derivatives=False)
                halvings += 1
            if not new_ll >= ll:
                # no ascent direction left at floating-point resolution
                break
            beta_z = candidate
            n_iter += 1
            if np.max(np.abs(beta_z)) > config.beta_bound:
                raise DivergentCoefficientError(
                    "divergent coefficient: |beta| exceeded "
                    f"{config.beta_bound} on the standardized scale (monotone likelihood / separation)",
                    _to_original(beta_z, active, sd))
            ll, grad, hess = pl(beta_z)
            history.append(ll)
        # a vanishing gradient far from the origin with no curvature left is a
        # likelihood that keeps rising towards infinity, not a maximum
        information = np.linalg.eigvalsh(-hess).min()
        if information < config.flat_information * e.sum() and np.max(np.abs(beta_z)) > 1.0:
            raise DivergentCoefficientError(
                "divergent coefficient: the log partial likelihood flattens out as |beta| grows "
                "(monotone likelihood / separation)", _to_original(beta_z, active, sd))

    beta = _to_original(beta_z, active, sd)
    return CoxModel(beta, _breslow_baseline(x, t, e, beta), n_iter, history[-1], ll0, history)


def _to_original(beta_z, active, sd):
    beta = np.zeros(active.size)
    beta[active] = beta_z / sd[active]
    return beta


def _breslow_baseline(x, t, e, beta) -> StepFunction:
    """Breslow cumulative baseline hazard (covariates at zero)."""
    risk = np.exp(x @ beta)
    event_times, deaths = np.unique(t[e], return_counts=True)
    order = np.argsort(t)
    t_sorted, r_sorted = t[order], risk[order]
    tail = np.cumsum(r_sorted[::-1])[::-1]
    denom = tail[np.searchsorted(t_sorted, event_times, side="left")]
    return StepFunction(event_times, np.cumsum(deaths / denom), 0.0)


def cox_risk_scores(model: CoxModel, covariates) -> np.ndarray:
    """Negated linear predictor, so larger means longer predicted survival."""
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != model.n_covariates:
        raise ValueError(f"covariates have {x.shape[1]} columns, model expects {model.n_covariates}")
    return -(x @ model.coefficients)
