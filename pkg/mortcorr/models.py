""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Maximum-likelihood fits of three stochastic mortality models:

    M1 (Lee-Carter)   log m(x, t) = b1(x) + b2(x) k2(t)
    M3 (APC)          log m(x, t) = b1(x) + k2(t) + g(t - x)
    M5 (CBD)          logit q(x, t) = k1(t) + k2(t) (x - xbar)

M1 and M3 use a Poisson likelihood for the deaths with alternating
block Newton updates; M5 is a Binomial GLM per year with initial
exposure E + D/2.
"""
import logging
import warnings

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import statsmodels.api as sm

from scipy.special import expit, gammaln, xlogy
from statsmodels.sandbox.stats.runs import runstest_1samp
from statsmodels.tools.sm_exceptions import ConvergenceWarning

MODELS = ("m1", "m3", "m5")
D_FLOOR = 1e-8
MIN_COHORT_CELLS = 5
MAX_ITER = 10000
TOL_LOGLIK = 1e-10
TOL_STEP = 1e-8
MAX_HALVINGS = 40
GLM_TOL = 1e-8
GLM_MAX_ITER = 200


class ConvergenceError(ArithmeticError):
    """Alternating maximisation did not converge. ``trace`` holds the
    log-likelihood after every iteration.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ModelFitError(ArithmeticError):
    pass


@dataclass(eq=False)
class ModelParams:
    """Fitted parameters. Vectors not used by a model stay None."""
    model: str
    ages: np.ndarray
    years: np.ndarray
    beta1: np.ndarray = None
    beta2: np.ndarray = None
    kappa1: np.ndarray = None
    kappa2: np.ndarray = None
    gamma: np.ndarray = None
    cohorts: np.ndarray = None
    cohort_counts: np.ndarray = None
    cohort_estimated: np.ndarray = None
    xbar: float = None
    constraints: dict = field(default_factory=dict)
    gender: str = "total"
    source: str = "crude"

    def gamma_of(self, cohorts):
        """Cohort effects for a grid of cohorts; cohorts outside the
        fitted range get 0.
        """
        cohorts = np.asarray(cohorts)
        index = cohorts - self.cohorts[0]
        inside = (index >= 0) & (index < self.cohorts.size)
        out = np.zeros(cohorts.shape)
        out[inside] = self.gamma[index[inside]]
        return out

    def predictor(self):
        x = self.ages[:, None].astype(float)
        if self.model == "m1":
            return self.beta1[:, None] + self.beta2[:, None] * self.kappa2[None, :]
        if self.model == "m3":
            c = self.years[None, :] - self.ages[:, None]
            return self.beta1[:, None] + self.kappa2[None, :] + self.gamma_of(c)
        return self.kappa1[None, :] + self.kappa2[None, :] * (x - self.xbar)

    def fitted_rates(self):
        """Central death rates (M1, M3) or death probabilities (M5)."""
        if self.model == "m5":
            return expit(self.predictor())
        return np.exp(self.predictor())

    def fitted_q(self):
        if self.model == "m5":
            return expit(self.predictor())
        return -np.expm1(-np.exp(self.predictor()))

    def to_dict(self):
        out = {"model": self.model, "gender": self.gender, "source": self.source,
               "xbar": self.xbar, "constraints": self.constraints}
        for name in ("ages", "years", "beta1", "beta2", "kappa1", "kappa2", "gamma", "cohorts",
                     "cohort_counts", "cohort_estimated"):
            value = getattr(self, name)
            out[name] = None if value is None else np.asarray(value).tolist()
        return out

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for name, dtype in (("ages", int), ("years", int), ("cohorts", int),
                            ("cohort_counts", int), ("cohort_estimated", bool),
                            ("beta1", float), ("beta2", float), ("kappa1", float),
                            ("kappa2", float), ("gamma", float)):
            if doc.get(name) is not None:
                doc[name] = np.asarray(doc[name], dtype=dtype)
        if doc.get("model") not in MODELS:
            raise ValueError("Unknown model %r" % doc.get("model"))
        return cls(**doc)

    def components(self):
        """Parameter vectors as named series for export."""
        ages = pd.Index(self.ages, name="age")
        years = pd.Index(self.years, name="year")
        out = {}
        if self.beta1 is not None:
            out["beta1"] = pd.Series(self.beta1, index=ages, name="beta1")
        if self.beta2 is not None:
            out["beta2"] = pd.Series(self.beta2, index=ages, name="beta2")
        if self.kappa1 is not None:
            out["kappa1"] = pd.Series(self.kappa1, index=years, name="kappa1")
        if self.kappa2 is not None:
            out["kappa2"] = pd.Series(self.kappa2, index=years, name="kappa2")
        if self.gamma is not None:
            out["gamma"] = pd.DataFrame({
                "gamma": self.gamma,
                "cells": self.cohort_counts,
                "estimated": self.cohort_estimated,
            }, index=pd.Index(self.cohorts, name="cohort"))
        return out


@dataclass(eq=False)
class FitDiagnostics:
    model: str
    dataset: str
    loglik: float
    k: int
    n: int
    bic: float
    residuals: np.ndarray
    iterations: int = 0
    gradient_norm: float = 0.
    converged: bool = True
    loglik_trace: list = field(default_factory=list)
    constraint_shift: float = 0.

    def to_dict(self):
        return {
            "model": self.model,
            "dataset": self.dataset,
            "loglik": self.loglik,
            "k": self.k,
            "n": self.n,
            "bic": self.bic,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "converged": self.converged,
            "constraint_shift": self.constraint_shift,
        }


def bic(loglik, k, n):
    """lnL - (k/2) ln(n); higher is better."""
    return float(loglik - 0.5 * k * np.log(n))


def _calibration_surface(surface):
    if surface.open_age:
        logging.info("Open age group %d+ left out of calibration" % surface.ages[-1])
        surface = surface.subset(ages=(surface.ages[0], surface.ages[-2]))
    return surface


def _observed(surface):
    weights = (~surface.missing).astype(float)
    if weights.sum() == 0:
        raise ModelFitError("No observed cells in the calibration window")
    deaths = np.where(weights > 0, surface.deaths, 0.)
    exposure = np.where(weights > 0, surface.exposure, 1.)
    zero_rows = [int(x) for x, row in zip(surface.ages, deaths) if not row.any()]
    if zero_rows:
        logging.warning("Ages without deaths %s: deaths floored at %g in the likelihood" % (
            zero_rows, D_FLOOR))
    return deaths, exposure, weights


def _poisson_loglik(deaths, exposure, eta, weights):
    mu = exposure * np.exp(eta)
    d = np.where(deaths > 0, deaths, D_FLOOR)
    return float(np.sum(weights * (xlogy(d, mu) - mu - gammaln(deaths + 1.))))


def _log_rates(deaths, exposure, weights):
    m = np.where(weights > 0, deaths / exposure, np.nan)
    floor = np.nanmin(m[m > 0]) if (m > 0).any() else D_FLOOR
    lm = np.log(np.maximum(m, floor / 10.))
    row_mean = np.nanmean(lm, axis=1, keepdims=True)
    return np.where(np.isnan(lm), row_mean, lm)


def _safe_ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


class _PoissonFitter:
    """Alternating block Newton for a Poisson log-bilinear predictor.
    Each block update is halved until the log-likelihood does not
    decrease, so the trace is monotone.
    """

    def __init__(self, deaths, exposure, weights, predictor, blocks):
        self.deaths = deaths
        self.exposure = exposure
        self.weights = weights
        self.predictor = predictor
        self.blocks = blocks

    def loglik(self, state):
        return _poisson_loglik(self.deaths, self.exposure, self.predictor(state), self.weights)

    def residual(self, state):
        fitted = self.exposure * np.exp(self.predictor(state))
        return self.weights * (self.deaths - fitted), self.weights * fitted

    def run(self, state, max_iter=MAX_ITER, model=""):
        ll = self.loglik(state)
        trace = [ll]
        for iteration in range(1, max_iter + 1):
            largest = 0.
            for name, newton_step in self.blocks:
                delta = newton_step(state, *self.residual(state))
                for _ in range(MAX_HALVINGS):
                    trial = dict(state)
                    trial[name] = state[name] + delta
                    trial_ll = self.loglik(trial)
                    if trial_ll >= ll:
                        state, ll = trial, trial_ll
                        largest = max(largest, float(np.max(np.abs(delta), initial=0.)))
                        break
                    delta = delta / 2.
            trace.append(ll)
            if abs(trace[-1] - trace[-2]) <= TOL_LOGLIK * abs(trace[-2]) and largest < TOL_STEP:
                logging.debug("%s converged after %d iterations" % (model.upper(), iteration))
                return state, trace, iteration
        raise ConvergenceError("%s did not converge in %d iterations (last log-likelihood "
                               "change %.3e)" % (model.upper(), max_iter,
                                                 trace[-1] - trace[-2]), trace)


def _m1_constraints(state):
    """sum(b2) = 1, sum(k2) = 0 without changing the predictor."""
    c1 = state["kappa2"].mean()
    c2 = state["beta2"].sum()
    return {
        "beta1": state["beta1"] + c1 * state["beta2"],
        "beta2": state["beta2"] / c2,
        "kappa2": c2 * (state["kappa2"] - c1),
    }


def fit_m1(surface, max_iter=MAX_ITER, dataset=None):
    surface = _calibration_surface(surface)
    deaths, exposure, weights = _observed(surface)
    lm = _log_rates(deaths, exposure, weights)
    beta1 = lm.mean(axis=1)
    u, s, vt = np.linalg.svd(lm - beta1[:, None], full_matrices=False)
    scale = u[:, 0].sum()
    state = {"beta1": beta1, "beta2": u[:, 0] / scale, "kappa2": vt[0] * s[0] * scale}

    def predictor(p):
        return p["beta1"][:, None] + p["beta2"][:, None] * p["kappa2"][None, :]

    blocks = [
        ("beta1", lambda p, r, f: _safe_ratio(r.sum(axis=1), f.sum(axis=1))),
        ("kappa2", lambda p, r, f: _safe_ratio(p["beta2"] @ r, (p["beta2"] ** 2) @ f)),
        ("beta2", lambda p, r, f: _safe_ratio(r @ p["kappa2"], f @ (p["kappa2"] ** 2))),
    ]
    fitter = _PoissonFitter(deaths, exposure, weights, predictor, blocks)
    state, trace, iterations = fitter.run(state, max_iter, "m1")
    eta = predictor(state)
    state = _m1_constraints(state)
    shift = float(np.max(np.abs(predictor(state) - eta)))
    params = ModelParams(model="m1", ages=surface.ages, years=surface.years,
                         beta1=state["beta1"], beta2=state["beta2"], kappa2=state["kappa2"],
                         constraints={"sum_beta2": 1., "sum_kappa2": 0.},
                         gender=surface.gender, source=surface.source)
    r, f = fitter.residual(state)
    gradient = np.concatenate([r.sum(axis=1), state["beta2"] @ r, r @ state["kappa2"]])
    A, T = surface.shape
    return params, _diagnostics(params, surface, weights, trace, iterations, gradient,
                                k=2 * A + T - 2, shift=shift, dataset=dataset)


def _cohort_support(surface, weights):
    cohorts = np.arange(surface.years[0] - surface.ages[-1], surface.years[-1] - surface.ages[0] + 1)
    index = surface.cohorts - cohorts[0]
    counts = np.bincount(index.ravel(), weights=weights.ravel(), minlength=cohorts.size)
    counts = counts.astype(int)
    return cohorts, index, counts, counts >= MIN_COHORT_CELLS


def _m3_constraints(state, cohorts, estimated, ages, years):
    """Pin level and slope of the estimated cohort effects and the
    level of the period index; the linear cohort trend moves into
    b1 and k2.
    """
    gamma = state["gamma"].copy()
    c = cohorts[estimated].astype(float)
    slope, level = np.polyfit(c, gamma[estimated], 1)
    gamma[estimated] -= level + slope * c
    beta1 = state["beta1"] + level - slope * ages
    kappa2 = state["kappa2"] + slope * years
    shift = kappa2.mean()
    return {"beta1": beta1 + shift, "kappa2": kappa2 - shift, "gamma": gamma}


def fit_m3(surface, max_iter=MAX_ITER, dataset=None):
    surface = _calibration_surface(surface)
    deaths, exposure, weights = _observed(surface)
    cohorts, index, counts, estimated = _cohort_support(surface, weights)
    excluded = cohorts[~estimated].tolist()
    if excluded:
        logging.info("M3: cohorts %s have fewer than %d cells, gamma pinned to 0" % (
            excluded, MIN_COHORT_CELLS))
    weights = weights * estimated[index]
    lm = _log_rates(deaths, exposure, weights)
    beta1 = lm.mean(axis=1)
    state = {"beta1": beta1, "kappa2": (lm - beta1[:, None]).mean(axis=0),
             "gamma": np.zeros(cohorts.size)}

    def predictor(p):
        return p["beta1"][:, None] + p["kappa2"][None, :] + p["gamma"][index]

    def gamma_step(p, r, f):
        num = np.bincount(index.ravel(), weights=r.ravel(), minlength=cohorts.size)
        den = np.bincount(index.ravel(), weights=f.ravel(), minlength=cohorts.size)
        return np.where(estimated, _safe_ratio(num, den), 0.)

    blocks = [
        ("beta1", lambda p, r, f: _safe_ratio(r.sum(axis=1), f.sum(axis=1))),
        ("kappa2", lambda p, r, f: _safe_ratio(r.sum(axis=0), f.sum(axis=0))),
        ("gamma", gamma_step),
    ]
    fitter = _PoissonFitter(deaths, exposure, weights, predictor, blocks)
    state, trace, iterations = fitter.run(state, max_iter, "m3")
    eta = predictor(state)
    state = _m3_constraints(state, cohorts, estimated, surface.ages, surface.years)
    used = weights > 0
    shift = float(np.max(np.abs(predictor(state) - eta)[used]))
    params = ModelParams(model="m3", ages=surface.ages, years=surface.years,
                         beta1=state["beta1"], kappa2=state["kappa2"], gamma=state["gamma"],
                         cohorts=cohorts, cohort_counts=counts, cohort_estimated=estimated,
                         constraints={"sum_kappa2": 0., "sum_gamma": 0., "sum_c_gamma": 0.},
                         gender=surface.gender, source=surface.source)
    r, f = fitter.residual(state)
    gradient = np.concatenate([r.sum(axis=1), r.sum(axis=0),
                               np.bincount(index.ravel(), weights=r.ravel())[estimated]])
    A, T = surface.shape
    return params, _diagnostics(params, surface, weights, trace, iterations, gradient,
                                k=A + T + int(estimated.sum()) - 4, shift=shift,
                                dataset=dataset)


def _binomial_loglik(deaths, trials, q, weights):
    return float(np.sum(weights * (
        xlogy(deaths, q) + xlogy(trials - deaths, 1. - q)
        + gammaln(trials + 1.) - gammaln(deaths + 1.) - gammaln(trials - deaths + 1.))))


def fit_m5(surface, dataset=None):
    """Per-year logistic regression of deaths out of E + D/2 on the
    centred age.
    """
    surface = _calibration_surface(surface)
    deaths, exposure, weights = _observed(surface)
    trials = exposure + deaths / 2.
    xbar = float(surface.ages.mean())
    centred = surface.ages - xbar
    kappa1 = np.empty(surface.years.size)
    kappa2 = np.empty(surface.years.size)
    gradient = []
    iterations = 0
    for j, year in enumerate(surface.years):
        used = weights[:, j] > 0
        if used.sum() < 3:
            raise ModelFitError("M5: fewer than 3 observed ages in %d" % year)
        endog = np.column_stack([deaths[used, j], trials[used, j] - deaths[used, j]])
        exog = sm.add_constant(centred[used].astype(float), has_constant="add")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", ConvergenceWarning)
                # Deviance rounding at national exposures exceeds tolerances below 1e-8
                result = sm.GLM(endog, exog, family=sm.families.Binomial()).fit(
                    tol=GLM_TOL, maxiter=GLM_MAX_ITER)
        except Exception as ee:
            raise ModelFitError("M5 fit failed for year %d: %s" % (year, ee))
        if not getattr(result, "converged", True):
            raise ModelFitError("M5 fit did not converge for year %d" % year)
        kappa1[j], kappa2[j] = result.params
        iterations = max(iterations, int(result.fit_history.get("iteration", 0)))
        q = expit(exog @ result.params)
        gradient.append(exog.T @ (deaths[used, j] - trials[used, j] * q))
    params = ModelParams(model="m5", ages=surface.ages, years=surface.years,
                         kappa1=kappa1, kappa2=kappa2, xbar=xbar, constraints={},
                         gender=surface.gender, source=surface.source)
    q = params.fitted_q()
    loglik = _binomial_loglik(deaths, trials, q, weights)
    n = int(weights.sum())
    k = 2 * surface.years.size
    return params, FitDiagnostics(
        model="m5", dataset=dataset or surface.source, loglik=loglik, k=k, n=n,
        bic=bic(loglik, k, n), residuals=standardized_residuals(params, surface),
        iterations=iterations, gradient_norm=float(np.linalg.norm(np.concatenate(gradient))),
        loglik_trace=[loglik])


def _diagnostics(params, surface, weights, trace, iterations, gradient, k, shift, dataset):
    deaths, exposure = np.where(weights > 0, surface.deaths, 0.), surface.exposure
    loglik = _poisson_loglik(deaths, np.where(weights > 0, exposure, 1.), params.predictor(),
                             weights)
    n = int(weights.sum())
    return FitDiagnostics(model=params.model, dataset=dataset or surface.source, loglik=loglik,
                          k=k, n=n, bic=bic(loglik, k, n),
                          residuals=standardized_residuals(params, surface),
                          iterations=iterations, gradient_norm=float(np.linalg.norm(gradient)),
                          loglik_trace=trace, constraint_shift=shift)


FITTERS = {"m1": fit_m1, "m3": fit_m3, "m5": fit_m5}


def fit_model(surface, model, dataset=None):
    try:
        fitter = FITTERS[model]
    except KeyError:
        raise ValueError("Unknown model %r, expected one of %s" % (model, MODELS))
    logging.info("Fitting %s on %s data" % (model.upper(), dataset or surface.source))
    return fitter(surface, dataset=dataset)


def standardized_residuals(params, surface):
    """(D - E[D])/sd(D) per cell: Poisson for M1/M3, Binomial with
    trials E + D/2 for M5. Cells outside the fit are NaN.
    """
    surface = surface.subset(ages=(params.ages[0], params.ages[-1]),
                             years=(params.years[0], params.years[-1]))
    deaths, exposure = surface.deaths, surface.exposure
    with np.errstate(invalid="ignore", divide="ignore"):
        if params.model == "m5":
            trials = exposure + deaths / 2.
            q = params.fitted_q()
            res = (deaths - trials * q) / np.sqrt(trials * q * (1. - q))
        else:
            fitted = exposure * params.fitted_rates()
            res = (deaths - fitted) / np.sqrt(fitted)
    res[surface.missing] = np.nan
    if params.model == "m3":
        index = surface.cohorts - params.cohorts[0]
        res[~params.cohort_estimated[index]] = np.nan
    return res


def compare_bic(fits):
    """Rank fits by BIC, best (highest) first."""
    frame = pd.DataFrame([fit.to_dict() for fit in fits],
                         columns=["model", "dataset", "loglik", "k", "n", "bic"])
    frame = frame.sort_values(["bic", "model", "dataset"], ascending=[False, True, True],
                              kind="mergesort").reset_index(drop=True)
    frame["rank"] = np.arange(1, len(frame) + 1)
    return frame


def bic_table(fits, reference="crude"):
    """Model by dataset BIC with the % difference of every dataset
    against ``reference``.
    """
    frame = pd.DataFrame([fit.to_dict() for fit in fits])
    table = frame.pivot(index="model", columns="dataset", values="bic")
    if reference in table.columns:
        for dataset in table.columns.tolist():
            if dataset != reference:
                table["pct_diff_%s" % dataset] = 100. * (
                    table[dataset] - table[reference]) / table[reference].abs()
    table.columns.name = None
    return table.reset_index()


def residual_randomness(residuals, ages, years):
    """Runs test on the signs of standardised residuals ordered along
    age, time and cohort. Returns {axis: (z, p-value)}.
    """
    res = np.asarray(residuals, dtype=float)
    cohorts = np.asarray(years)[None, :] - np.asarray(ages)[:, None]
    ages_grid = np.broadcast_to(np.asarray(ages)[:, None], res.shape)
    by_cohort = np.lexsort((ages_grid.ravel(), cohorts.ravel()))
    orders = {
        "age": res.T.ravel(),
        "time": res.ravel(),
        "cohort": res.ravel()[by_cohort],
    }
    out = {}
    for axis, values in orders.items():
        values = values[~np.isnan(values)]
        if values.size < 2 or (values > 0).all() or (values <= 0).all():
            out[axis] = (np.nan, np.nan)
            continue
        z, p = runstest_1samp(values, cutoff=0., correction=False)
        out[axis] = (float(z), float(p))
    return out


def _relative_drift(reference, other):
    common = reference.index.intersection(other.index)
    a = reference.loc[common].to_numpy(dtype=float)
    b = other.loc[common].to_numpy(dtype=float)
    scale = np.max(np.abs(a))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else 0.


def parameter_stability(surface, params, shorten=5):
    """Refit on a window without the first ``shorten`` years and on an
    age band without the first ``shorten`` ages; report the largest
    relative drift of the age and period vectors. Period vectors are
    compared after centring on the common years.
    """
    out = {}
    reduced = {
        "window": surface.subset(years=(surface.years[0] + shorten, surface.years[-1])),
        "age_band": surface.subset(ages=(surface.ages[0] + shorten, surface.ages[-1])),
    }
    for label, sub in reduced.items():
        other, _ = fit_model(sub, params.model, dataset=params.source)
        reference = params.components()
        components = other.components()
        if params.model == "m1":
            # b2 and k2 rescaled so that b2 sums to 1 on the common ages
            common = reference["beta2"].index.intersection(components["beta2"].index)
            for parts in (reference, components):
                scale = parts["beta2"].loc[common].sum()
                parts["beta2"] = parts["beta2"] / scale
                parts["kappa2"] = parts["kappa2"] * scale
        drifts = []
        for name, series in components.items():
            if name == "gamma":
                continue
            ref = reference[name]
            if name.startswith("kappa"):
                common = ref.index.intersection(series.index)
                ref = ref.loc[common] - ref.loc[common].mean()
                series = series.loc[common] - series.loc[common].mean()
            elif params.model == "m3" and name == "beta1":
                common = ref.index.intersection(series.index)
                ref = ref.loc[common] - ref.loc[common].mean()
                series = series.loc[common] - series.loc[common].mean()
            drifts.append(_relative_drift(ref, series))
        out[label] = max(drifts)
    return out
