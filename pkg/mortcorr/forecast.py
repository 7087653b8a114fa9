""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Projection of fitted models with random walks with drift on the period
indices (and on the M3 cohort effects), scenario sets closed to a
terminal age, pointwise percentile tables and life-expectancy fans.
"""
import logging

from dataclasses import dataclass, field

import netCDF4
import numpy as np
import pandas as pd
import scipy.linalg

from scipy.special import expit

from mortcorr import __version__
from mortcorr.lexis import MIN_CLOSURE_AGES, QSurface, improvements, kannisto_extend, to_m
from mortcorr.models import fit_model

MIN_PERIODS = 10
FAN_PERCENTILES = (0.5, 50., 99.5)


class DynamicsError(ValueError):
    pass


class HorizonError(ValueError):
    pass


@dataclass(eq=False)
class TimeSeriesDynamics:
    """Random walk with drift on the period indices: one index for M1
    and M3, the pair (k1, k2) for M5. ``gamma_*`` describe the M3 cohort
    random walk.
    """
    model: str
    drift: np.ndarray
    covariance: np.ndarray
    n_periods: int = 0
    gamma_drift: float = 0.
    gamma_variance: float = 0.

    def __post_init__(self):
        self.drift = np.atleast_1d(np.asarray(self.drift, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        d = self.drift.size
        if self.covariance.shape != (d, d):
            raise DynamicsError("Covariance must be %dx%d" % (d, d))
        if not np.allclose(self.covariance, self.covariance.T):
            raise DynamicsError("Covariance must be symmetric")
        scale = max(1., float(np.abs(self.covariance).max()))
        if np.linalg.eigvalsh(self.covariance).min() < -1e-12 * scale:
            raise DynamicsError("Covariance must be positive semi-definite")
        if self.gamma_variance < 0:
            raise DynamicsError("Cohort variance must be non-negative")

    def root(self):
        """Symmetric square root of the innovation covariance."""
        w, v = scipy.linalg.eigh(self.covariance)
        return (v * np.sqrt(np.clip(w, 0., None))) @ v.T

    def to_dict(self):
        return {
            "model": self.model,
            "drift": self.drift.tolist(),
            "covariance": self.covariance.tolist(),
            "n_periods": self.n_periods,
            "gamma_drift": self.gamma_drift,
            "gamma_variance": self.gamma_variance,
        }


def _indices(params):
    if params.model == "m5":
        return np.vstack([params.kappa1, params.kappa2])
    return params.kappa2[None, :]


def estimate_dynamics(params):
    index = _indices(params)
    if index.shape[1] < MIN_PERIODS:
        raise DynamicsError("Need at least %d fitted periods, got %d" % (
            MIN_PERIODS, index.shape[1]))
    steps = np.diff(index, axis=1)
    covariance = np.atleast_2d(np.cov(steps, ddof=1))
    dynamics = TimeSeriesDynamics(model=params.model, drift=steps.mean(axis=1),
                                  covariance=covariance, n_periods=index.shape[1])
    if params.model == "m3":
        gamma = params.gamma[params.cohort_estimated]
        if gamma.size >= 3:
            gamma_steps = np.diff(gamma)
            dynamics.gamma_drift = float(gamma_steps.mean())
            dynamics.gamma_variance = float(gamma_steps.var(ddof=1))
    logging.debug("Dynamics for %s: drift %s" % (params.model.upper(), dynamics.drift))
    return dynamics


@dataclass(eq=False)
class ScenarioSet:
    """Death probabilities q[s, x, t] for scenarios s (0 is the central
    path), ages up to omega and years t0+1 .. t0+T. ``base`` is the
    closed fitted table of year t0.
    """
    model: str
    ages: np.ndarray
    years: np.ndarray
    q: np.ndarray
    base: np.ndarray
    base_year: int
    seed: int
    raw_max_age: int
    clamps: int = 0
    gender: str = "total"
    source: str = "crude"
    settings: dict = field(default_factory=dict)

    @property
    def n_scenarios(self):
        return self.q.shape[0]

    @property
    def horizon(self):
        return self.years.size

    @property
    def omega(self):
        return int(self.ages[-1])

    def scenario(self, s):
        return QSurface(ages=self.ages, years=self.years, q=self.q[s], gender=self.gender,
                        source=self.source, raw_max_age=self.raw_max_age)

    def central(self):
        return self.scenario(0)

    def base_table(self):
        return QSurface(ages=self.ages, years=[self.base_year], q=self.base[:, None],
                        gender=self.gender, source=self.source, raw_max_age=self.raw_max_age)

    def summary(self):
        return {
            "model": self.model,
            "n_scenarios": self.n_scenarios,
            "horizon": self.horizon,
            "seed": self.seed,
            "base_year": self.base_year,
            "omega": self.omega,
            "clamps": self.clamps,
            "gender": self.gender,
            "source": self.source,
            **self.settings,
        }


def _predict(params, index, gamma_of_cohort, years):
    """Model equation on the fitted ages for given index paths."""
    x = params.ages[:, None].astype(float)
    if params.model == "m1":
        return params.beta1[:, None] + params.beta2[:, None] * index[0][None, :]
    if params.model == "m3":
        cohorts = np.asarray(years)[None, :] - params.ages[:, None]
        return params.beta1[:, None] + index[0][None, :] + gamma_of_cohort(cohorts)
    return index[0][None, :] + index[1][None, :] * (x - params.xbar)


def _to_q(params, eta):
    if params.model == "m5":
        return expit(eta)
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(eta))


def _close(q, fitted_ages, omega, fit_ages):
    """Extend q[..., age, year] from the fitted band to omega with the
    Kannisto fit on the last ``fit_ages`` ages.
    """
    n_fit = min(fit_ages, fitted_ages.size)
    if n_fit < MIN_CLOSURE_AGES:
        raise HorizonError("Closure needs at least %d fitting ages, found %d" % (
            MIN_CLOSURE_AGES, n_fit))
    band = np.moveaxis(q[..., -n_fit:, :], -2, 0)
    target = np.arange(fitted_ages[-1] + 1, omega)
    extended = np.moveaxis(kannisto_extend(band, fitted_ages[-n_fit:], target), 0, -2)
    ones = np.ones(q.shape[:-2] + (1, q.shape[-1]))
    return np.concatenate([q, extended, ones], axis=-2)


def _clamp(q):
    bad = ~np.isfinite(q) | (q < 0.) | (q > 1.)
    count = int(bad.sum())
    return np.clip(np.nan_to_num(q, nan=1., posinf=1., neginf=0.), 0., 1.), count


def simulate(params, dynamics, n_scenarios=5000, horizon=60, seed=0, omega=120,
             closure_fit_ages=15):
    """Scenario 0 is the zero-innovation central path; scenario s > 0
    draws from the s-th child of ``SeedSequence(seed)``, so results do
    not depend on the order in which scenarios are computed.
    """
    if n_scenarios < 1 or horizon < 1:
        raise DynamicsError("Need at least one scenario and one projection year")
    if omega <= params.ages[-1]:
        raise HorizonError("Terminal age %d must exceed the last fitted age %d" % (
            omega, params.ages[-1]))
    t0 = int(params.years[-1])
    years = np.arange(t0 + 1, t0 + horizon + 1)
    steps = np.arange(1, horizon + 1)
    start = _indices(params)[:, -1]
    root = dynamics.root()
    d = dynamics.drift.size

    if params.model == "m3":
        last_cohort = int(params.cohorts[params.cohort_estimated][-1])
        future = np.arange(last_cohort + 1, years[-1] - params.ages[0] + 1)
        gamma_last = params.gamma_of(np.array([last_cohort]))[0]
        gamma_central = gamma_last + dynamics.gamma_drift * np.arange(1, future.size + 1)
        gamma_sd = np.sqrt(dynamics.gamma_variance)

    def gamma_lookup(path):
        def lookup(cohorts):
            out = params.gamma_of(np.minimum(cohorts, last_cohort))
            ahead = cohorts > last_cohort
            out[ahead] = path[cohorts[ahead] - last_cohort - 1]
            return out
        return lookup

    children = np.random.SeedSequence(seed).spawn(n_scenarios)
    cube = np.empty((n_scenarios, params.ages.size, horizon))
    for s in range(n_scenarios):
        index = start[:, None] + dynamics.drift[:, None] * steps[None, :]
        lookup = None
        if s == 0:
            if params.model == "m3":
                lookup = gamma_lookup(gamma_central)
        else:
            rng = np.random.default_rng(children[s])
            shocks = root @ rng.standard_normal((d, horizon))
            index = index + np.cumsum(shocks, axis=1)
            if params.model == "m3":
                noise = np.cumsum(gamma_sd * rng.standard_normal(future.size))
                lookup = gamma_lookup(gamma_central + noise)
        cube[s] = _to_q(params, _predict(params, index, lookup, years))

    cube, clamps = _clamp(_close(cube, params.ages, omega, closure_fit_ages))
    if clamps:
        logging.warning("%d projected death probabilities clamped to [0, 1]" % clamps)

    fitted = params.fitted_q()[:, -1:]
    base, _ = _clamp(_close(fitted, params.ages, omega, closure_fit_ages))
    logging.info("Simulated %d scenarios of %s over %d-%d (seed %d)" % (
        n_scenarios, params.model.upper(), years[0], years[-1], seed))
    return ScenarioSet(model=params.model, ages=np.arange(params.ages[0], omega + 1),
                       years=years, q=cube, base=base[:, 0], base_year=t0, seed=seed,
                       raw_max_age=int(params.ages[-1]), clamps=clamps,
                       gender=params.gender, source=params.source,
                       settings={"closure_fit_ages": closure_fit_ages})


def percentile_table(scenarios, p, base=None):
    """q_p(x, t) = q(x, t0) (1 + IR_p(x, t)) where IR_p is the
    nearest-rank p-th percentile over scenarios of the relative change
    of q since t0.
    """
    if not 0. < p < 100.:
        raise ValueError("Percentile must lie in (0, 100), got %r" % p)
    base = scenarios.base if base is None else np.asarray(base, dtype=float)
    if (base == 0).any():
        raise HorizonError("Base death probability is zero at ages %s" % (
            scenarios.ages[base == 0].tolist(),))
    ir = (scenarios.q - base[None, :, None]) / base[None, :, None]
    ir_p = np.percentile(ir, p, axis=0, method="inverted_cdf")
    q, _ = _clamp(base[:, None] * (1. + ir_p))
    return QSurface(ages=scenarios.ages, years=scenarios.years, q=q, gender=scenarios.gender,
                    source=scenarios.source, raw_max_age=scenarios.raw_max_age)


@dataclass(eq=False)
class LifeExpectancyFan:
    kind: str
    age: int
    truncation: int
    years: np.ndarray
    values: np.ndarray
    percentiles: pd.DataFrame

    @property
    def central(self):
        return pd.Series(self.values[0], index=pd.Index(self.years, name="year"), name="central")

    def to_frame(self):
        frame = self.percentiles.copy()
        frame.insert(0, "central", self.values[0])
        return frame.reset_index()


def _percentile_label(p):
    return "p%s" % ("%g" % p)


def life_expectancy_fan(scenarios, kind="period", age=65, truncation=None,
                        percentiles=FAN_PERCENTILES):
    """Per-scenario curtate life expectancy at ``age`` truncated at
    ``truncation`` (default omega) for every projection year, with
    scenario-ranked percentile curves. Cohort expectancies follow the
    diagonal from each start year and are reported only for start years
    whose diagonal stays inside the horizon.
    """
    if kind not in ("period", "cohort"):
        raise ValueError("Unknown life expectancy kind %r" % kind)
    truncation = scenarios.omega if truncation is None else int(truncation)
    if truncation > scenarios.omega:
        raise HorizonError("Truncation age %d beyond omega %d" % (truncation, scenarios.omega))
    if not scenarios.ages[0] <= age < truncation:
        raise HorizonError("Age %d outside %d-%d" % (age, scenarios.ages[0], truncation))
    rows = np.arange(age, truncation) - scenarios.ages[0]
    if kind == "period":
        years = scenarios.years
        values = np.sum(np.cumprod(1. - scenarios.q[:, rows, :], axis=1), axis=1)
    else:
        n_start = scenarios.horizon - rows.size + 1
        if n_start < 1:
            raise HorizonError("Horizon of %d years too short for cohort expectancy from age %d "
                               "to %d; extend the projection" % (scenarios.horizon, age,
                                                                  truncation))
        years = scenarios.years[:n_start]
        steps = np.arange(rows.size)
        values = np.empty((scenarios.n_scenarios, n_start))
        for j in range(n_start):
            diagonal = scenarios.q[:, rows, j + steps]
            values[:, j] = np.sum(np.cumprod(1. - diagonal, axis=1), axis=1)
    table = np.percentile(values, list(percentiles), axis=0, method="inverted_cdf")
    frame = pd.DataFrame(table.T, index=pd.Index(years, name="year"),
                         columns=[_percentile_label(p) for p in percentiles])
    return LifeExpectancyFan(kind=kind, age=age, truncation=truncation, years=years,
                             values=values, percentiles=frame)


def compare_fans(crude, corrected):
    """Corrected minus crude fan curves, in months."""
    if not np.array_equal(crude.years, corrected.years):
        raise ValueError("Fans cover different years")
    diff = 12. * (corrected.to_frame().set_index("year") - crude.to_frame().set_index("year"))
    diff.columns = ["%s_months" % c for c in diff.columns]
    return diff.reset_index()


def historical_overlay(surface, model, holdout=10, omega=120):
    """Refit without the last ``holdout`` years, project the central
    path over them and compare the mean improvement rate per age with
    the realised one.
    """
    if holdout < 1 or holdout >= surface.years.size - MIN_PERIODS + 1:
        raise DynamicsError("Hold-out of %d years leaves too short a fit window" % holdout)
    cut = int(surface.years[-1] - holdout)
    params, _ = fit_model(surface.subset(years=(surface.years[0], cut)), model)
    dynamics = estimate_dynamics(params)
    path = simulate(params, dynamics, n_scenarios=1, horizon=holdout, seed=0, omega=omega)
    band = np.arange(params.ages.size)
    m_path = np.hstack([to_m(params.fitted_q()[:, -1:]), to_m(path.q[0][band, :])])
    projected = np.mean(m_path[:, 1:] / m_path[:, :-1] - 1., axis=1)
    realised = improvements(surface.subset(ages=(params.ages[0], params.ages[-1]),
                                           years=(cut, surface.years[-1])))
    actual = np.nanmean(realised.r, axis=1)
    return pd.DataFrame({
        "age": params.ages,
        "projected": projected,
        "realised": actual,
        "difference": projected - actual,
    })


def export_scenarios(scenarios, filename, metadata=None):
    """Write the scenario cube to a classic-format netCDF file."""
    nc_ds = netCDF4.Dataset(filename, "w", format="NETCDF3_64BIT_OFFSET")
    nc_ds.createDimension("scenario", scenarios.n_scenarios)
    nc_ds.createDimension("age", scenarios.ages.size)
    nc_ds.createDimension("year", scenarios.years.size)
    age = nc_ds.createVariable("age", "i4", ("age",))
    age[:] = scenarios.ages
    age.long_name = "age at last birthday"
    year = nc_ds.createVariable("year", "i4", ("year",))
    year[:] = scenarios.years
    year.long_name = "calendar year"
    q = nc_ds.createVariable("q", "f8", ("scenario", "age", "year"))
    q[:] = scenarios.q
    q.long_name = "one-year death probability"
    base = nc_ds.createVariable("q_base", "f8", ("age",))
    base[:] = scenarios.base
    base.long_name = "fitted death probability in the base year"
    attrs = {"title": "mortcorr scenario set", "mortcorr_version": __version__}
    attrs.update({k: str(v) for k, v in scenarios.summary().items()})
    attrs.update({k: str(v) for k, v in (metadata or {}).items()})
    nc_ds.setncatts(attrs)
    nc_ds.close()
    return filename
