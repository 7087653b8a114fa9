""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Period mortality surfaces on the Lexis grid and the demographic
calculus shared by the other modules: rates, death probabilities,
improvement rates, life expectancies, death curves and old-age
closure.
"""
import logging

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from scipy.special import expit, logit

SOURCES = ("crude", "corrected", "simulated")
MIN_CLOSURE_AGES = 5


class SurfaceError(ValueError):
    pass


def _frozen(values, dtype=float):
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


def _consecutive(values, what):
    if values.size > 1 and not np.all(np.diff(values) == 1):
        raise SurfaceError("%s must be consecutive integers" % what)


@dataclass(frozen=True, eq=False)
class MortalitySurface:
    """Deaths D(x, t), exposure E(x, t) and central death rates
    m(x, t) = D/E on a rectangular age-by-year grid. Missing cells are
    NaN in deaths or exposure.
    """
    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray
    gender: str = "total"
    source: str = "crude"
    open_age: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ages", _frozen(self.ages, int))
        object.__setattr__(self, "years", _frozen(self.years, int))
        object.__setattr__(self, "deaths", _frozen(self.deaths))
        object.__setattr__(self, "exposure", _frozen(self.exposure))
        _consecutive(self.ages, "Ages")
        _consecutive(self.years, "Years")
        shape = (self.ages.size, self.years.size)
        if self.deaths.shape != shape or self.exposure.shape != shape:
            raise SurfaceError("Deaths %s and exposure %s must both have shape %s" % (
                self.deaths.shape, self.exposure.shape, shape))
        if self.source not in SOURCES:
            raise SurfaceError("Unknown surface source %r" % self.source)
        observed = ~self.missing
        if (self.exposure[observed] <= 0).any():
            raise SurfaceError("Exposure must be positive on all non-missing cells")
        if (self.deaths[observed] < 0).any():
            raise SurfaceError("Deaths must be non-negative")

    @property
    def shape(self):
        return self.deaths.shape

    @property
    def missing(self):
        return np.isnan(self.deaths) | np.isnan(self.exposure)

    @property
    def rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            m = self.deaths / self.exposure
        m[self.missing] = np.nan
        return m

    @property
    def cohorts(self):
        """Year of birth t - x of every cell."""
        return self.years[None, :] - self.ages[:, None]

    def diagonal(self, cohort):
        return self.cohorts == cohort

    def age_index(self, age):
        i = int(age) - int(self.ages[0])
        if not 0 <= i < self.ages.size:
            raise SurfaceError("Age %s outside %d-%d" % (age, self.ages[0], self.ages[-1]))
        return i

    def year_index(self, year):
        j = int(year) - int(self.years[0])
        if not 0 <= j < self.years.size:
            raise SurfaceError("Year %s outside %d-%d" % (year, self.years[0], self.years[-1]))
        return j

    def subset(self, ages=None, years=None):
        """Restrict to the inclusive (first, last) age and year ranges."""
        a0, a1 = ages if ages is not None else (self.ages[0], self.ages[-1])
        t0, t1 = years if years is not None else (self.years[0], self.years[-1])
        i0, i1 = self.age_index(a0), self.age_index(a1) + 1
        j0, j1 = self.year_index(t0), self.year_index(t1) + 1
        return replace(self, ages=self.ages[i0:i1], years=self.years[j0:j1],
                       deaths=self.deaths[i0:i1, j0:j1], exposure=self.exposure[i0:i1, j0:j1],
                       open_age=self.open_age and i1 == self.ages.size)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class QSurface:
    """Death probabilities q(x, t). ``raw_max_age`` is the last age
    taken from data; ages above it come from closure.
    """
    ages: np.ndarray
    years: np.ndarray
    q: np.ndarray
    gender: str = "total"
    source: str = "crude"
    raw_max_age: int = None

    def __post_init__(self):
        object.__setattr__(self, "ages", _frozen(self.ages, int))
        object.__setattr__(self, "years", _frozen(self.years, int))
        object.__setattr__(self, "q", _frozen(self.q))
        _consecutive(self.ages, "Ages")
        _consecutive(self.years, "Years")
        if self.q.shape != (self.ages.size, self.years.size):
            raise SurfaceError("q has shape %s, expected %s" % (
                self.q.shape, (self.ages.size, self.years.size)))
        finite = self.q[~np.isnan(self.q)]
        if (finite < 0).any() or (finite > 1).any():
            raise SurfaceError("Death probabilities must lie in [0, 1]")
        if self.raw_max_age is None:
            object.__setattr__(self, "raw_max_age", int(self.ages[-1]) if self.ages.size else 0)

    age_index = MortalitySurface.age_index
    year_index = MortalitySurface.year_index

    @property
    def omega(self):
        return int(self.ages[-1])

    def column(self, year):
        return self.q[:, self.year_index(year)]

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ImprovementMatrix:
    """r(x, t) = m(x, t+1)/m(x, t) - 1 for t in years[:-1]. Cells where
    m(x, t) = 0 or is missing are NaN (undefined), never zero.
    """
    ages: np.ndarray
    years: np.ndarray
    r: np.ndarray
    gender: str = "total"
    source: str = "crude"

    @property
    def defined(self):
        return ~np.isnan(self.r)

    @property
    def cohorts(self):
        return self.years[None, :] - self.ages[:, None]


def build_surface(deaths, population, gender="total", ages=None, years=None,
                  vintage="consistent"):
    """Build the period surface with D(x, t) the sum of both Lexis
    triangles of cell (x, t) and E(x, t) = (P(x, t) + P(x, t+1))/2.
    """
    if ages is None:
        ages = (int(deaths.age.min()), int(deaths.age.max()))
    if years is None:
        pop_years = set(population.years.tolist())
        death_years = sorted(y for y in set(deaths.year.tolist()) if y + 1 in pop_years)
        if not death_years:
            raise SurfaceError("No year has both deaths and the following January-1 population")
        years = (death_years[0], death_years[-1])
    age_grid = np.arange(ages[0], ages[1] + 1)
    year_grid = np.arange(years[0], years[1] + 1)
    shape = (age_grid.size, year_grid.size)

    d = np.zeros(shape)
    seen = np.zeros(shape, dtype=int)
    i = deaths.age - age_grid[0]
    j = deaths.year - year_grid[0]
    inside = (i >= 0) & (i < shape[0]) & (j >= 0) & (j < shape[1])
    np.add.at(d, (i[inside], j[inside]), deaths.column(gender)[inside])
    np.add.at(seen, (i[inside], j[inside]), 1)
    if (seen == 0).any():
        a, t = np.argwhere(seen == 0)[0]
        raise SurfaceError("No deaths recorded for age %d in %d" % (age_grid[a], year_grid[t]))

    exposure = np.empty(shape)
    for col, t in enumerate(year_grid):
        start = population.counts_at(t, gender, side="start", vintage=vintage)
        end = population.counts_at(t + 1, gender, side="end", vintage=vintage)
        for year, counts in ((t, start), (t + 1, end)):
            if not counts:
                raise SurfaceError("Population missing for year %d" % year)
            absent = [int(x) for x in age_grid if x not in counts]
            if absent:
                raise SurfaceError("Population for year %d lacks ages %s" % (year, absent))
        exposure[:, col] = [(start[x] + end[x]) / 2. for x in age_grid]
    bad = exposure <= 0
    if bad.any():
        a, t = np.argwhere(bad)[0]
        raise SurfaceError("Non-positive exposure at age %d in %d" % (age_grid[a], year_grid[t]))
    open_age = bool(deaths.open_age[deaths.age == age_grid[-1]].any())
    logging.debug("Built %s surface %d-%d x %d-%d" % (gender, ages[0], ages[1], years[0], years[1]))
    return MortalitySurface(ages=age_grid, years=year_grid, deaths=d, exposure=exposure,
                            gender=gender, source="crude", open_age=open_age)


def to_q(surface):
    """q = 1 - exp(-m) cell-wise."""
    m = surface.rates
    if (m[~np.isnan(m)] < 0).any():
        raise SurfaceError("Negative death rates")
    return QSurface(ages=surface.ages, years=surface.years, q=-np.expm1(-m),
                    gender=surface.gender, source=surface.source)


def to_m(q):
    """Inverse of :func:`to_q` for arrays, m = -ln(1 - q)."""
    with np.errstate(divide="ignore"):
        return -np.log1p(-np.asarray(q, dtype=float))


def improvements(surface):
    if surface.years.size < 2:
        raise SurfaceError("Improvement rates need at least two years")
    m = surface.rates
    with np.errstate(invalid="ignore", divide="ignore"):
        r = m[:, 1:] / m[:, :-1] - 1.
    r[~(m[:, :-1] > 0)] = np.nan
    undefined = int(np.isnan(r).sum())
    if undefined:
        logging.debug("%d improvement cells undefined" % undefined)
    return ImprovementMatrix(ages=surface.ages, years=surface.years[:-1], r=r,
                             gender=surface.gender, source=surface.source)


def _survival_sum(q_band, axis=0):
    return np.sum(np.cumprod(1. - q_band, axis=axis), axis=axis)


def _band(q, x0, x1):
    if not x0 < x1:
        raise SurfaceError("Start age %d must be below truncation age %d" % (x0, x1))
    if x0 < q.ages[0] or x1 > q.ages[-1] + 1:
        raise SurfaceError("Band %d-%d outside table ages %d-%d" % (
            x0, x1, q.ages[0], q.ages[-1]))
    return slice(int(x0 - q.ages[0]), int(x1 - q.ages[0]))


def period_life_expectancy(q, x0, x1, year):
    """Curtate period life expectancy at ``x0`` truncated at ``x1``:
    sum over k of prod_{i<k} (1 - q(x0 + i, year)).
    """
    column = q.q[_band(q, x0, x1), q.year_index(year)]
    if np.isnan(column).any():
        raise SurfaceError("Missing death probabilities in band %d-%d for %d" % (x0, x1, year))
    return float(_survival_sum(column))


def period_life_expectancy_series(q, x0, x1):
    band = q.q[_band(q, x0, x1), :]
    return pd.Series(_survival_sum(band, axis=0), index=pd.Index(q.years, name="year"),
                     name="e_%d_%d" % (x0, x1))


def force_of_mortality_curve(surface, year):
    return surface.rates[:, surface.year_index(year)].copy()


def death_curve(q, year, radix=100000.):
    """d(x) = l(x) - l(x+1) with l(x_min) = radix."""
    if radix <= 0:
        raise SurfaceError("Radix must be positive")
    column = q.column(year)
    survivors = radix * np.concatenate([[1.], np.cumprod(1. - column)])
    return survivors[:-1] - survivors[1:]


def curve_roughness(values):
    """Sum of squared second differences."""
    return float(np.sum(np.diff(np.asarray(values, dtype=float), n=2) ** 2))


def kannisto_extend(q_fit, fit_ages, target_ages):
    """Fit logit(m) = c + d*x by least squares on ``fit_ages`` (one fit
    per column of ``q_fit``) and return q on ``target_ages``.
    """
    m = to_m(q_fit)
    design = np.column_stack([np.ones(len(fit_ages)), np.asarray(fit_ages, dtype=float)])
    coef, *_ = np.linalg.lstsq(design, logit(m).reshape(len(fit_ages), -1), rcond=None)
    target = np.column_stack([np.ones(len(target_ages)), np.asarray(target_ages, dtype=float)])
    mu = expit(target @ coef)
    return (-np.expm1(-mu)).reshape((len(target_ages),) + q_fit.shape[1:])


def close_table(q, closure_start=None, omega=120, fit_ages=15):
    """Replace ages above ``closure_start`` by a logistic (Kannisto)
    extrapolation fitted per year on up to ``fit_ages`` ages ending at
    ``closure_start``, extend to ``omega`` and set q(omega) = 1.
    """
    if closure_start is None:
        closure_start = int(q.ages[-1])
    if closure_start > q.ages[-1]:
        raise SurfaceError("Closure start %d above last age %d" % (closure_start, q.ages[-1]))
    if omega <= q.ages[-1]:
        raise SurfaceError("Terminal age %d must exceed last age %d" % (omega, q.ages[-1]))
    first = max(int(q.ages[0]), closure_start - fit_ages + 1)
    fit = np.arange(first, closure_start + 1)
    if fit.size < MIN_CLOSURE_AGES:
        raise SurfaceError("Closure needs at least %d fitting ages, found %d" % (
            MIN_CLOSURE_AGES, fit.size))
    rows = fit - q.ages[0]
    q_fit = q.q[rows, :]
    if np.isnan(q_fit).any():
        raise SurfaceError("Missing death probabilities in the closure band")
    keep = q.q[:closure_start - q.ages[0] + 1, :]
    extended = kannisto_extend(q_fit, fit, np.arange(closure_start + 1, omega))
    closed = np.vstack([keep, extended, np.ones((1, q.years.size))])
    return QSurface(ages=np.arange(q.ages[0], omega + 1), years=q.years, q=closed,
                    gender=q.gender, source=q.source,
                    raw_max_age=min(q.raw_max_age, closure_start))
