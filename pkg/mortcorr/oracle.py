""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Individual-level micro-simulation of closed birth cohorts with known
piecewise-constant hazards. Every lifeline is tabulated exactly into
Lexis-triangle deaths, January-1 populations and person-years, so the
output is ground truth for the exposure approximation used on real
data.
"""
import json
import logging
import os

from dataclasses import dataclass, field

import numpy as np

from mortcorr.hmd import (MonthlyBirthSeries, RawDeathsLexis, RawPopulation,
                          write_deaths_lexis, write_monthly_births, write_population)
from mortcorr.lexis import MortalitySurface, SurfaceError

WITHIN_MONTH = ("uniform", "start")
UNIFORM_MONTHS = np.full(12, 1. / 12.)


class OracleSpecError(ValueError):
    pass


def allocate_births(total, distribution):
    """Split ``total`` births over months by largest remainder; ties go
    to the earlier month.
    """
    distribution = np.asarray(distribution, dtype=float)
    raw = total * distribution
    counts = np.floor(raw).astype(int)
    short = int(total - counts.sum())
    order = np.lexsort((np.arange(12), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


@dataclass
class OracleSpec:
    """Cohort births with their monthly distribution, a hazard table by
    integer age (one column, or one column per year from
    ``hazard_year0``), the observation window [start_year, end_year]
    and the seed.
    """
    births: dict
    hazard: np.ndarray
    start_year: int
    end_year: int
    months: dict = field(default_factory=dict)
    hazard_year0: int = None
    seed: int = 0
    female_share: float = 0.5
    within_month: str = "uniform"
    max_age: int = 110
    country: str = "ORC"

    def __post_init__(self):
        self.births = {int(b): int(n) for b, n in self.births.items()}
        self.hazard = np.asarray(self.hazard, dtype=float)
        if self.hazard.ndim == 0:
            self.hazard = self.hazard.reshape(1)
        if self.hazard.ndim > 2 or (self.hazard < 0).any() or np.isnan(self.hazard).any():
            raise OracleSpecError("Hazard must be a non-negative age or age-by-year table")
        if self.hazard.ndim == 2 and self.hazard_year0 is None:
            raise OracleSpecError("A hazard table by year needs hazard_year0")
        if not self.births:
            raise OracleSpecError("No cohorts to simulate")
        if any(n < 0 for n in self.births.values()):
            raise OracleSpecError("Birth counts must be non-negative")
        if self.end_year <= self.start_year:
            raise OracleSpecError("Observation window %d-%d is empty" % (
                self.start_year, self.end_year))
        if not 0. <= self.female_share <= 1.:
            raise OracleSpecError("Female share must lie in [0, 1]")
        if self.within_month not in WITHIN_MONTH:
            raise OracleSpecError("Unknown within-month timing %r" % self.within_month)
        months = {}
        for b, dist in self.months.items():
            dist = np.asarray(dist, dtype=float)
            if dist.shape != (12,) or (dist < 0).any() or abs(dist.sum() - 1.) > 1e-9:
                raise OracleSpecError("Monthly distribution of %s must be 12 non-negative "
                                      "shares summing to 1" % b)
            months[int(b)] = dist
        self.months = months

    def distribution(self, cohort):
        return self.months.get(cohort, UNIFORM_MONTHS)

    def rate(self, age, year):
        """m*(age, year); ages beyond the table use the last row and
        years outside the table the nearest column.
        """
        row = self.hazard[min(int(age), self.hazard.shape[0] - 1)]
        if self.hazard.ndim == 1:
            return float(row)
        col = int(np.clip(year - self.hazard_year0, 0, self.hazard.shape[1] - 1))
        return float(row[col])

    def true_rates(self, ages, years):
        return np.array([[self.rate(x, t) for t in years] for x in ages])

    @classmethod
    def gompertz(cls, a, b, births, start_year, end_year, max_age=110, **kwargs):
        """Spec with m*(x) = a exp(b x)."""
        hazard = a * np.exp(b * np.arange(max_age + 1))
        return cls(births=births, hazard=hazard, start_year=start_year, end_year=end_year,
                   max_age=max_age, **kwargs)

    @classmethod
    def from_json(cls, filename):
        """Read a spec. ``hazard`` is a number, a list by age, a list of
        lists (age by year) or {"gompertz": {"a": .., "b": ..}}.
        """
        with open(filename) as fp:
            doc = json.load(fp)
        known = {"births", "hazard", "start_year", "end_year", "months", "default_months",
                 "hazard_year0", "seed", "female_share", "within_month", "max_age", "country"}
        unknown = set(doc) - known
        if unknown:
            raise OracleSpecError("Unknown oracle keys %s" % sorted(unknown))
        for key in ("births", "hazard", "start_year", "end_year"):
            if key not in doc:
                raise OracleSpecError("Oracle spec lacks %r" % key)
        hazard = doc.pop("hazard")
        if isinstance(hazard, dict):
            if "gompertz" not in hazard:
                raise OracleSpecError("Unknown hazard law %s" % sorted(hazard))
            max_age = int(doc.get("max_age", 110))
            law = hazard["gompertz"]
            hazard = law["a"] * np.exp(law["b"] * np.arange(max_age + 1))
        default = doc.pop("default_months", None)
        months = doc.pop("months", {})
        if default is not None:
            months = {**{b: default for b in doc["births"]}, **months}
        return cls(hazard=hazard, months=months, **doc)


@dataclass(eq=False)
class OracleOutput:
    """HMD/HFD-style tabulations of the simulated lifelines and the
    exact quantities they approximate. Grids are [sex, age, year] with
    sex in (female, male, total).
    """
    deaths: RawDeathsLexis
    population: RawPopulation
    births: MonthlyBirthSeries
    ages: np.ndarray
    years: np.ndarray
    true_rates: np.ndarray
    exact_deaths: np.ndarray
    exact_exposure: np.ndarray
    jan1: np.ndarray
    cohort_deaths: dict
    spec: OracleSpec = None

    def exact_surface(self, gender="total", ages=None):
        """Deaths over exact person-years; cells nobody lived in are
        missing.
        """
        k = ("female", "male", "total").index(gender)
        exposure = np.where(self.exact_exposure[k] > 0, self.exact_exposure[k], np.nan)
        surface = MortalitySurface(ages=self.ages, years=self.years,
                                   deaths=self.exact_deaths[k], exposure=exposure,
                                   gender=gender, source="simulated")
        if ages is not None:
            surface = surface.subset(ages=ages)
        return surface

    def write(self, directory, stem=None):
        """HMD Deaths_lexis, Population and HFD monthly births files."""
        stem = stem or self.deaths.country
        paths = {
            "deaths": os.path.join(directory, "%s.Deaths_lexis.txt" % stem),
            "population": os.path.join(directory, "%s.Population.txt" % stem),
            "births": os.path.join(directory, "%sbirthsRR.txt" % stem),
        }
        write_deaths_lexis(self.deaths, paths["deaths"])
        write_population(self.population, paths["population"])
        write_monthly_births(self.births, paths["births"])
        return paths

    def check_accounting(self):
        """births = deaths to date + alive, per cohort, at every
        January 1 of the window.
        """
        for b, table in self.cohort_deaths.items():
            born, dead, alive = table.T
            if not np.all(dead + alive == born):
                raise ArithmeticError("Accounting identity broken for cohort %d" % b)
        return True


def _by_sex(sex, weights=None):
    counts = np.bincount(sex, weights=weights, minlength=2)[:2]
    return np.array([counts[0], counts[1], counts.sum()])


def simulate_population(spec):
    """Simulate every cohort from birth to the end of the window. Each
    cohort draws from its own child of ``SeedSequence(seed)``, so
    cohorts may be simulated in any order.
    """
    ages = np.arange(0, spec.max_age + 1)
    years = np.arange(spec.start_year, spec.end_year)
    jan_years = np.arange(spec.start_year, spec.end_year + 1)
    n_age = ages.size
    deaths = np.zeros((3, n_age, years.size, 2))
    exposure = np.zeros((3, n_age, years.size))
    jan1 = np.zeros((3, n_age, jan_years.size))
    cohorts = sorted(spec.births)
    children = np.random.SeedSequence(spec.seed).spawn(len(cohorts))
    monthly = {}
    accounting = {}

    for b, child in zip(cohorts, children):
        rng = np.random.default_rng(child)
        alloc = allocate_births(spec.births[b], spec.distribution(b))
        monthly[b] = alloc
        n = int(alloc.sum())
        month = np.repeat(np.arange(12), alloc)
        jitter = rng.random(n) if spec.within_month == "uniform" else np.zeros(n)
        u = (month + jitter) / 12.
        sex = (rng.random(n) >= spec.female_share).astype(int)
        budget = rng.standard_exponential(n)
        alive = np.ones(n, dtype=bool)
        dead_total = 0
        record = []
        for y in range(b, spec.end_year + 1):
            if y >= spec.start_year:
                born = (y > b) | (u == 0.)
                here = alive & born
                jan_age = np.minimum(y - b - (u > 0.), spec.max_age)
                col = y - spec.start_year
                for age in np.unique(jan_age[here]):
                    rows = here & (jan_age == age)
                    jan1[:, age, col] += _by_sex(sex[rows])
                record.append((int(born.sum()), dead_total, int(here.sum())))
            if y == spec.end_year:
                break
            segments = [(np.zeros(n), u, y - b - 1, 1), (u, np.ones(n), y - b, 0)]
            if y == b:
                segments = segments[1:]
            for lo, hi, age, upper in segments:
                length = hi - lo
                h = spec.rate(age, y)
                cum = h * length
                dies = alive & (budget < cum)
                if y >= spec.start_year:
                    a = min(age, spec.max_age)
                    j = y - spec.start_year
                    spent = np.where(dies, np.divide(budget, h, out=np.zeros(n), where=dies),
                                     length)
                    exposure[:, a, j] += _by_sex(sex[alive], spent[alive])
                    if dies.any():
                        deaths[:, a, j, upper] += _by_sex(sex[dies])
                budget = np.where(alive & ~dies, budget - cum, budget)
                alive &= ~dies
                dead_total += int(dies.sum())
        accounting[b] = np.array(record, dtype=int).reshape(-1, 3)
        logging.debug("Cohort %d: %d births, %d alive at the end" % (b, n, int(alive.sum())))

    output = _tabulate(spec, ages, years, jan_years, deaths, exposure, jan1, monthly)
    output.cohort_deaths = accounting
    return output


def _tabulate(spec, ages, years, jan_years, deaths, exposure, jan1, monthly):
    rows = []
    counts = []
    for j, t in enumerate(years):
        for i, x in enumerate(ages):
            for upper in (0, 1):
                rows.append((t, x, t - x - upper))
                counts.append(deaths[:, i, j, upper])
    rows = np.array(rows)
    top = ages[-1]
    raw_deaths = RawDeathsLexis(year=rows[:, 0], age=rows[:, 1], cohort=rows[:, 2],
                                counts=np.array(counts), open_age=rows[:, 1] == top,
                                country=spec.country)
    pop_rows = [(t, x) for t in jan_years for x in ages]
    pop_counts = [jan1[:, i, j] for j in range(jan_years.size) for i in range(ages.size)]
    pop_rows = np.array(pop_rows)
    raw_population = RawPopulation(year=pop_rows[:, 0], age=pop_rows[:, 1],
                                   counts=np.array(pop_counts), open_age=pop_rows[:, 1] == top,
                                   country=spec.country)
    births = MonthlyBirthSeries(country=spec.country,
                                births={b: alloc.astype(float) for b, alloc in monthly.items()})
    return OracleOutput(deaths=raw_deaths, population=raw_population, births=births,
                        ages=ages, years=years, true_rates=spec.true_rates(ages, years),
                        exact_deaths=deaths.sum(axis=3), exact_exposure=exposure, jan1=jan1,
                        cohort_deaths={}, spec=spec)


def inject_anomaly(surface, cohorts, factors):
    """Multiply m by ``factor`` along each diagonal t - x = cohort by
    dividing the exposure; deaths are unchanged.
    """
    if len(cohorts) != len(factors):
        raise SurfaceError("Need one factor per cohort")
    scale = np.ones(surface.shape)
    present = set(np.unique(surface.cohorts).tolist())
    for b, f in zip(cohorts, factors):
        if not f > 0:
            raise SurfaceError("Anomaly factor for %d must be positive, got %r" % (b, f))
        if int(b) not in present:
            raise SurfaceError("Cohort %d has no diagonal in the surface" % b)
        scale[surface.diagonal(int(b))] *= f
    return surface.replace(exposure=surface.exposure / scale)
