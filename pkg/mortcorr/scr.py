""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Longevity trend SCR: Best-Estimate and shocked improvement paths, the
tables built from them, cohort life expectancies along diagonals, the
IE impact indicator and the valuation of a model-point annuity
portfolio.
"""
import json
import logging

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from mortcorr.forecast import HorizonError
from mortcorr.lexis import QSurface, SurfaceError

ROLES = ("BE", "SCR")
SURVIVAL_FLOOR = 1e-12
PORTFOLIO_COLUMNS = ("gender", "age", "amount", "count")
WEIGHTS = ("amount", "count")


class PortfolioError(ValueError):
    pass


class ScrError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImprovementPath:
    """IR(x, t) = (q(x, t) - q(x, t0))/q(x, t0) for t > t0."""
    ages: np.ndarray
    years: np.ndarray
    ir: np.ndarray
    role: str
    base_year: int

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError("Unknown role %r, expected one of %s" % (self.role, ROLES))
        if (self.ir <= -1.).any():
            raise SurfaceError("Improvement below -100%% in the %s path" % self.role)
        if self.years.size and self.years[0] <= self.base_year:
            raise SurfaceError("Path years must follow the valuation year %d" % self.base_year)


def _base_column(base):
    if isinstance(base, QSurface):
        return base.q[:, -1], int(base.years[-1])
    raise TypeError("Base table must be a QSurface")


def improvement_path(base, target, role="BE"):
    """Relative change of ``target`` against the last year of ``base``."""
    q0, t0 = _base_column(base)
    if not np.array_equal(base.ages, target.ages):
        raise SurfaceError("Base and target tables have different ages")
    if (q0 == 0).any():
        raise SurfaceError("Zero base death probability at ages %s" % (
            base.ages[q0 == 0].tolist(),))
    ir = (target.q - q0[:, None]) / q0[:, None]
    return ImprovementPath(ages=target.ages, years=target.years, ir=ir, role=role,
                           base_year=t0)


@dataclass(frozen=True, eq=False)
class ShockedTables:
    """q_BE and q_SCR from t0 to t0 + T; column t0 is the base table in
    both.
    """
    ages: np.ndarray
    years: np.ndarray
    be: np.ndarray
    scr: np.ndarray
    clamps: int = 0
    gender: str = "total"
    labels: dict = field(default_factory=dict)

    @property
    def base_year(self):
        return int(self.years[0])

    @property
    def omega(self):
        return int(self.ages[-1])

    def q(self, role):
        if role == "BE":
            return self.be
        if role == "SCR":
            return self.scr
        raise ValueError("Unknown role %r, expected one of %s" % (role, ROLES))

    def table(self, role):
        return QSurface(ages=self.ages, years=self.years, q=self.q(role), gender=self.gender,
                        source=role)

    def to_frame(self):
        index = pd.MultiIndex.from_product([self.ages, self.years], names=["age", "year"])
        return pd.DataFrame({"q_be": self.be.ravel(), "q_scr": self.scr.ravel()},
                            index=index).reset_index()


def build_shocked_tables(be_path, scr_path, base, gender=None):
    q0, t0 = _base_column(base)
    if be_path.base_year != t0 or scr_path.base_year != t0:
        raise SurfaceError("Paths and base table must share the valuation year %d" % t0)
    for path in (be_path, scr_path):
        if not (np.array_equal(path.ages, base.ages)
                and np.array_equal(path.years, be_path.years)):
            raise SurfaceError("The %s path does not match the table grid" % path.role)
    tables = []
    clamps = 0
    for path in (be_path, scr_path):
        q = np.hstack([q0[:, None], q0[:, None] * (1. + path.ir)])
        bad = (q < 0.) | (q > 1.)
        clamps += int(bad.sum())
        tables.append(np.clip(q, 0., 1.))
    if clamps:
        logging.warning("%d shocked death probabilities clamped to [0, 1]" % clamps)
    return ShockedTables(ages=base.ages, years=np.concatenate([[t0], be_path.years]),
                         be=tables[0], scr=tables[1], clamps=clamps,
                         gender=gender or base.gender)


def _survival(q, ages, years, age, year):
    """k-year survival probabilities k = 1, 2, ... along the diagonal
    starting at (age, year), stopping below SURVIVAL_FLOOR or at omega.
    """
    if not ages[0] <= age <= ages[-1]:
        raise PortfolioError("Age %d outside table ages %d-%d" % (age, ages[0], ages[-1]))
    if not years[0] <= year <= years[-1]:
        raise HorizonError("Year %d outside table years %d-%d" % (year, years[0], years[-1]))
    i0 = int(age - ages[0])
    j0 = int(year - years[0])
    out = []
    alive = 1.
    for i in range(ages.size - i0):
        if j0 + i >= years.size:
            raise HorizonError("Diagonal from age %d in %d leaves the table in %d before age "
                               "%d; extend the projection horizon" % (
                                   age, year, years[-1] + 1, ages[-1]))
        alive *= 1. - q[i0 + i, j0 + i]
        out.append(alive)
        if alive < SURVIVAL_FLOOR:
            break
    return np.array(out)


def cohort_life_expectancy(tables, role, age, year=None):
    """sum_k prod_{i<k} (1 - q(x + i, t + i)) in the ``role`` table."""
    year = tables.base_year if year is None else year
    return float(_survival(tables.q(role), tables.ages, tables.years, age, year).sum())


def ie_indicator(tables, age, year=None):
    """(e_SCR - e_BE)/e_BE."""
    e_be = cohort_life_expectancy(tables, "BE", age, year)
    if e_be == 0:
        raise ScrError("Zero Best-Estimate life expectancy at age %d" % age)
    return (cohort_life_expectancy(tables, "SCR", age, year) - e_be) / e_be


def ie_curve(tables, ages=None, year=None):
    """IE per cohort born year - age for a range of ages."""
    year = tables.base_year if year is None else year
    ages = tables.ages[:-1] if ages is None else np.asarray(ages)
    rows = []
    for x in ages:
        e_be = cohort_life_expectancy(tables, "BE", int(x), year)
        e_scr = cohort_life_expectancy(tables, "SCR", int(x), year)
        rows.append((year - int(x), int(x), e_be, e_scr, (e_scr - e_be) / e_be))
    return pd.DataFrame(rows, columns=["cohort", "age", "e_be", "e_scr", "ie"])


@dataclass
class AnnuityPortfolio:
    """Model points (gender, age at t0, annual amount, count) paying in
    arrears with a flat discount rate.
    """
    model_points: pd.DataFrame
    discount_rate: float = 0.
    timing: str = "end"

    def __post_init__(self):
        missing = [c for c in PORTFOLIO_COLUMNS if c not in self.model_points.columns]
        if missing:
            raise PortfolioError("Portfolio lacks columns %s" % missing)
        if self.model_points.empty:
            raise PortfolioError("Portfolio has no model points")
        points = self.model_points.loc[:, list(PORTFOLIO_COLUMNS)].copy()
        points["age"] = points["age"].astype(int)
        points["amount"] = points["amount"].astype(float)
        points["count"] = points["count"].astype(float)
        if (points.amount < 0).any() or (points["count"] < 0).any():
            raise PortfolioError("Amounts and counts must be non-negative")
        self.model_points = points.reset_index(drop=True)
        if self.timing != "end":
            raise PortfolioError("Only end-of-year payments are supported, got %r" % self.timing)
        if self.discount_rate <= -1:
            raise PortfolioError("Discount rate must exceed -100%")

    @property
    def genders(self):
        return sorted(self.model_points.gender.unique())

    @classmethod
    def from_csv(cls, filename, config_filename=None):
        points = pd.read_csv(filename, comment="#")
        settings = {}
        if config_filename is not None:
            with open(config_filename) as fp:
                settings = json.load(fp)
            unknown = set(settings) - {"discount_rate", "timing"}
            if unknown:
                raise PortfolioError("Unknown portfolio settings %s" % sorted(unknown))
        return cls(model_points=points, **settings)

    @classmethod
    def default(cls, gender="total", ages=range(60, 91, 5), discount_rate=0.):
        """One unit annuity per age."""
        ages = list(ages)
        points = pd.DataFrame({"gender": gender, "age": ages, "amount": 1., "count": 1.})
        return cls(model_points=points, discount_rate=discount_rate)


def _tables_for(tables, gender):
    if isinstance(tables, ShockedTables):
        return tables
    try:
        return tables[gender]
    except KeyError:
        raise PortfolioError("No tables for gender %r" % gender)


def annuity_factor(tables, role, age, discount_rate=0., year=None):
    """sum_k v^k kp(x) along the diagonal, v = 1/(1 + rate)."""
    year = tables.base_year if year is None else year
    survival = _survival(tables.q(role), tables.ages, tables.years, age, year)
    discount = (1. + discount_rate) ** -np.arange(1, survival.size + 1)
    return float(survival @ discount)


def portfolio_value(portfolio, tables, role):
    """Present value of the portfolio under the ``role`` table.
    ``tables`` is one ShockedTables or a mapping from gender to tables.
    """
    total = 0.
    for point in portfolio.model_points.itertuples(index=False):
        grid = _tables_for(tables, point.gender)
        total += point.count * point.amount * annuity_factor(
            grid, role, point.age, portfolio.discount_rate)
    return total


def scr_impact(portfolio, crude, corrected):
    """SCR = value(SCR) - value(BE) under each calibration, with the
    Best Estimate taken from the crude calibration for both.
    """
    be_value = portfolio_value(portfolio, crude, "BE")
    scr_crude = portfolio_value(portfolio, crude, "SCR") - be_value
    scr_corrected = portfolio_value(portfolio, corrected, "SCR") - be_value
    difference = scr_corrected - scr_crude
    relative = difference / scr_crude if scr_crude != 0 else float("nan")
    logging.info("Longevity trend SCR %.6e (crude) vs %.6e (corrected): %+.3f%%" % (
        scr_crude, scr_corrected, 100. * relative))
    return {
        "be_value": be_value,
        "scr_value_crude": scr_crude + be_value,
        "scr_value_corrected": scr_corrected + be_value,
        "scr_crude": scr_crude,
        "scr_corrected": scr_corrected,
        "absolute_difference": difference,
        "relative_difference": relative,
        "relative_difference_pct": 100. * relative,
        "best_estimate": "central projection of the crude calibration",
    }


def _mean_gap(portfolio, tables, weight):
    points = portfolio.model_points
    weights = points["count"] * (points.amount if weight == "amount" else 1.)
    gaps = []
    for point in points.itertuples(index=False):
        grid = _tables_for(tables, point.gender)
        gaps.append(cohort_life_expectancy(grid, "SCR", point.age)
                    - cohort_life_expectancy(grid, "BE", point.age))
    if weights.sum() == 0:
        raise PortfolioError("Portfolio weights sum to zero")
    return float(np.average(gaps, weights=weights))


def stability_indicator(tables_t, tables_next, portfolio, weight="amount"):
    """Relative evolution in % of the weighted mean gap e_SCR - e_BE
    between two valuation years, for the same model points.
    """
    if weight not in WEIGHTS:
        raise ValueError("Unknown weighting %r, expected one of %s" % (weight, WEIGHTS))
    gap_t = _mean_gap(portfolio, tables_t, weight)
    gap_next = _mean_gap(portfolio, tables_next, weight)
    if gap_t == 0:
        raise ScrError("Zero SCR-BE life expectancy gap at the first valuation year")
    return 100. * (gap_next - gap_t) / gap_t
