""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Correction of period mortality tables for the uniform-births
assumption. Monthly births give the mean birth time within each year;
along the diagonal t - x = b the refined exposure differs from the
midpoint average P(x, t), P(x, t+1) by the factor I(b), and the
corrected rates are m(x, t)/I(t - x).
"""
import calendar
import logging

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from mortcorr.lexis import improvements

COMPUTED = "computed"
PREDICTED = "predicted"
UNAVAILABLE = "unavailable"
PROVENANCES = (COMPUTED, PREDICTED, UNAVAILABLE)


class IndicatorError(ValueError):
    pass


class IndicatorCoverageError(IndicatorError):
    pass


def month_midpoints(year=None, weights="midpoint"):
    """Month midpoints as fractions of the year. "midpoint" uses
    (2j - 1)/24; "calendar" uses the actual day counts of ``year``.
    """
    if weights == "midpoint":
        return (2. * np.arange(1, 13) - 1.) / 24.
    if weights == "calendar":
        if year is None:
            raise IndicatorError("Calendar month weights need a year")
        days = np.array([calendar.monthrange(year, m)[1] for m in range(1, 13)], dtype=float)
        ends = np.cumsum(days)
        return (ends - days / 2.) / ends[-1]
    raise IndicatorError("Unknown month weights %r" % weights)


@dataclass
class CorrectionIndicator:
    """I(b) by year of birth, with the provenance of every entry."""
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    country: str = ""

    def __post_init__(self):
        for b, value in self.values.items():
            prov = self.provenance.setdefault(b, COMPUTED)
            if prov not in PROVENANCES:
                raise IndicatorError("Unknown provenance %r for %d" % (prov, b))
            if prov != UNAVAILABLE and not value > 0:
                raise IndicatorError("Indicator for %d must be positive, got %r" % (b, value))

    @property
    def cohorts(self):
        return sorted(self.values)

    def covers(self, cohort):
        return self.provenance.get(cohort, UNAVAILABLE) != UNAVAILABLE

    def get(self, cohort):
        if not self.covers(cohort):
            raise IndicatorCoverageError("No indicator available for cohort %d" % cohort)
        return self.values[cohort]

    def merge(self, other):
        """Fill cohorts not covered here from ``other``; entries that
        are already covered are kept.
        """
        values = dict(self.values)
        provenance = dict(self.provenance)
        for b in other.cohorts:
            if other.covers(b) and not self.covers(b):
                values[b] = other.values[b]
                provenance[b] = other.provenance[b]
        return CorrectionIndicator(values=values, provenance=provenance,
                                   country=self.country or other.country)

    def to_series(self):
        covered = [b for b in self.cohorts if self.covers(b)]
        return pd.Series([self.values[b] for b in covered], index=pd.Index(covered, name="cohort"),
                         name=self.country or "indicator")

    def to_frame(self):
        return pd.DataFrame({
            "cohort": self.cohorts,
            "indicator": [self.values[b] if self.covers(b) else np.nan for b in self.cohorts],
            "provenance": [self.provenance[b] for b in self.cohorts],
        })

    @classmethod
    def from_frame(cls, frame, country=""):
        values = {}
        provenance = {}
        for row in frame.itertuples(index=False):
            b = int(row.cohort)
            prov = getattr(row, "provenance", COMPUTED)
            values[b] = float(row.indicator) if prov != UNAVAILABLE else np.nan
            provenance[b] = prov
        return cls(values=values, provenance=provenance, country=country)

    @classmethod
    def from_series(cls, series, provenance=COMPUTED, country=""):
        series = series.dropna()
        return cls(values={int(b): float(v) for b, v in series.items()},
                   provenance={int(b): provenance for b in series.index}, country=country)


def mean_birth_fraction(series, year, weights="midpoint"):
    """Mean birth time within ``year`` as a fraction of the year,
    u(b) = sum_j B_j(b) w_j / sum_j B_j(b).
    """
    if not series.is_complete(year):
        raise IndicatorError("Monthly births for %d are incomplete" % year)
    births = series.monthly(year)
    total = births.sum()
    if total <= 0:
        raise IndicatorError("No births recorded in %d" % year)
    return float(births @ month_midpoints(year, weights) / total)


def correction_indicator(series, cohort, weights="midpoint"):
    """I(b) = 2 [lam (1 - u(b)) + (1 - lam) u(b - 1)] with
    lam = B(b)/(B(b) + B(b - 1)). Lower triangles of the diagonal
    t - x = b belong to cohort b, upper triangles to cohort b - 1.
    """
    for year in (cohort - 1, cohort):
        if not series.is_complete(year):
            raise IndicatorError("Monthly births for %d are incomplete" % year)
    current = series.total(cohort)
    previous = series.total(cohort - 1)
    if current + previous <= 0:
        raise IndicatorError("No births in %d and %d" % (cohort - 1, cohort))
    lam = current / (current + previous)
    u_current = mean_birth_fraction(series, cohort, weights) if current > 0 else 0.5
    u_previous = mean_birth_fraction(series, cohort - 1, weights) if previous > 0 else 0.5
    return 2. * (lam * (1. - u_current) + (1. - lam) * u_previous)


def compute_indicator(series, cohorts=None, weights="midpoint"):
    """Indicator for every cohort whose own and previous year of
    births are complete. Requested cohorts without support are marked
    unavailable.
    """
    if cohorts is None:
        cohorts = [b for b in series.years if series.is_complete(b) and series.is_complete(b - 1)]
    values = {}
    provenance = {}
    for b in cohorts:
        try:
            values[b] = correction_indicator(series, b, weights)
            provenance[b] = COMPUTED
        except IndicatorError as ee:
            logging.debug("Cohort %d: %s" % (b, ee))
            values[b] = np.nan
            provenance[b] = UNAVAILABLE
    return CorrectionIndicator(values=values, provenance=provenance, country=series.country)


def correct_surface(surface, indicator, pass_through=False):
    """Divide rates on every diagonal t - x = b by I(b). Deaths are kept
    and exposure becomes E*I so that m = D/E still holds.
    """
    factors = np.ones(surface.shape)
    uncovered = []
    for b in np.unique(surface.cohorts):
        mask = surface.diagonal(b)
        if indicator.covers(int(b)):
            factors[mask] = indicator.get(int(b))
        else:
            uncovered.append(int(b))
    if uncovered:
        if not pass_through:
            raise IndicatorCoverageError(
                "Indicator missing for cohorts %s; enable pass-through to keep them "
                "uncorrected" % uncovered)
        logging.warning("Cohorts left uncorrected (I = 1): %s" % uncovered)
    return surface.replace(exposure=surface.exposure * factors, source="corrected")


def inverse_indicator(cohorts, factors):
    """Indicator that undoes :func:`mortcorr.oracle.inject_anomaly`."""
    return CorrectionIndicator(values={int(b): float(f) for b, f in zip(cohorts, factors)})


def _diagonal_deviation(matrix):
    """(rho(x, t-1) - rho(x, t))/2 with rho = ln(1 + r), i.e. the jump
    of the log improvement rate across cell (x, t) on diagonal t - x.
    NaN where either rate is undefined.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.log1p(matrix.r)
    rho[~np.isfinite(rho)] = np.nan
    return (rho[:, :-1] - rho[:, 1:]) / 2.


def _cohort_deviation(matrix):
    """Mean absolute diagonal deviation per cohort."""
    if matrix.years.size < 2:
        raise IndicatorError("Cohort deviations need at least two improvement years (three "
                             "calendar years), got %d" % matrix.years.size)
    dev = np.abs(_diagonal_deviation(matrix))
    cohorts = matrix.years[None, 1:] - matrix.ages[:, None]
    result = {}
    for b in np.unique(cohorts):
        cells = dev[cohorts == b]
        cells = cells[~np.isnan(cells)]
        if cells.size:
            result[int(b)] = float(cells.mean())
    return result


def anomaly_report(crude, corrected, floor_share=0.5, max_ratio=0.5):
    """Per cohort, mean absolute diagonal deviation of the improvement
    rates before and after correction and their ratio. A cohort is
    flagged when its crude deviation is a local maximum over the
    neighbouring cohorts, exceeds ``floor_share`` of the largest and
    three times the median deviation, and falls below ``max_ratio``
    after correction.
    """
    if crude.shape != corrected.shape or not (
            np.array_equal(crude.ages, corrected.ages)
            and np.array_equal(crude.years, corrected.years)):
        raise IndicatorError("Crude and corrected surfaces must share the same grid")
    before = _cohort_deviation(improvements(crude))
    after = _cohort_deviation(improvements(corrected))
    cohorts = sorted(set(before) & set(after))
    frame = pd.DataFrame({
        "cohort": cohorts,
        "deviation_crude": [before[b] for b in cohorts],
        "deviation_corrected": [after[b] for b in cohorts],
    })
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = frame.deviation_corrected / frame.deviation_crude
    ratio[frame.deviation_crude == 0] = 1.
    frame["ratio"] = ratio
    dev = frame.deviation_crude.to_numpy()
    left = np.concatenate([[-np.inf], dev[:-1]])
    right = np.concatenate([dev[1:], [-np.inf]])
    floor = max(floor_share * dev.max(), 3. * np.median(dev)) if dev.size else 0.
    peak = dev >= (1. - 1e-9) * np.maximum(left, right)
    frame["flagged"] = peak & (dev > floor) & (ratio < max_ratio)
    flagged = frame.cohort[frame.flagged].tolist()
    if flagged:
        logging.info("Cohort anomalies reduced by correction: %s" % flagged)
    return frame
