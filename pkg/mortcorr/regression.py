""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Reconstruction of the correction indicator of a country without
monthly births from the indicators of donor countries:

    I_target(t) = mu + sum_C alpha_C I_C(t)

with the donor subset chosen by exhaustive enumeration under BIC or
adjusted R-squared, and backward prediction outside the fit window.
"""
import itertools
import logging

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import statsmodels.api as sm

from mortcorr.fertility import CorrectionIndicator, PREDICTED

CRITERIA = ("adjr2", "bic")
MAX_DONORS = 12
DEFAULT_WINDOW = (1947, 2010)


class RegressionError(ValueError):
    pass


@dataclass
class RegressionFit:
    subset: tuple
    intercept: float
    coefficients: dict
    intercept_se: float
    standard_errors: dict
    window: tuple
    n: int
    rss: float
    r2: float
    adjr2: float
    bic: float
    residuals: pd.Series
    criterion: str = "adjr2"
    candidates: pd.DataFrame = field(default=None, repr=False)

    @property
    def criterion_value(self):
        return self.adjr2 if self.criterion == "adjr2" else self.bic

    def to_dict(self):
        out = {
            "subset": list(self.subset),
            "intercept": self.intercept,
            "intercept_se": self.intercept_se,
            "coefficients": self.coefficients,
            "standard_errors": self.standard_errors,
            "window": list(self.window),
            "n": self.n,
            "rss": self.rss,
            "r2": self.r2,
            "adjr2": self.adjr2,
            "bic": self.bic,
            "criterion": self.criterion,
            "criterion_value": self.criterion_value,
        }
        if self.candidates is not None:
            out["candidates"] = self.candidates.to_dict(orient="records")
        return out


def _as_series(values):
    if isinstance(values, CorrectionIndicator):
        return values.to_series()
    series = pd.Series(values, dtype=float)
    series.index = series.index.astype(int)
    return series


def _window_frame(target, donors, window):
    t0, t1 = window
    years = np.arange(t0, t1 + 1)
    frame = pd.DataFrame({name: _as_series(s).reindex(years) for name, s in donors.items()})
    frame.insert(0, "__target__", _as_series(target).reindex(years))
    absent = frame.columns[frame.isna().any()].tolist()
    if absent:
        names = ["target" if c == "__target__" else c for c in absent]
        raise RegressionError("Series undefined on part of %d-%d: %s" % (t0, t1, names))
    return frame


def _collinear(design, names):
    """Names of donors whose column is a linear combination of the
    intercept and the donors before them.
    """
    culprits = []
    for k in range(1, design.shape[1]):
        if np.linalg.matrix_rank(design[:, :k + 1]) <= np.linalg.matrix_rank(design[:, :k]):
            culprits.append(names[k - 1])
    return culprits


def bic_ols(rss, n, k):
    """n ln(RSS/n) + (k + 1) ln(n) with k the number of donors."""
    return n * np.log(max(rss, np.finfo(float).tiny) / n) + (k + 1) * np.log(n)


def fit_ols(target, donors, window=DEFAULT_WINDOW, subset=None):
    """Least-squares fit of ``target`` on the donors in ``subset``
    (all donors when None) over the inclusive year ``window``.
    """
    subset = tuple(sorted(donors)) if subset is None else tuple(subset)
    if not subset:
        raise RegressionError("Empty donor subset")
    frame = _window_frame(target, {name: donors[name] for name in subset}, window)
    n = len(frame)
    if n < len(subset) + 2:
        raise RegressionError("Fit window has %d observations for %d donors" % (n, len(subset)))
    constant = [name for name in subset if frame[name].nunique() == 1]
    if constant:
        raise RegressionError("Donors constant on the fit window: %s" % constant)
    design = sm.add_constant(frame[list(subset)].to_numpy(), has_constant="add")
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RegressionError("Rank-deficient design, collinear donors: %s" % (
            _collinear(design, list(subset)),))
    y = frame["__target__"].to_numpy()
    result = sm.OLS(y, design).fit()
    k = len(subset)
    rss = float(result.ssr)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1. - rss / tss if tss > 0 else 1.
    adjr2 = 1. - (1. - r2) * (n - 1) / (n - k - 1)
    return RegressionFit(
        subset=subset,
        intercept=float(result.params[0]),
        coefficients={name: float(v) for name, v in zip(subset, result.params[1:])},
        intercept_se=float(result.bse[0]),
        standard_errors={name: float(v) for name, v in zip(subset, result.bse[1:])},
        window=(int(window[0]), int(window[1])),
        n=n,
        rss=rss,
        r2=r2,
        adjr2=adjr2,
        bic=float(bic_ols(rss, n, k)),
        residuals=pd.Series(result.resid, index=frame.index, name="residual"),
    )


def _rank_key(fit, criterion):
    score = -fit.adjr2 if criterion == "adjr2" else fit.bic
    return (score, len(fit.subset), fit.subset)


def stepwise_select(target, donors, window=DEFAULT_WINDOW, criterion="adjr2"):
    """Compare every non-empty donor subset and return the best fit
    under ``criterion`` (largest adjusted R-squared or smallest BIC).
    Ties go to the smaller subset, then to the lexicographically first
    donor names.
    """
    if criterion not in CRITERIA:
        raise RegressionError("Unknown criterion %r, expected one of %s" % (criterion, CRITERIA))
    names = sorted(donors)
    if not names:
        raise RegressionError("Empty donor set")
    if len(names) > MAX_DONORS:
        raise RegressionError("Exhaustive search supports at most %d donors" % MAX_DONORS)
    fits = []
    for size in range(1, len(names) + 1):
        for subset in itertools.combinations(names, size):
            try:
                fits.append(fit_ols(target, donors, window, subset))
            except RegressionError as ee:
                logging.debug("Subset %s skipped: %s" % (subset, ee))
    if not fits:
        raise RegressionError("No donor subset could be fitted")
    best = min(fits, key=lambda fit: _rank_key(fit, criterion))
    candidates = pd.DataFrame({
        "subset": ["+".join(fit.subset) for fit in fits],
        "size": [len(fit.subset) for fit in fits],
        "adjr2": [fit.adjr2 for fit in fits],
        "bic": [fit.bic for fit in fits],
    })
    candidates["selected_adjr2"] = candidates.subset == "+".join(
        min(fits, key=lambda fit: _rank_key(fit, "adjr2")).subset)
    candidates["selected_bic"] = candidates.subset == "+".join(
        min(fits, key=lambda fit: _rank_key(fit, "bic")).subset)
    best.criterion = criterion
    best.candidates = candidates
    logging.info("Selected donors %s under %s (%d subsets compared)" % (
        list(best.subset), criterion, len(fits)))
    return best


@dataclass
class PredictedIndicator:
    values: pd.Series
    omitted: list

    def to_indicator(self, country=""):
        return CorrectionIndicator.from_series(self.values, provenance=PREDICTED,
                                               country=country)


def predict(fit, donors, years):
    """I_hat(t) = mu + sum_C alpha_C I_C(t) on every requested year
    where all selected donors are defined; other years are omitted and
    listed.
    """
    years = [int(t) for t in years]
    frame = pd.DataFrame({name: _as_series(donors[name]).reindex(years) for name in fit.subset})
    defined = ~frame.isna().any(axis=1)
    omitted = [t for t, ok in zip(years, defined) if not ok]
    if omitted:
        logging.warning("Prediction omitted for years without donor data: %s" % omitted)
    coefficients = np.array([fit.coefficients[name] for name in fit.subset])
    values = fit.intercept + frame[defined].to_numpy() @ coefficients
    series = pd.Series(values, index=pd.Index(frame.index[defined], name="cohort"),
                       name="predicted")
    return PredictedIndicator(values=series, omitted=omitted)
