import os
import json
import pytest

import numpy as np
import pandas as pd

from mortcorr.forecast import HorizonError
from mortcorr.lexis import QSurface
from mortcorr.lexis import SurfaceError
from mortcorr.scr import AnnuityPortfolio
from mortcorr.scr import ImprovementPath
from mortcorr.scr import PortfolioError
from mortcorr.scr import ScrError
from mortcorr.scr import ShockedTables
from mortcorr.scr import annuity_factor
from mortcorr.scr import build_shocked_tables
from mortcorr.scr import cohort_life_expectancy
from mortcorr.scr import ie_curve
from mortcorr.scr import ie_indicator
from mortcorr.scr import improvement_path
from mortcorr.scr import portfolio_value
from mortcorr.scr import scr_impact
from mortcorr.scr import stability_indicator


def _tables(be, scr=None, base_year=2010, first_age=0):
    be = np.asarray(be, dtype=float)
    scr = be if scr is None else np.asarray(scr, dtype=float)
    return ShockedTables(ages=np.arange(first_age, first_age + be.shape[0]),
                         years=np.arange(base_year, base_year + be.shape[1]), be=be, scr=scr)


def _gompertz_tables(factor=0.9, first_age=60, omega=110, horizon=60, improvement=0.01):
    """BE with uniform improvement; the SCR table scales BE by
    ``factor`` after the base year.
    """
    ages = np.arange(first_age, omega + 1)
    steps = np.arange(horizon + 1)
    m = 4e-5 * np.exp(0.095 * ages)[:, None] * ((1. - improvement) ** steps)[None, :]
    be = np.minimum(-np.expm1(-m), 1.)
    be[-1] = 1.
    scr = be.copy()
    scr[:-1, 1:] *= factor
    return _tables(be, scr, first_age=first_age)


@pytest.mark.mortcorr
def testScr_cohort_life_expectancy_constant():
    """q = 0.5 everywhere gives 1 up to the survival floor."""
    tables = _tables(np.full((60, 60), 0.5))
    assert cohort_life_expectancy(tables, "BE", 0) == pytest.approx(1., abs=1e-11)


@pytest.mark.mortcorr
def testScr_cohort_life_expectancy_diagonal():
    """Only the diagonal cells count: 0.9 + 0.9 * 0.8 = 1.62."""
    q = np.full((3, 3), 0.99)
    q[0, 0], q[1, 1], q[2, 2] = 0.1, 0.2, 1.
    tables = _tables(q)
    assert cohort_life_expectancy(tables, "BE", 0) == pytest.approx(1.62, abs=1e-14)
    assert cohort_life_expectancy(tables, "SCR", 1, 2011) == pytest.approx(0.8, abs=1e-14)


@pytest.mark.mortcorr
def testScr_cohort_life_expectancy_certain_survival():
    q = np.zeros((31, 31))
    q[-1] = 1.
    assert cohort_life_expectancy(_tables(q), "BE", 0) == 30.


@pytest.mark.mortcorr
def testScr_cohort_life_expectancy_errors():
    tables = _tables(np.full((10, 5), 0.1))
    with pytest.raises(HorizonError) as ee:
        cohort_life_expectancy(tables, "BE", 0)
    assert "extend the projection horizon" in str(ee.value)
    with pytest.raises(HorizonError):
        cohort_life_expectancy(tables, "BE", 5, year=2020)
    with pytest.raises(PortfolioError):
        cohort_life_expectancy(tables, "BE", 12)
    with pytest.raises(ValueError):
        cohort_life_expectancy(tables, "worst", 0)


@pytest.mark.mortcorr
def testScr_improvement_path_round_trip():
    ages = np.arange(60, 65)
    q0 = np.linspace(0.01, 0.05, 5)
    base = QSurface(ages=ages, years=[2010], q=q0[:, None])
    factors = 0.98 ** np.arange(1, 6)
    target = QSurface(ages=ages, years=np.arange(2011, 2016), q=q0[:, None] * factors[None, :])
    be = improvement_path(base, target, "BE")
    np.testing.assert_allclose(be.ir, factors[None, :] - 1., rtol=1e-12)
    assert be.base_year == 2010

    shocked = QSurface(ages=ages, years=np.arange(2011, 2016), q=target.q * 0.9)
    tables = build_shocked_tables(be, improvement_path(base, shocked, "SCR"), base)
    np.testing.assert_array_equal(tables.years, np.arange(2010, 2016))
    np.testing.assert_array_equal(tables.be[:, 0], q0)
    np.testing.assert_array_equal(tables.scr[:, 0], q0)
    np.testing.assert_allclose(tables.be[:, 1:], target.q, rtol=1e-12)
    np.testing.assert_allclose(tables.scr[:, 1:], shocked.q, rtol=1e-12)
    assert tables.clamps == 0
    frame = tables.to_frame()
    assert frame.columns.tolist() == ["age", "year", "q_be", "q_scr"]
    assert len(frame) == 5 * 6
    assert tables.table("SCR").source == "SCR"


@pytest.mark.mortcorr
def testScr_improvement_path_errors():
    ages = np.arange(60, 62)
    base = QSurface(ages=ages, years=[2010], q=[[0.1], [0.]])
    target = QSurface(ages=ages, years=[2011], q=[[0.1], [0.1]])
    with pytest.raises(SurfaceError):
        improvement_path(base, target)
    with pytest.raises(TypeError):
        improvement_path(np.ones((2, 1)), target)
    with pytest.raises(ValueError):
        ImprovementPath(ages=ages, years=np.array([2011]), ir=np.zeros((2, 1)), role="worst",
                        base_year=2010)
    with pytest.raises(SurfaceError):
        ImprovementPath(ages=ages, years=np.array([2010]), ir=np.zeros((2, 1)), role="BE",
                        base_year=2010)
    base = QSurface(ages=ages, years=[2010], q=[[0.1], [0.2]])
    be = improvement_path(base, target)
    other = QSurface(ages=ages, years=[2009], q=[[0.1], [0.2]])
    with pytest.raises(SurfaceError):
        build_shocked_tables(be, be, other)


@pytest.mark.mortcorr
def testScr_build_shocked_tables_clamps(caplog):
    ages = np.arange(60, 62)
    base = QSurface(ages=ages, years=[2010], q=[[0.6], [0.7]])
    target = QSurface(ages=ages, years=[2011], q=[[0.6], [0.7]])
    be = improvement_path(base, target, "BE")
    scr = ImprovementPath(ages=ages, years=np.array([2011]), ir=np.array([[1.], [0.]]),
                          role="SCR", base_year=2010)
    tables = build_shocked_tables(be, scr, base)
    assert tables.clamps == 1
    assert tables.scr[0, 1] == 1.
    assert "clamped" in caplog.text


@pytest.mark.mortcorr
def testScr_ie_indicator():
    tables = _gompertz_tables(factor=1.)
    assert ie_indicator(tables, 65) == 0.
    tables = _gompertz_tables(factor=0.9)
    assert ie_indicator(tables, 65) > 0.
    curve = ie_curve(tables, ages=[60, 70, 80])
    assert curve.columns.tolist() == ["cohort", "age", "e_be", "e_scr", "ie"]
    assert curve.cohort.tolist() == [1950, 1940, 1930]
    assert (curve.e_scr > curve.e_be).all()
    with pytest.raises(ScrError):
        ie_indicator(_tables(np.ones((3, 3))), 0)


@pytest.mark.mortcorr
def testScr_annuity_factor():
    tables = _gompertz_tables()
    for age in (60, 75, 90):
        assert annuity_factor(tables, "BE", age) == pytest.approx(
            cohort_life_expectancy(tables, "BE", age), rel=1e-14)
    discounted = annuity_factor(tables, "BE", 65, discount_rate=0.02)
    assert discounted < annuity_factor(tables, "BE", 65)
    q = np.full((3, 3), 0.99)
    q[0, 0], q[1, 1], q[2, 2] = 0.1, 0.2, 1.
    assert annuity_factor(_tables(q), "BE", 0, discount_rate=0.1) == pytest.approx(
        0.9 / 1.1 + 0.72 / 1.21)


@pytest.mark.mortcorr
def testScr_portfolio(fncDir):
    portfolio = AnnuityPortfolio.default()
    assert portfolio.model_points.age.tolist() == [60, 65, 70, 75, 80, 85, 90]
    assert portfolio.genders == ["total"]

    points = os.path.join(fncDir, "portfolio.csv")
    pd.DataFrame({"gender": ["female", "male"], "age": [65, 70], "amount": [1000., 500.],
                  "count": [3, 2]}).to_csv(points, index=False)
    settings = os.path.join(fncDir, "portfolio.json")
    with open(settings, "w") as fp:
        json.dump({"discount_rate": 0.01}, fp)
    portfolio = AnnuityPortfolio.from_csv(points, settings)
    assert portfolio.discount_rate == 0.01
    assert portfolio.genders == ["female", "male"]

    with open(settings, "w") as fp:
        json.dump({"inflation": 0.02}, fp)
    with pytest.raises(PortfolioError):
        AnnuityPortfolio.from_csv(points, settings)
    with pytest.raises(PortfolioError):
        AnnuityPortfolio(model_points=pd.DataFrame({"age": [65]}))
    with pytest.raises(PortfolioError):
        AnnuityPortfolio(model_points=portfolio.model_points, timing="start")
    with pytest.raises(PortfolioError):
        AnnuityPortfolio(model_points=portfolio.model_points.assign(amount=-1.))


@pytest.mark.mortcorr
def testScr_portfolio_value():
    tables = _gompertz_tables()
    points = pd.DataFrame({"gender": ["female", "male"], "age": [65, 70],
                           "amount": [1000., 500.], "count": [3., 2.]})
    portfolio = AnnuityPortfolio(model_points=points)
    value = portfolio_value(portfolio, {"female": tables, "male": tables}, "BE")
    expected = (3000. * annuity_factor(tables, "BE", 65)
                + 1000. * annuity_factor(tables, "BE", 70))
    assert value == pytest.approx(expected, rel=1e-12)
    with pytest.raises(PortfolioError):
        portfolio_value(portfolio, {"female": tables}, "BE")


@pytest.mark.mortcorr
def testScr_scr_impact():
    portfolio = AnnuityPortfolio.default()
    crude = _gompertz_tables(factor=0.9)
    corrected = _gompertz_tables(factor=0.85)
    same = scr_impact(portfolio, crude, crude)
    assert same["absolute_difference"] == 0.
    assert same["scr_crude"] > 0.

    impact = scr_impact(portfolio, crude, corrected)
    assert impact["be_value"] == pytest.approx(portfolio_value(portfolio, crude, "BE"))
    assert impact["scr_corrected"] > impact["scr_crude"]
    assert impact["relative_difference_pct"] == pytest.approx(
        100. * impact["absolute_difference"] / impact["scr_crude"])

    # The BE always comes from the crude calibration
    shifted = _gompertz_tables(factor=0.85, improvement=0.02)
    assert scr_impact(portfolio, crude, shifted)["be_value"] == impact["be_value"]


@pytest.mark.mortcorr
def testScr_stability_indicator():
    portfolio = AnnuityPortfolio.default(ages=[65, 75])
    tables = _gompertz_tables(factor=0.9)
    assert stability_indicator(tables, tables, portfolio) == 0.
    wider = _gompertz_tables(factor=0.8)
    assert stability_indicator(tables, wider, portfolio) > 0.
    assert stability_indicator(tables, wider, portfolio, weight="count") == pytest.approx(
        stability_indicator(tables, wider, portfolio))
    with pytest.raises(ValueError):
        stability_indicator(tables, wider, portfolio, weight="premium")
    with pytest.raises(ScrError):
        stability_indicator(_gompertz_tables(factor=1.), wider, portfolio)
