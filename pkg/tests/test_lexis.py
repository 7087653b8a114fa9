import pytest

import numpy as np

from scipy.special import expit

from mortcorr.hmd import parse_deaths_lexis
from mortcorr.hmd import parse_population
from mortcorr.lexis import MortalitySurface
from mortcorr.lexis import QSurface
from mortcorr.lexis import SurfaceError
from mortcorr.lexis import build_surface
from mortcorr.lexis import close_table
from mortcorr.lexis import curve_roughness
from mortcorr.lexis import death_curve
from mortcorr.lexis import force_of_mortality_curve
from mortcorr.lexis import improvements
from mortcorr.lexis import kannisto_extend
from mortcorr.lexis import period_life_expectancy
from mortcorr.lexis import period_life_expectancy_series
from mortcorr.lexis import to_m
from mortcorr.lexis import to_q
from mortcorr.oracle import inject_anomaly

from conftest import ANOMALY_COHORTS, ANOMALY_FACTORS, gompertz_rates, make_surface


def _q(values, ages=None, years=(2000,)):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    ages = np.arange(values.shape[0]) if ages is None else ages
    return QSurface(ages=ages, years=years, q=values)


@pytest.mark.mortcorr
def testLexis_build_surface(deaths_file, population_file):
    """D sums both triangles; E averages consecutive January-1
    populations.
    """
    deaths = parse_deaths_lexis(deaths_file)
    pop = parse_population(population_file)
    surface = build_surface(deaths, pop)
    np.testing.assert_array_equal(surface.ages, [60, 61])
    np.testing.assert_array_equal(surface.years, [2000, 2001])
    assert surface.deaths[0, 0] == 42.
    assert surface.deaths[0, 1] == 43.
    assert surface.deaths[1, 1] == 50.
    assert np.isnan(surface.deaths[1, 0])
    assert surface.missing.tolist() == [[False, False], [True, False]]
    assert surface.exposure[0, 0] == (1900. + 1920.) / 2.
    assert surface.exposure[0, 1] == (1920. + 1960.) / 2.
    assert surface.open_age
    assert surface.rates[0, 0] == pytest.approx(42. / 1910.)

    plus = build_surface(deaths, pop, vintage="plus")
    assert plus.exposure[0, 1] == (1920. + 1940.) / 2.

    female = build_surface(deaths, pop, gender="female")
    assert female.deaths[0, 0] == 19.

    with pytest.raises(SurfaceError):
        build_surface(deaths, pop, ages=(60, 62))
    with pytest.raises(SurfaceError):
        build_surface(deaths, pop, years=(2000, 2002))


@pytest.mark.mortcorr
def testLexis_surface_identities():
    with pytest.raises(SurfaceError):
        MortalitySurface(ages=[60, 62], years=[2000], deaths=[[1.], [1.]],
                         exposure=[[1.], [1.]])
    with pytest.raises(SurfaceError):
        MortalitySurface(ages=[60], years=[2000], deaths=[[1.]], exposure=[[0.]])
    with pytest.raises(SurfaceError):
        MortalitySurface(ages=[60], years=[2000], deaths=[[-1.]], exposure=[[1.]])
    with pytest.raises(SurfaceError):
        MortalitySurface(ages=[60], years=[2000], deaths=[[1.]], exposure=[[1.]],
                         source="smoothed")
    surface = MortalitySurface(ages=[60], years=[2000], deaths=[[np.nan]], exposure=[[0.]])
    assert surface.missing.all()
    with pytest.raises(ValueError):
        surface.deaths[0, 0] = 1.


@pytest.mark.mortcorr
def testLexis_subset(gompertz_surface):
    sub = gompertz_surface.subset(ages=(70, 79), years=(1990, 1999))
    assert sub.shape == (10, 10)
    assert sub.rates[0, 0] == gompertz_surface.rates[10, 10]
    with pytest.raises(SurfaceError):
        gompertz_surface.subset(ages=(50, 60))


@pytest.mark.mortcorr
def testLexis_to_q():
    surface = MortalitySurface(ages=[60, 61], years=[2000], deaths=[[0.], [np.log(2.)]],
                               exposure=[[1.], [1.]])
    q = to_q(surface)
    assert q.q[0, 0] == 0.
    assert q.q[1, 0] == pytest.approx(0.5, abs=1e-15)
    rng = np.random.default_rng(1)
    m = rng.uniform(0., 2., (5, 4))
    grid = MortalitySurface(ages=np.arange(5), years=np.arange(4), deaths=m,
                            exposure=np.ones((5, 4)))
    np.testing.assert_allclose(to_m(to_q(grid).q), m, rtol=1e-12)


@pytest.mark.mortcorr
def testLexis_improvements():
    ages = np.arange(60, 63)
    years = np.arange(2000, 2005)
    constant = make_surface(np.full((3, 5), 0.01), ages, years)
    np.testing.assert_allclose(improvements(constant).r, 0., atol=1e-15)

    halving = make_surface(0.01 * 0.5 ** np.arange(5)[None, :].repeat(3, 0), ages, years)
    r = improvements(halving)
    assert r.r.shape == (3, 4)
    np.testing.assert_array_equal(r.years, years[:-1])
    np.testing.assert_allclose(r.r, -0.5, rtol=1e-12)

    deaths = np.full((3, 5), 10.)
    deaths[1, 2] = 0.
    deaths[2, 1] = np.nan
    gaps = MortalitySurface(ages=ages, years=years, deaths=deaths,
                            exposure=np.full((3, 5), 1000.))
    r = improvements(gaps)
    assert np.isnan(r.r[1, 2])
    assert r.r[1, 1] == -1.
    assert np.isnan(r.r[2, 0]) and np.isnan(r.r[2, 1])
    assert r.defined.sum() == 12 - 3

    with pytest.raises(SurfaceError):
        improvements(constant.subset(years=(2000, 2000)))


@pytest.mark.mortcorr
def testLexis_improvements_anomaly(poisson_surface):
    """Injected diagonals stand out in the improvement matrix and
    vanish once the anomaly is divided out again.
    """
    ages = poisson_surface.ages
    years = poisson_surface.years
    smooth = make_surface(gompertz_rates(ages, years), ages, years)
    injected = inject_anomaly(smooth, ANOMALY_COHORTS, ANOMALY_FACTORS)
    r = improvements(injected)
    touched = np.isin(r.cohorts, ANOMALY_COHORTS) | np.isin(r.cohorts + 1, ANOMALY_COHORTS)
    baseline = improvements(smooth).r
    assert np.abs(r.r - baseline)[touched].min() > 0.03
    np.testing.assert_allclose(r.r[~touched], baseline[~touched], atol=1e-12)


@pytest.mark.mortcorr
def testLexis_period_life_expectancy():
    assert period_life_expectancy(_q(np.zeros(70)), 0, 65, 2000) == 65.
    assert period_life_expectancy(_q(np.ones(70)), 0, 65, 2000) == 0.
    assert period_life_expectancy(_q(np.full(10, 0.5)), 2, 5, 2000) == pytest.approx(0.875)
    with pytest.raises(SurfaceError):
        period_life_expectancy(_q(np.full(10, 0.5)), 5, 5, 2000)
    with pytest.raises(SurfaceError):
        period_life_expectancy(_q(np.full(10, 0.5)), 5, 12, 2000)
    with pytest.raises(SurfaceError):
        period_life_expectancy(_q(np.full(10, 0.5)), 0, 5, 2001)

    q = _q(np.column_stack([np.full(10, 0.5), np.zeros(10)]), years=(2000, 2001))
    series = period_life_expectancy_series(q, 0, 3)
    assert series.tolist() == [0.875, 3.]
    assert series.index.tolist() == [2000, 2001]


@pytest.mark.mortcorr
def testLexis_force_of_mortality_curve(gompertz_surface):
    curve = force_of_mortality_curve(gompertz_surface, 1990)
    np.testing.assert_array_equal(curve, gompertz_surface.rates[:, 10])
    slope = np.diff(np.log(curve))
    np.testing.assert_allclose(slope, 0.1, atol=1e-9)


@pytest.mark.mortcorr
def testLexis_death_curve():
    d = death_curve(_q(np.ones(5)), 2000, radix=1000.)
    assert d.tolist() == [1000., 0., 0., 0., 0.]
    q = np.array([0.1, 0.2, 0.3, 0.4])
    d = death_curve(_q(q), 2000)
    assert d.sum() == pytest.approx(100000. * (1. - np.prod(1. - q)))
    with pytest.raises(SurfaceError):
        death_curve(_q(q), 2000, radix=0.)


@pytest.mark.mortcorr
def testLexis_death_curve_smoother_after_correction(gompertz_surface):
    """Dividing the anomaly out makes the death curve smoother."""
    from mortcorr.fertility import correct_surface, inverse_indicator

    injected = inject_anomaly(gompertz_surface, ANOMALY_COHORTS, ANOMALY_FACTORS)
    corrected = correct_surface(injected, inverse_indicator(ANOMALY_COHORTS, ANOMALY_FACTORS),
                                pass_through=True)
    crude = death_curve(to_q(injected), 1999)
    smooth = death_curve(to_q(corrected), 1999)
    assert curve_roughness(smooth) < curve_roughness(crude)


@pytest.mark.mortcorr
def testLexis_kannisto_extend():
    """A logistic force of mortality is reproduced."""
    fit_ages = np.arange(80, 95)
    target = np.arange(95, 110)
    mu = expit(-9.5 + 0.1 * np.arange(80, 110))
    q = -np.expm1(-mu)
    extended = kannisto_extend(q[:15, None], fit_ages, target)
    np.testing.assert_allclose(extended[:, 0], q[15:], atol=1e-3)


@pytest.mark.mortcorr
def testLexis_close_table(gompertz_surface):
    q = to_q(gompertz_surface)
    closed = close_table(q, omega=120)
    assert closed.omega == 120
    assert closed.raw_max_age == 95
    np.testing.assert_array_equal(closed.q[-1], 1.)
    np.testing.assert_array_equal(closed.q[:36], q.q)
    assert (np.diff(closed.q, axis=0) >= 0).all()

    early = close_table(q, closure_start=90, omega=100, fit_ages=10)
    assert early.raw_max_age == 90
    np.testing.assert_array_equal(early.q[:31], q.q[:31])

    with pytest.raises(SurfaceError):
        close_table(q, omega=95)
    with pytest.raises(SurfaceError):
        close_table(q, closure_start=63)
