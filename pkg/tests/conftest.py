"""
mortcorr : Test Config
======================

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
"""

import os
import sys
import shutil
import pytest

import numpy as np

# Note: This line forces the test suite to import the mortcorr package
# in the current source tree
sys.path.insert(1, os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir)))

from mortcorr.lexis import MortalitySurface  # noqa: E402
from mortcorr.oracle import OracleSpec, inject_anomaly, simulate_population  # noqa: E402

##
#  Directory Fixtures
##


@pytest.fixture(scope="session")
def rootDir():
    """The root folder of the repository."""
    return os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir))


@pytest.fixture(scope="session")
def tmpDir():
    """A temporary folder for the test session. This folder is
    presistent after the tests have run so that the status of generated
    files can be checked. The folder is instead cleared before a new
    test session.
    """
    testDir = os.path.dirname(__file__)
    theDir = os.path.join(testDir, "temp")
    if os.path.isdir(theDir):
        shutil.rmtree(theDir)
    if not os.path.isdir(theDir):
        os.mkdir(theDir)
    return theDir


@pytest.fixture(scope="function")
def fncDir(tmpDir):
    """A temporary folder for a single test function."""
    fncDir = os.path.join(tmpDir, "f_temp")
    if os.path.isdir(fncDir):
        shutil.rmtree(fncDir)
    if not os.path.isdir(fncDir):
        os.mkdir(fncDir)
    return fncDir


@pytest.fixture(scope="session")
def hmdDir():
    """Folder with genuine HMD/HFD files, if any."""
    theDir = os.environ.get("MORTCORR_HMD_DIR")
    if not theDir or not os.path.isdir(theDir):
        pytest.skip("Set MORTCORR_HMD_DIR to run tests on genuine HMD/HFD files")
    return theDir


##
#  Mock Files
##

DEATHS_TEXT = """Oracleland, Deaths (Lexis triangle)

  Year   Age  Cohort     Female      Male     Total
  2000    60    1940      10.0      12.0      22.0
  2000    60    1939       9.0      11.0      20.0
  2000    61    1939      11.0      13.0      24.0
  2000    61    1938       .         14.0      .
  2001    60    1941      10.5      12.5      23.0
  2001    60    1940       9.5      10.5      20.0
  2001    61    1940      11.5      12.5      24.0
  2001   61+    1939      12.0      14.0      26.0
"""

POPULATION_TEXT = """Oracleland, Population size (abridged)

   Year   Age     Female      Male     Total
   2000    60     1000.0     900.0    1900.0
   2000    61      950.0     850.0    1800.0
   2001    60     1010.0     910.0    1920.0
   2001    61      960.0     860.0    1820.0
  2002+    60     1020.0     920.0    1940.0
  2002+    61      970.0     870.0    1840.0
  2002-    60     1030.0     930.0    1960.0
  2002-    61      980.0     880.0    1860.0
"""

BIRTHS_TEXT = """ORC, Live births by month

  Code  Year  Month   Births
   ORC  2000      1      100
   ORC  2000      2      100
   ORC  2000      3      100
   ORC  2000      4      100
   ORC  2000      5      100
   ORC  2000      6      100
   ORC  2000      7      100
   ORC  2000      8      100
   ORC  2000      9      100
   ORC  2000     10      100
   ORC  2000     11      100
   ORC  2000     12      100
   ORC  2000    TOT     1200
   ORC  2001      1        0
   ORC  2001      2        0
   ORC  2001      3        0
   ORC  2001      4        0
   ORC  2001      5        0
   ORC  2001      6        0
   ORC  2001      7        0
   ORC  2001      8        0
   ORC  2001      9        0
   ORC  2001     10        0
   ORC  2001     11      100
   ORC  2001     12      100
   ORC  2001    UNK        3
   ORC  2002      1      100
   ORC  2002      2      100
"""


@pytest.fixture(scope="function")
def deaths_file(fncDir):
    path = os.path.join(fncDir, "ORC.Deaths_lexis.txt")
    with open(path, "w") as fp:
        fp.write(DEATHS_TEXT)
    return path


@pytest.fixture(scope="function")
def population_file(fncDir):
    path = os.path.join(fncDir, "ORC.Population.txt")
    with open(path, "w") as fp:
        fp.write(POPULATION_TEXT)
    return path


@pytest.fixture(scope="function")
def births_file(fncDir):
    path = os.path.join(fncDir, "ORCbirthsRR.txt")
    with open(path, "w") as fp:
        fp.write(BIRTHS_TEXT)
    return path


##
#  Objects
##

def gompertz_rates(ages, years, a=2e-5, b=0.1, improvement=0.015):
    """m(x, t) = a exp(b x) (1 - improvement)^(t - t0)."""
    ages = np.asarray(ages, dtype=float)
    steps = np.asarray(years, dtype=float) - years[0]
    return a * np.exp(b * ages)[:, None] * ((1. - improvement) ** steps)[None, :]


def make_surface(rates, ages, years, exposure=1e5, source="crude", gender="total"):
    """Surface with deaths exactly m*E."""
    e = np.full(rates.shape, float(exposure))
    return MortalitySurface(ages=ages, years=years, deaths=rates * e, exposure=e,
                            gender=gender, source=source)


@pytest.fixture(scope="session")
def gompertz_surface():
    """Noise-free Gompertz surface, ages 60-95, years 1980-2009."""
    ages = np.arange(60, 96)
    years = np.arange(1980, 2010)
    return make_surface(gompertz_rates(ages, years), ages, years)


@pytest.fixture(scope="session")
def poisson_surface():
    """Gompertz surface with Poisson deaths at exposure 1e5 per cell."""
    ages = np.arange(60, 100)
    years = np.arange(1980, 2010)
    rates = gompertz_rates(ages, years)
    rng = np.random.default_rng(20240101)
    e = np.full(rates.shape, 1e5)
    return MortalitySurface(ages=ages, years=years, deaths=rng.poisson(rates * e).astype(float),
                            exposure=e)


ANOMALY_COHORTS = (1915, 1919, 1920, 1940)
ANOMALY_FACTORS = (1.06, 1. / 1.06, 1.06, 1.06)


@pytest.fixture(scope="session")
def anomaly_surface(poisson_surface):
    """Poisson Gompertz surface with +/-6% rate anomalies on four
    diagonals.
    """
    return inject_anomaly(poisson_surface, ANOMALY_COHORTS, ANOMALY_FACTORS)


def late_months():
    """Births in November and December only."""
    months = np.zeros(12)
    months[10:] = .5
    return months


@pytest.fixture(scope="session")
def oracle_spec():
    """Cohorts 1914-1950 observed over 1995-2011 at ages 60-80 with a
    late-born 1919 cohort.
    """
    births = {b: 20000 for b in range(1914, 1951)}
    return OracleSpec.gompertz(4e-5, 0.095, births=births, start_year=1995, end_year=2011,
                               months={1919: late_months()}, seed=7, max_age=110)


@pytest.fixture(scope="session")
def oracle_output(oracle_spec):
    return simulate_population(oracle_spec)


@pytest.fixture(scope="session")
def oracle_files(oracle_output, tmpDir):
    """HMD/HFD text files of the session oracle run."""
    theDir = os.path.join(tmpDir, "oracle")
    if not os.path.isdir(theDir):
        os.mkdir(theDir)
    return oracle_output.write(theDir)
