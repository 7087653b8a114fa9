""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Readers and writers for Human Mortality Database (HMD) style
``Deaths_lexis`` and ``Population`` text files, Human Fertility
Database (HFD) style monthly birth files, and the CSV/JSON tables
every other module emits.
"""
import json
import logging

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

MISSING = "."
OPEN_AGE = 110
GENDERS = ("female", "male", "total")
MONTH_EXTRAS = ("TOT", "UNK")
FLOAT_FORMAT = "%.5e"


class HMDFormatError(ValueError):
    """A line of an input file could not be parsed."""

    def __init__(self, filename, lineno, reason):
        self.filename = str(filename)
        self.lineno = lineno
        self.reason = reason
        if lineno is None:
            super().__init__("%s: %s" % (self.filename, reason))
        else:
            super().__init__("%s:%d: %s" % (self.filename, lineno, reason))


class HMDValidationError(HMDFormatError):
    """A line parsed but violates an invariant of its record type."""


def _gender_column(gender):
    try:
        return GENDERS.index(gender)
    except ValueError:
        raise ValueError("Unknown gender %r, expected one of %s" % (gender, ", ".join(GENDERS)))


@dataclass(frozen=True, eq=False)
class RawDeathsLexis:
    """Deaths by year, age and cohort (Lexis triangle). Counts are
    stored as floats with NaN for the HMD missing marker.
    """
    year: np.ndarray
    age: np.ndarray
    cohort: np.ndarray
    counts: np.ndarray
    open_age: np.ndarray
    country: str = ""

    def __post_init__(self):
        object.__setattr__(self, "year", np.asarray(self.year, dtype=int))
        object.__setattr__(self, "age", np.asarray(self.age, dtype=int))
        object.__setattr__(self, "cohort", np.asarray(self.cohort, dtype=int))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "open_age", np.asarray(self.open_age, dtype=bool))
        bad = (self.cohort != self.year - self.age) & (self.cohort != self.year - self.age - 1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise HMDValidationError("<deaths>", None, "cohort %d outside {%d, %d}" % (
                self.cohort[i], self.year[i] - self.age[i], self.year[i] - self.age[i] - 1))
        if (self.counts < 0).any():
            raise HMDValidationError("<deaths>", None, "negative death count")
        keys = self.year * 1000000 + self.age * 1000 + (self.year - self.age - self.cohort)
        if np.unique(keys).size != keys.size:
            raise HMDValidationError("<deaths>", None, "duplicate (year, age, cohort) key")

    def __len__(self):
        return self.year.size

    @property
    def missing(self):
        return np.isnan(self.counts)

    @property
    def lower(self):
        """True for lower-triangle records (cohort = year - age)."""
        return self.cohort == self.year - self.age

    def column(self, gender):
        return self.counts[:, _gender_column(gender)]


@dataclass(frozen=True, eq=False)
class RawPopulation:
    """January-1 population counts. ``suffix`` keeps the territorial
    change marker ("+", "-" or "") of the year token.
    """
    year: np.ndarray
    age: np.ndarray
    counts: np.ndarray
    open_age: np.ndarray
    suffix: np.ndarray = None
    country: str = ""

    def __post_init__(self):
        object.__setattr__(self, "year", np.asarray(self.year, dtype=int))
        object.__setattr__(self, "age", np.asarray(self.age, dtype=int))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "open_age", np.asarray(self.open_age, dtype=bool))
        if self.suffix is None:
            object.__setattr__(self, "suffix", np.full(self.year.size, "", dtype="<U1"))
        else:
            object.__setattr__(self, "suffix", np.asarray(self.suffix, dtype="<U1"))
        if (self.counts < 0).any():
            raise HMDValidationError("<population>", None, "negative population count")
        keys = list(zip(self.year.tolist(), self.suffix.tolist(), self.age.tolist()))
        if len(set(keys)) != len(keys):
            raise HMDValidationError("<population>", None, "duplicate (year, age) key")

    def __len__(self):
        return self.year.size

    @property
    def missing(self):
        return np.isnan(self.counts)

    @property
    def years(self):
        return np.unique(self.year)

    def column(self, gender):
        return self.counts[:, _gender_column(gender)]

    def counts_at(self, year, gender="total", side="start", vintage="consistent"):
        """Return {age: count} for January 1 of ``year``.

        When a territorial change splits the year into "+" and "-"
        rows, ``vintage`` decides which one is used: "plus", "minus",
        or "consistent", where the population opening a calendar year
        (side="start") is the "+" row and the one closing the previous
        year (side="end") is the "-" row.
        """
        if vintage not in ("consistent", "plus", "minus"):
            raise ValueError("Unknown population vintage %r" % vintage)
        rows = self.year == year
        if not rows.any():
            return {}
        present = set(self.suffix[rows].tolist())
        if present == {""}:
            chosen = ""
        else:
            if vintage == "plus":
                preferred = "+"
            elif vintage == "minus":
                preferred = "-"
            else:
                preferred = "+" if side == "start" else "-"
            chosen = preferred if preferred in present else sorted(present)[0]
            logging.debug("Population %d: using rows with suffix %r" % (year, chosen))
        rows &= self.suffix == chosen
        values = self.column(gender)[rows]
        return dict(zip(self.age[rows].tolist(), values.tolist()))


@dataclass(frozen=True, eq=False)
class MonthlyBirthSeries:
    """Births by calendar month. ``births[year]`` holds twelve values
    with NaN for months that are absent from the source file.
    """
    country: str
    births: dict
    extras: dict = field(default_factory=dict)

    @property
    def years(self):
        return sorted(self.births)

    @property
    def completeness(self):
        return {year: self.is_complete(year) for year in self.years}

    def is_complete(self, year):
        months = self.births.get(year)
        return months is not None and not np.isnan(months).any()

    def monthly(self, year):
        if year not in self.births:
            raise KeyError("No births recorded for %d" % year)
        return np.array(self.births[year], dtype=float)

    def total(self, year):
        """Births over months 1-12 (TOT/UNK rows excluded)."""
        return float(np.nansum(self.monthly(year)))

    @property
    def totals(self):
        return {year: self.total(year) for year in self.years}


def _parse_number(token, filename, lineno):
    if token == MISSING:
        return np.nan
    try:
        value = float(token)
    except ValueError:
        raise HMDFormatError(filename, lineno, "cannot read number %r" % token)
    return value


def _parse_int(token, filename, lineno, what):
    try:
        return int(token)
    except ValueError:
        raise HMDFormatError(filename, lineno, "cannot read %s %r" % (what, token))


def _parse_age(token, filename, lineno):
    if token.endswith("+"):
        return _parse_int(token[:-1], filename, lineno, "age"), True
    return _parse_int(token, filename, lineno, "age"), False


def _parse_year(token, filename, lineno):
    """Year tokens may carry a territorial change suffix ("1990+",
    "1990-" or "1990−").
    """
    suffix = ""
    if token[-1] in "+-−":
        suffix = "+" if token[-1] == "+" else "-"
        token = token[:-1]
    return _parse_int(token, filename, lineno, "year"), suffix


def _read_rows(path, header_token, ncols):
    """Yield (lineno, tokens) for data lines after the column header.
    Title lines before the header become the country name.
    """
    country = ""
    header_seen = False
    rows = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if not header_seen:
                if tokens[0] == header_token:
                    header_seen = True
                elif not country:
                    country = line.split(",")[0].strip()
                continue
            if len(tokens) < ncols:
                raise HMDFormatError(path, lineno, "expected %d columns, found %d" % (
                    ncols, len(tokens)))
            rows.append((lineno, tokens))
    if not header_seen:
        raise HMDFormatError(path, None, "no column header starting with %r" % header_token)
    return country, rows


def parse_deaths_lexis(path):
    """Parse an HMD ``Deaths_lexis`` file (Year, Age, Cohort, Female,
    Male, Total).
    """
    country, rows = _read_rows(path, "Year", 6)
    year, age, cohort, counts, open_age = [], [], [], [], []
    seen = {}
    for lineno, tokens in rows:
        if len(tokens) != 6:
            raise HMDFormatError(path, lineno, "expected 6 columns, found %d" % len(tokens))
        y = _parse_int(tokens[0], path, lineno, "year")
        x, is_open = _parse_age(tokens[1], path, lineno)
        c = _parse_int(tokens[2], path, lineno, "cohort")
        values = [_parse_number(tok, path, lineno) for tok in tokens[3:]]
        if c not in (y - x, y - x - 1):
            raise HMDValidationError(path, lineno, "cohort %d must be %d or %d" % (
                c, y - x, y - x - 1))
        if any(v < 0 for v in values):
            raise HMDValidationError(path, lineno, "negative death count")
        key = (y, x, c)
        if key in seen:
            raise HMDValidationError(path, lineno, "duplicate key %s (first on line %d)" % (
                key, seen[key]))
        seen[key] = lineno
        year.append(y)
        age.append(x)
        cohort.append(c)
        counts.append(values)
        open_age.append(is_open)
    missing = int(np.isnan(np.array(counts, dtype=float)).any(axis=1).sum()) if counts else 0
    logging.debug("Read %d Lexis death records from %s (%d with missing values)" % (
        len(year), path, missing))
    return RawDeathsLexis(year=year, age=age, cohort=cohort, counts=np.array(counts, dtype=float),
                          open_age=open_age, country=country)


def parse_population(path):
    """Parse an HMD ``Population`` file (Year, Age, Female, Male,
    Total).
    """
    country, rows = _read_rows(path, "Year", 5)
    year, suffix, age, counts, open_age = [], [], [], [], []
    seen = {}
    for lineno, tokens in rows:
        if len(tokens) != 5:
            raise HMDFormatError(path, lineno, "expected 5 columns, found %d" % len(tokens))
        y, s = _parse_year(tokens[0], path, lineno)
        x, is_open = _parse_age(tokens[1], path, lineno)
        values = [_parse_number(tok, path, lineno) for tok in tokens[2:]]
        if any(v < 0 for v in values):
            raise HMDValidationError(path, lineno, "negative population count")
        key = (y, s, x)
        if key in seen:
            raise HMDValidationError(path, lineno, "duplicate (year, age) = (%d%s, %d), first "
                                     "on line %d" % (y, s, x, seen[key]))
        seen[key] = lineno
        year.append(y)
        suffix.append(s)
        age.append(x)
        counts.append(values)
        open_age.append(is_open)
    if any(suffix):
        logging.info("%s: territorial change rows for years %s" % (
            path, sorted({y for y, s in zip(year, suffix) if s})))
    return RawPopulation(year=year, age=age, counts=np.array(counts, dtype=float),
                         open_age=open_age, suffix=np.array(suffix, dtype="<U1"),
                         country=country)


def parse_monthly_births(path):
    """Parse an HFD monthly births file (Code, Year, Month, Births).
    TOT and UNK rows are kept aside and never enter the 12-month grid.
    """
    _, rows = _read_rows(path, "Code", 4)
    births = {}
    seen = {}
    extras = {}
    code = ""
    for lineno, tokens in rows:
        code = tokens[0]
        y = _parse_int(tokens[1], path, lineno, "year")
        month = tokens[2]
        value = _parse_number(tokens[3], path, lineno)
        if month in MONTH_EXTRAS:
            if month in extras.setdefault(y, {}):
                raise HMDValidationError(path, lineno, "duplicate %s row for %d" % (month, y))
            extras[y][month] = value
            continue
        m = _parse_int(month, path, lineno, "month")
        if not 1 <= m <= 12:
            raise HMDFormatError(path, lineno, "month %r outside 1..12, TOT, UNK" % month)
        if not np.isnan(value) and value < 0:
            raise HMDValidationError(path, lineno, "negative births")
        if (y, m) in seen:
            raise HMDValidationError(path, lineno, "duplicate month %d for %d, first on line %d"
                                     % (m, y, seen[(y, m)]))
        seen[(y, m)] = lineno
        births.setdefault(y, np.full(12, np.nan))[m - 1] = value
    for y in extras:
        births.setdefault(y, np.full(12, np.nan))
    series = MonthlyBirthSeries(country=code, births=births, extras=extras)
    incomplete = [y for y, ok in series.completeness.items() if not ok]
    if incomplete:
        logging.info("%s: incomplete monthly births for %s" % (path, incomplete))
    return series


def _format_number(value):
    if np.isnan(value):
        return MISSING
    return repr(float(value))


def _format_age(age, is_open):
    return "%d+" % age if is_open else "%d" % age


def write_deaths_lexis(data, path, title="Deaths (Lexis triangle)"):
    """Write ``data`` in HMD Deaths_lexis layout: a title line, a
    column header, then one record per line.
    """
    lines = ["%s, %s" % (data.country or "Unknown", title),
             "%6s %6s %8s %24s %24s %24s" % ("Year", "Age", "Cohort", "Female", "Male", "Total")]
    for i in range(len(data)):
        lines.append("%6d %6s %8d %24s %24s %24s" % (
            data.year[i], _format_age(data.age[i], data.open_age[i]), data.cohort[i],
            *[_format_number(v) for v in data.counts[i]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_population(data, path, title="Population size (abridged)"):
    lines = ["%s, %s" % (data.country or "Unknown", title),
             "%7s %6s %24s %24s %24s" % ("Year", "Age", "Female", "Male", "Total")]
    for i in range(len(data)):
        lines.append("%7s %6s %24s %24s %24s" % (
            "%d%s" % (data.year[i], data.suffix[i]),
            _format_age(data.age[i], data.open_age[i]),
            *[_format_number(v) for v in data.counts[i]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_monthly_births(series, path, title="Live births by month"):
    lines = ["%s, %s" % (series.country or "XXX", title),
             "%6s %6s %6s %24s" % ("Code", "Year", "Month", "Births")]
    code = series.country or "XXX"
    for year in series.years:
        for m, value in enumerate(series.births[year], start=1):
            if np.isnan(value):
                continue
            lines.append("%6s %6d %6d %24s" % (code, year, m, _format_number(value)))
        for key in MONTH_EXTRAS:
            if key in series.extras.get(year, {}):
                lines.append("%6s %6d %6s %24s" % (code, year, key,
                                                   _format_number(series.extras[year][key])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _metadata_lines(metadata):
    lines = []
    for key in sorted(metadata or {}):
        value = metadata[key]
        if not isinstance(value, str):
            value = json.dumps(value, sort_keys=True)
        lines.append("# %s: %s\n" % (key, value))
    return "".join(lines)


def write_table(frame, path, metadata=None, index=False):
    """Write ``frame`` as CSV with a ``# key: value`` metadata header
    and a JSON mirror next to it. Return both paths.
    """
    path = Path(path)
    if frame.empty:
        raise ValueError("Refusing to write empty table %s" % path)
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(_metadata_lines(metadata))
        frame.to_csv(fp, index=index, float_format=FLOAT_FORMAT, na_rep=MISSING,
                     lineterminator="\n")
    mirror = path.with_suffix(".json")
    table = json.loads(frame.to_json(orient="split", index=index, double_precision=15))
    mirror.write_text(json.dumps({"metadata": metadata or {}, "table": table},
                                 sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return [path, mirror]


def read_metadata(path):
    metadata = {}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(": ")
            metadata[key] = value
    return metadata


def read_table(path, **kwargs):
    """Read a table written by :func:`write_table`."""
    frame = pd.read_csv(path, comment="#", na_values=[MISSING], keep_default_na=False, **kwargs)
    return frame, read_metadata(path)


def surface_frame(surface, field="rates"):
    """Ages as rows, years as columns."""
    values = getattr(surface, field)
    frame = pd.DataFrame(np.asarray(values, dtype=float), index=pd.Index(surface.ages, name="age"),
                         columns=[str(t) for t in surface.years])
    return frame


def write_surface_csv(surface, path, field="rates", metadata=None):
    """Write one grid of a surface (``rates``, ``deaths``,
    ``exposure`` or ``q``) as an age-by-year CSV.
    """
    from mortcorr.lexis import SurfaceError

    if len(surface.ages) == 0 or len(surface.years) == 0:
        raise SurfaceError("Cannot write an empty surface to %s" % path)
    meta = {"field": field, "gender": surface.gender, "source": surface.source}
    meta.update(metadata or {})
    return write_table(surface_frame(surface, field), path, metadata=meta, index=True)


def read_surface_csv(path):
    """Return (ages, years, values, metadata) of an age-by-year CSV."""
    frame, metadata = read_table(path, index_col=0)
    ages = frame.index.to_numpy(dtype=int)
    years = np.array([int(c) for c in frame.columns])
    return ages, years, frame.to_numpy(dtype=float), metadata


def write_surface_bundle(surface, prefix, metadata=None):
    """Write deaths, exposure and rates of ``surface`` as
    ``<prefix>_deaths.csv``, ``<prefix>_exposure.csv`` and
    ``<prefix>_rates.csv``.
    """
    written = []
    for name in ("deaths", "exposure", "rates"):
        written += write_surface_csv(surface, "%s_%s.csv" % (prefix, name), field=name,
                                     metadata=metadata)
    return written


def read_surface_bundle(prefix):
    from mortcorr.lexis import MortalitySurface

    ages, years, deaths, meta = read_surface_csv("%s_deaths.csv" % prefix)
    ages_e, years_e, exposure, _ = read_surface_csv("%s_exposure.csv" % prefix)
    if not (np.array_equal(ages, ages_e) and np.array_equal(years, years_e)):
        raise ValueError("Deaths and exposure grids of %s differ" % prefix)
    return MortalitySurface(ages=ages, years=years, deaths=deaths, exposure=exposure,
                            gender=meta.get("gender", "total"), source=meta.get("source", "crude"))
