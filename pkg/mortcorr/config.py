""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

Run configuration. Every key has a default; a YAML file holding a
flat mapping overrides them.
"""
import hashlib
import json
import logging

from dataclasses import asdict, dataclass, field, fields

import yaml

from mortcorr.lexis import MIN_CLOSURE_AGES
from mortcorr.models import MODELS


class ConfigError(ValueError):
    pass


# Defaults that are our own choice rather than data-driven
LABELLED_DEFAULTS = ("age_min", "age_max", "calibration_years", "n_scenarios", "horizon",
                     "omega")


@dataclass
class RunConfig:
    deaths_path: str = None
    population_path: str = None
    births_path: str = None
    predicted_indicator_path: str = None
    portfolio_path: str = None
    portfolio_config_path: str = None
    gender: str = "total"
    age_min: int = 60
    age_max: int = 95
    year_min: int = None
    year_max: int = None
    calibration_years: int = 30
    models: list = field(default_factory=lambda: list(MODELS))
    selection_override: str = None
    selection_weights: dict = field(default_factory=lambda: {"bic": 1.})
    n_scenarios: int = 5000
    horizon: int = 60
    seed: int = 0
    percentiles: list = field(default_factory=lambda: [0.5, 50., 99.5])
    omega: int = 120
    closure_fit_ages: int = 15
    pass_through: bool = False
    population_vintage: str = "consistent"
    month_weights: str = "midpoint"
    skip_correction: bool = False
    le_age: int = 65
    le_truncation: int = None
    stability: bool = True
    stability_weight: str = "amount"
    holdout: int = 10
    export_scenarios: bool = False
    output_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.gender not in ("female", "male", "total"):
            raise ConfigError("gender must be female, male or total, got %r" % self.gender)
        if not 0 <= self.age_min < self.age_max:
            raise ConfigError("Need 0 <= age_min < age_max")
        if self.omega <= self.age_max:
            raise ConfigError("omega must exceed age_max")
        unknown = [m for m in self.models if m not in MODELS]
        if not self.models or unknown:
            raise ConfigError("models must be a non-empty subset of %s" % (MODELS,))
        if self.selection_override is not None and self.selection_override not in self.models:
            raise ConfigError("selection_override %r is not among the fitted models" %
                              self.selection_override)
        if self.n_scenarios < 1 or self.horizon < 1:
            raise ConfigError("n_scenarios and horizon must be positive")
        if any(not 0 < p < 100 for p in self.percentiles):
            raise ConfigError("percentiles must lie in (0, 100)")
        if self.population_vintage not in ("consistent", "plus", "minus"):
            raise ConfigError("Unknown population_vintage %r" % self.population_vintage)
        if self.month_weights not in ("midpoint", "calendar"):
            raise ConfigError("Unknown month_weights %r" % self.month_weights)
        if self.stability_weight not in ("amount", "count"):
            raise ConfigError("stability_weight must be amount or count")
        if self.closure_fit_ages < MIN_CLOSURE_AGES:
            raise ConfigError("closure_fit_ages must be at least %d" % MIN_CLOSURE_AGES)
        if self.holdout < 1:
            raise ConfigError("holdout must be at least one year")
        if self.calibration_years < 11:
            raise ConfigError("calibration_years must be at least 11")
        bad = set(self.selection_weights) - {"bic", "runs", "stability"}
        if bad:
            raise ConfigError("Unknown selection weights %s" % sorted(bad))

    @classmethod
    def from_yaml(cls, filename, **overrides):
        with open(filename) as fp:
            doc = yaml.safe_load(fp) or {}
        if not isinstance(doc, dict):
            raise ConfigError("%s must hold a flat key/value mapping" % filename)
        return cls.from_dict({**doc, **{k: v for k, v in overrides.items() if v is not None}})

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError("Unknown configuration keys: %s" % unknown)
        nested = [k for k, v in doc.items()
                  if isinstance(v, dict) and k != "selection_weights"]
        if nested:
            raise ConfigError("Configuration must be flat, nested keys: %s" % nested)
        return cls(**doc)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """SHA-256 of the canonical JSON of the effective configuration,
        output location excluded.
        """
        doc = self.to_dict()
        doc.pop("output_dir")
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def labelled_defaults(self):
        """Keys still at a default of our own choosing."""
        out = {}
        for f in fields(self):
            if f.name not in LABELLED_DEFAULTS:
                continue
            if getattr(self, f.name) == f.default:
                out[f.name] = f.default
        if out:
            logging.info("Using default settings %s" % out)
        return out
