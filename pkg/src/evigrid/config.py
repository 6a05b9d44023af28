"""Run configuration: the full description of one estimation grid.

Configs are plain YAML. A minimal file names at least one database, two
treatments, one outcome of interest, and one analysis::

    rng_seed: 7
    treatments: [1, 2]
    outcomes: [1]
    negative_controls: [2, 3, 4]
    analyses:
      - kind: on_treatment
        gap_days: 30
      - kind: intent_to_treat
    min_arm_size: 100
    databases:
      - name: simdb
        simulate:
          n_persons: 50000
          n_treatments: 2
          n_outcomes: 4
          n_baseline_covariates: 20
          covariate_prevalence: 0.2
          channeling_strength: 1.0
          unmeasured_confounder_strength: 0.0
          baseline_hazard_per_day: 0.0002
          mean_treatment_days: 180
          gap_probability: 0.3
          observation_years: 6
          rng_seed: 11
          true_log_hr:
            default: 0.0
            overrides:
              - {treatment: 1, outcome: 1, value: 0.405}

Databases may instead point at pre-generated tables with ``path: <dir>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .cohorts import TimeAtRiskPolicy
from .exceptions import ConfigurationError
from .simulate import SimConfig, complete_true_log_hr

POSITIVE_HAZARD_RATIOS = (1.5, 2.0, 4.0)


@dataclass(frozen=True)
class DatabaseSpec:
    """One database: either simulated in-process or read from files."""

    name: str
    sim: SimConfig | None = None
    path: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("database needs a name")
        if (self.sim is None) == (self.path is None):
            raise ConfigurationError(
                f"database {self.name!r} needs exactly one of simulate/path"
            )


@dataclass(frozen=True)
class RunConfig:
    """Everything run_grid needs to enumerate and estimate the question grid."""

    databases: tuple
    treatments: tuple
    outcomes: tuple
    negative_controls: tuple = ()
    analyses: tuple = (
        TimeAtRiskPolicy("on_treatment", gap_days=30),
        TimeAtRiskPolicy("intent_to_treat"),
    )
    positive_hazard_ratios: tuple = POSITIVE_HAZARD_RATIOS
    min_arm_size: int = 2500
    ps_strata: int = 10
    balance_threshold: float = 0.1
    washout_days: int = 365
    lookback_days: int = 365
    min_covariate_persons: int = 25
    ps_lambda_grid_size: int = 20
    ps_cv_folds: int = 10
    rate_lambda_divisor: float = 100.0
    min_model_persons: int = 100
    min_inject_persons: int = 25
    minimum_controls: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "databases", tuple(self.databases))
        object.__setattr__(self, "treatments", tuple(int(t) for t in self.treatments))
        object.__setattr__(self, "outcomes", tuple(int(o) for o in self.outcomes))
        object.__setattr__(
            self, "negative_controls", tuple(int(o) for o in self.negative_controls)
        )
        object.__setattr__(self, "analyses", tuple(self.analyses))
        object.__setattr__(
            self, "positive_hazard_ratios",
            tuple(float(h) for h in self.positive_hazard_ratios),
        )
        if len(self.databases) < 1:
            raise ConfigurationError("at least one database required")
        names = [d.name for d in self.databases]
        if len(set(names)) != len(names):
            raise ConfigurationError("database names must be unique")
        if len(set(self.treatments)) < 2:
            raise ConfigurationError("at least two distinct treatments required")
        if len(self.outcomes) < 1:
            raise ConfigurationError("at least one outcome required")
        if set(self.outcomes) & set(self.negative_controls):
            raise ConfigurationError("outcomes and negative controls must not overlap")
        if len(set(self.negative_controls)) != len(self.negative_controls):
            raise ConfigurationError("duplicate negative control ids")
        if len(self.analyses) < 1:
            raise ConfigurationError("at least one analysis required")
        kinds = [a.kind for a in self.analyses]
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError("analyses must have distinct kinds")
        if any(h <= 1.0 for h in self.positive_hazard_ratios):
            raise ConfigurationError("positive hazard ratios must exceed 1")
        if self.min_arm_size < 0:
            raise ConfigurationError("min_arm_size must be nonnegative")
        for name in ("ps_strata", "ps_lambda_grid_size", "ps_cv_folds",
                     "min_model_persons", "min_inject_persons", "minimum_controls"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.rate_lambda_divisor <= 0:
            raise ConfigurationError("rate_lambda_divisor must be positive")


def sim_config_from_dict(raw: dict) -> SimConfig:
    """Build a validated SimConfig from a parsed ``simulate:`` mapping."""
    raw = dict(raw)
    n_treatments = int(raw["n_treatments"])
    n_outcomes = int(raw["n_outcomes"])
    truth_spec = raw.pop("true_log_hr", {}) or {}
    overrides = {
        (int(o["treatment"]), int(o["outcome"])): float(o["value"])
        for o in truth_spec.get("overrides", []) or []
    }
    truth = complete_true_log_hr(
        n_treatments, n_outcomes,
        default=float(truth_spec.get("default", 0.0)), overrides=overrides,
    )
    n_cov = int(raw.pop("n_baseline_covariates"))
    if "covariate_prevalences" in raw:
        prevalences = tuple(float(p) for p in raw.pop("covariate_prevalences"))
    else:
        prevalences = (float(raw.pop("covariate_prevalence", 0.2)),) * n_cov
    known = {
        "n_persons", "n_treatments", "n_outcomes", "channeling_strength",
        "unmeasured_confounder_strength", "baseline_hazard_per_day",
        "mean_treatment_days", "gap_probability", "observation_years", "rng_seed",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown simulate keys: {sorted(unknown)}")
    return SimConfig(
        n_persons=int(raw["n_persons"]),
        n_treatments=n_treatments,
        n_outcomes=n_outcomes,
        n_baseline_covariates=n_cov,
        covariate_prevalences=prevalences,
        channeling_strength=float(raw.get("channeling_strength", 0.0)),
        unmeasured_confounder_strength=float(raw.get("unmeasured_confounder_strength", 0.0)),
        true_log_hr=truth,
        baseline_hazard_per_day=float(raw["baseline_hazard_per_day"]),
        mean_treatment_days=float(raw.get("mean_treatment_days", 180.0)),
        gap_probability=float(raw.get("gap_probability", 0.3)),
        observation_years=float(raw.get("observation_years", 6.0)),
        rng_seed=int(raw.get("rng_seed", 0)),
    )


def _analysis_from_dict(raw) -> TimeAtRiskPolicy:
    if isinstance(raw, str):
        return TimeAtRiskPolicy(raw)
    kind = raw["kind"]
    if "gap_days" in raw:
        return TimeAtRiskPolicy(kind, gap_days=int(raw["gap_days"]))
    return TimeAtRiskPolicy(kind)


def run_config_from_dict(raw: dict) -> RunConfig:
    """Build a validated RunConfig from parsed YAML."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    databases = []
    for spec in raw.get("databases", []):
        if "simulate" in spec:
            databases.append(
                DatabaseSpec(name=str(spec["name"]), sim=sim_config_from_dict(spec["simulate"]))
            )
        else:
            databases.append(DatabaseSpec(name=str(spec["name"]), path=spec.get("path")))
    analyses_raw = raw.get("analyses")
    kwargs = {}
    if analyses_raw is not None:
        kwargs["analyses"] = tuple(_analysis_from_dict(a) for a in analyses_raw)
    for key in (
        "positive_hazard_ratios", "min_arm_size", "ps_strata", "balance_threshold",
        "washout_days", "lookback_days", "min_covariate_persons",
        "ps_lambda_grid_size", "ps_cv_folds", "rate_lambda_divisor",
        "min_model_persons", "min_inject_persons", "minimum_controls", "rng_seed",
    ):
        if key in raw:
            kwargs[key] = raw[key]
    return RunConfig(
        databases=tuple(databases),
        treatments=tuple(raw.get("treatments", ())),
        outcomes=tuple(raw.get("outcomes", ())),
        negative_controls=tuple(raw.get("negative_controls", ())),
        **kwargs,
    )


def load_run_config(path: str) -> RunConfig:
    """Parse a YAML config file into a RunConfig."""
    with open(path) as handle:
        raw = yaml.safe_load(handle)
    return run_config_from_dict(raw)
