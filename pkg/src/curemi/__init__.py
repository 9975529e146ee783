"""Cox proportional-hazards mixture cure models with multiply imputed covariates.

The package fits the cure model by EM, imputes partially observed covariates
by chained equations (exact conditional or approximate regression draws),
pools the completed-data fits by Rubin's rules and runs simulation studies
of the whole pipeline.
"""

from .cure import CureFit, bootstrap_se, e_step, fit_cure_em, predict
from .data import (CovariateSpec, Kind, ModelSpec, Placement, SurvivalDataset, load_csv,
                   load_schema, validate, write_csv)
from .diagnostics import FollowupCheck, followup_interval_check
from .errors import CureMIError
from .glm import StepFunction, breslow_cumhaz, fit_cox, fit_logistic
from .imputation import ImputationConfig, ImputationRun, run_chained_equations
from .pooling import PooledEstimate, pool, pool_fits
from .simulation import ScenarioConfig, ampute, generate_replicate, run_study, scenario_presets

__all__ = [
    "CovariateSpec", "CureFit", "CureMIError", "FollowupCheck", "ImputationConfig",
    "ImputationRun", "Kind", "ModelSpec", "Placement", "PooledEstimate", "ScenarioConfig",
    "StepFunction", "SurvivalDataset", "ampute", "bootstrap_se", "breslow_cumhaz", "e_step",
    "fit_cox", "fit_cure_em", "fit_logistic", "followup_interval_check", "generate_replicate",
    "load_csv", "load_schema", "pool", "pool_fits", "predict", "run_chained_equations",
    "run_study", "scenario_presets", "validate", "write_csv",
]
