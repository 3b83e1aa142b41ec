"""Config-driven experiment harness: TOML configs, CSV outputs, manifests."""
from .config import EXPERIMENTS, ExperimentConfig, parse_config, validate
from .fits import SlopeFit, fit_linear_growth, fit_quadratic_enhancement
from .manifest import RunManifest
from .runner import report, rerun, run

__all__ = ["EXPERIMENTS", "ExperimentConfig", "parse_config", "validate", "SlopeFit",
           "fit_linear_growth", "fit_quadratic_enhancement", "RunManifest", "report", "rerun",
           "run"]
