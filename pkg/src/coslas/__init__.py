"""Cooperative simultaneous localization and synchronization by hybrid BP."""
from .config import ConfigError, ScenarioConfig, parse_config
from .messages import UNINFORMATIVE, AnnulusMixture, Gaussian, GaussianMixture, NumericalError

__all__ = ["ConfigError", "ScenarioConfig", "parse_config", "UNINFORMATIVE",
           "AnnulusMixture", "Gaussian", "GaussianMixture", "NumericalError"]
