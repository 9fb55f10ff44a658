"""Multi-modal robust safe control."""
__version__ = "0.1.0"

from .cert import FeasibilityCertificate, prob_at_least, sample_feasibility, state_is_feasible
from .config import ConfigError, bundled_config, load_config, parse_config
from .model import (SegwayParams, StaticModel, baseline_unimodal, make_mode, segway_additive_model,
                    segway_multiplicative_model)
from .safety import GammaSpec, SafetyIndexParams, TiltIndex
from .sim import compare_feasible_sets, rollout, safe_control
from .synthesis import SynthesisConfig, cma_es_synthesize

__all__ = ["ConfigError", "FeasibilityCertificate", "GammaSpec", "SafetyIndexParams", "SegwayParams",
           "StaticModel", "SynthesisConfig", "TiltIndex", "baseline_unimodal", "bundled_config",
           "cma_es_synthesize", "compare_feasible_sets", "load_config", "make_mode", "parse_config",
           "prob_at_least", "rollout", "safe_control", "sample_feasibility",
           "segway_additive_model", "segway_multiplicative_model", "state_is_feasible"]
