"""Federated multimodal prompt tuning under missing modalities, at desk scale.

Modules: ``numcore`` (reverse-mode tape), ``synthdata`` (synthetic two-modality
benchmark), ``vlbackbone`` (frozen encoder and trainable head), ``promptpool``
(key-query prompt retrieval), ``client`` (local updates), ``alignserver``
(server prompt alignment), ``orchestrator`` (federated rounds and baselines).
"""
from .errors import (ConfigError, ContractError, DegenerateVectorError, DimensionError, FedPromptError,
                     InfeasibleError, NonFiniteError)
from .orchestrator import Method, RunConfig, evaluate, run, run_baseline

__all__ = [
    "ConfigError", "ContractError", "DegenerateVectorError", "DimensionError", "FedPromptError",
    "InfeasibleError", "NonFiniteError", "Method", "RunConfig", "evaluate", "run", "run_baseline",
]
__version__ = "0.1.0"
