"""Peak-guided calibration detector: residual + pixel patch scoring."""

from .errors import (ContractError, DataError, InvalidInputError, PgcError,
                     TrainingError, VerificationError)
from .model import (ModelConfig, PgcOutputs, classify, forward, gradcheck_model,
                    init_params, loss, model_config_from_dict, predict)
from .params import ModelParams, load_checkpoint, save_checkpoint
from .residual import compute_residual, rgb_to_ycbcr, round_half_away

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataError", "InvalidInputError", "PgcError",
    "TrainingError", "VerificationError",
    "ModelConfig", "PgcOutputs", "classify", "forward", "gradcheck_model",
    "init_params", "loss", "model_config_from_dict", "predict",
    "ModelParams", "load_checkpoint", "save_checkpoint",
    "compute_residual", "rgb_to_ycbcr", "round_half_away",
    "__version__",
]
