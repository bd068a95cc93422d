"""mistlab: a small laboratory for transfer attacks built on a from-scratch autodiff tape."""

__version__ = "0.1.0"

from .attacks import AdversarialBatch, AttackConfig, MomentumAttack, run_attack
from .evaluation import (
    BitDepth,
    GaussianBlur,
    NoDefense,
    RandResizePad,
    TransferReport,
    ablate_components,
    ablate_lambda,
    ablate_n,
    apply_defense,
    success_rate,
    transfer_matrix,
)
from .exceptions import (
    ArchitectureMismatchError,
    ConfigurationError,
    ContractError,
    IDXFormatError,
    IDXMagicError,
    IDXOverflowError,
    IDXTruncatedError,
    InvariantError,
    ShapeError,
    TrainingDivergedError,
    TruncatedWeightsError,
    WeightFormatError,
)
from .models import MLP, Ensemble, LinearSoftmax, SmallConvNet, TrainConfig, load_weights, save_weights, train
from .tensor import Tensor, backward, grad, grad_check
from .transforms import DIM, MIST, SIM, TIM, Admix, Identity, compose

__all__ = [
    "__version__",
    "AdversarialBatch",
    "AttackConfig",
    "MomentumAttack",
    "run_attack",
    "BitDepth",
    "GaussianBlur",
    "NoDefense",
    "RandResizePad",
    "TransferReport",
    "ablate_components",
    "ablate_lambda",
    "ablate_n",
    "apply_defense",
    "success_rate",
    "transfer_matrix",
    "ArchitectureMismatchError",
    "ConfigurationError",
    "ContractError",
    "IDXFormatError",
    "IDXMagicError",
    "IDXOverflowError",
    "IDXTruncatedError",
    "InvariantError",
    "ShapeError",
    "TrainingDivergedError",
    "TruncatedWeightsError",
    "WeightFormatError",
    "MLP",
    "Ensemble",
    "LinearSoftmax",
    "SmallConvNet",
    "TrainConfig",
    "load_weights",
    "save_weights",
    "train",
    "Tensor",
    "backward",
    "grad",
    "grad_check",
    "DIM",
    "MIST",
    "SIM",
    "TIM",
    "Admix",
    "Identity",
    "compose",
]
