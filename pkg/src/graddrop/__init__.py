"""Masked-gradient fine-tuning of a small numpy transformer."""
from .errors import ConfigError, ContractError, DimensionError, InputError, NumericalAbort
from .gradmask import GradMask, MaskPolicy, MaskState, PolicyKind
from .harness import RunConfig, RunRecord, load_config, run_experiment
from .optim import SGD, OptimConfig
from .tensor import Tensor
from .transformer import ModelConfig, ParamSet, init_params

__version__ = "0.1.0"
