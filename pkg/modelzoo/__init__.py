"""modelzoo

Desk-scale descriptive, generative and discriminative models, their learning
algorithms and the bridges between them, checked against exact oracles.
"""

from .checkpoint import CheckpointHeader, dump_checkpoint, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .mcmc import ChainState, LangevinConfig, langevin_step, run_chains
from .optim import TrainConfig
from .oracle import Domain, brute_force_logz, exact_kl, finite_diff_check
from .tape import Tape, TapeBuilder, conv2d, eval_backward, eval_forward
from .tensor import Tensor

__all__ = (
    "ChainState",
    "CheckpointHeader",
    "ConfigError",
    "Domain",
    "ExperimentConfig",
    "LangevinConfig",
    "Tape",
    "TapeBuilder",
    "Tensor",
    "TrainConfig",
    "brute_force_logz",
    "conv2d",
    "dump_checkpoint",
    "eval_backward",
    "eval_forward",
    "exact_kl",
    "finite_diff_check",
    "langevin_step",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "run_chains",
)
__version__ = "0.1.0"
