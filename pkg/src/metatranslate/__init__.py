"""Few-shot unpaired domain translation with a meta-learned GAN initialization.

Modules: ``autodiff`` (tape-based reverse mode), ``nn`` (MLP nets and
parameter sets), ``losses``, ``optim``, ``tasks`` (task families and
episodes), ``meta`` (meta-training and adaptation), ``evaluation`` (Frechet
distance and reports), ``protocol`` (hold-one-out comparison) and ``cli``.
"""

from .autodiff import ContractError, NonFiniteError, Tape, Var, backward, grad_check
from .evaluation import fold_report, frechet_gaussian, frechet_samples
from .losses import LossBreakdown, LossWeights, composite_objective
from .meta import FineTuneState, Hyperparams, MetaState, adapt, initial_state, meta_train, meta_update
from .nn import Net, NetSpec, init_params
from .params import ParamSet
from .tasks import EpisodeConfig, TaskDistribution, TranslationTask, sample_task

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "NonFiniteError",
    "Tape",
    "Var",
    "backward",
    "grad_check",
    "ParamSet",
    "NetSpec",
    "Net",
    "init_params",
    "LossWeights",
    "LossBreakdown",
    "composite_objective",
    "EpisodeConfig",
    "TaskDistribution",
    "TranslationTask",
    "sample_task",
    "Hyperparams",
    "MetaState",
    "FineTuneState",
    "initial_state",
    "meta_update",
    "meta_train",
    "adapt",
    "frechet_gaussian",
    "frechet_samples",
    "fold_report",
]
