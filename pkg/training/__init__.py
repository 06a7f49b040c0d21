"""
Training module: configuration, supervision, objective and optimizer (the loop lives in training.trainer)
"""

from .config import TrainConfig, load_train_config, save_train_config
from .supervision import build_mask, patch_probabilities, target_similarity
from .objective import EvalReport, LossBreakdown, loss_ce, loss_sim, loss_seg, loss_total, metrics
from .optimizer import Adam, OptimizerState, adam_step, lr_at_epoch
from .robustness import PERTURBATIONS, perturb

__all__ = [
    'TrainConfig',
    'load_train_config',
    'save_train_config',
    'build_mask',
    'patch_probabilities',
    'target_similarity',
    'EvalReport',
    'LossBreakdown',
    'loss_ce',
    'loss_sim',
    'loss_seg',
    'loss_total',
    'metrics',
    'Adam',
    'OptimizerState',
    'adam_step',
    'lr_at_epoch',
    'PERTURBATIONS',
    'perturb'
]
