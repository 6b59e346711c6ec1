"""Minimax robustness workbench.

Trains small image classifiers against norm-bounded adversaries, implements
the matching attack suite (FGSM, multi-restart PGD, margin objectives,
targeted descent), and measures robustness, loss-landscape structure, and
attack transfer between models — all on a self-contained float64 autodiff
tape.
"""

from .attack import (AttackConfig, AttackOutcome, PerturbationBudget,
                     cw_objective, fgsm, fgsm_random, gradient_alignment, pgd,
                     project, run_attack, targeted_pgd)
from .data import Dataset, load_cifar10, load_mnist, make_digits, subset_split
from .estimators import AdversarialPerturber, RobustClassifier
from .nn import (Model, ModelParams, ModelSpec, build_spec, init_params,
                 load_checkpoint, save_checkpoint)
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, TrainLog, adversarial_gradient, sgd_step

__all__ = [
    "AttackConfig", "AttackOutcome", "PerturbationBudget", "cw_objective",
    "fgsm", "fgsm_random", "gradient_alignment", "pgd", "project",
    "run_attack", "targeted_pgd",
    "Dataset", "load_cifar10", "load_mnist", "make_digits", "subset_split",
    "AdversarialPerturber", "RobustClassifier",
    "Model", "ModelParams", "ModelSpec", "build_spec", "init_params",
    "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "backward",
    "TrainConfig", "TrainLog", "adversarial_gradient", "sgd_step",
]

__version__ = "0.1.0"
