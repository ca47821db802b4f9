"""obfuscheck: noise-injection defenses, L-inf attacks, and executable
gradient-obfuscation diagnostics for small image classifiers."""

from .attacks import (AttackConfig, AttackOutcome, attack_with_restarts,
                      clean_accuracy, eot_gradient, evaluate_attack, fgsm,
                      pgd, project, random_init)
from .checklist import ChecklistConfig, run_checklist
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, generate_synthetic, load_idx, write_idx
from .estimator import NoiseInjectedClassifier
from .models import Network, build_model, compute_sigma, grad_check
from .rng import RngState, derive_rng, mix
from .training import TrainConfig, TrainLog, train

__all__ = [
    "AttackConfig", "AttackOutcome", "ChecklistConfig", "Dataset", "Network",
    "NoiseInjectedClassifier", "RngState", "TrainConfig", "TrainLog",
    "attack_with_restarts", "build_model", "clean_accuracy", "compute_sigma",
    "derive_rng", "eot_gradient", "evaluate_attack", "fgsm", "generate_synthetic",
    "grad_check", "load_checkpoint", "load_idx", "mix", "pgd", "project",
    "random_init", "run_checklist", "save_checkpoint", "train", "write_idx",
]

__version__ = "0.1.0"
