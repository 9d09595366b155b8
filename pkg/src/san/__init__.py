"""Selective adversarial networks for partial domain adaptation, on a small numpy autodiff."""

from .autodiff import Tape, Tensor, backward, grad_reverse
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, SyntheticSpec, generate_synthetic, load_csv, make_batches
from .harness import evaluate, run_experiment, sweep_target_classes, train
from .losses import ClassWeightState, LossBreakdown
from .model import SanModel, build_model, forward, predict
from .optim import TrainConfig, lambda_schedule, lr_schedule

__version__ = "0.1.0"
