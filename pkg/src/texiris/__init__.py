"""Texture-energy iris recognition on a small numpy autodiff engine."""
from .data import Dataset, SynthSpec, generate_synthetic, load_dataset, synthetic_dataset
from .experiments import ExperimentConfig, cross_dataset_experiment, within_dataset_experiment
from .matching import Signature, ScoreSet, det_metrics, dissimilarity, extract_signatures, run_verification
from .models import CombNet, CombNetVariant, build_autoencoder, build_combnet, combnet_spec, count_params
from .tensor import Tensor, no_grad, precision
from .training import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"
