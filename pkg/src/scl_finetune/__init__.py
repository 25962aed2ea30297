"""Supervised contrastive fine-tuning objectives, a reference encoder and an experiment harness."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .objectives import (AugmentedBatch, LabeledBatch, LossConfig, LossOutput, Variant, ce_ce_loss,  # noqa: F401
                         combined_loss, compute_loss, cross_entropy, finite_difference_check, scl_loss,
                         self_supervised_loss)
from .encoder import EncoderConfig, ModelParams, compose_input, encode_batch, featurize, init_params  # noqa: F401
from .data import (Dataset, Example, NoiseChannelConfig, SplitSpec, apportion, augment_noise,  # noqa: F401
                   load_dataset, make_splits, make_synthetic_dataset, stratified_sample)
from .trainer import TrainConfig, evaluate, train_run  # noqa: F401
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: F401
