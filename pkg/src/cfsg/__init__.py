"""Crop/weed segmentation trained on field images and applied to aerial orthomosaics.

Modules: ``tensor`` (layer kernels), ``network`` (encoder-decoder),
``training``, ``imaging``, ``crf``, ``evaluation``, ``mapping`` and the
``cli`` / ``checkpoint`` / ``config`` plumbing.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .crf import CrfParams, mean_field_infer, refine
from .evaluation import ConfusionMatrix, metrics
from .mapping import plan_tiles, predict_roi, prescription, spray_stats
from .network import ArchitectureConfig, build_model, forward, parameter_count
from .training import TrainConfig, compute_class_weights, train, weighted_cross_entropy

__version__ = "0.1.0"
