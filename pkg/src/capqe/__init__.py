"""Quality estimation for image captions from precomputed embeddings."""

from .dataio import Checkpoint, Sample, load_checkpoint, load_samples, save_checkpoint, save_samples
from .metrics import EvalReport, PRPoint, auc, evaluate, ext_good, pr_curve, spearman
from .model import ModelConfig, ModelParams, backward, forward, init_params
from .ratings import QualityScore, Rating, aggregate_sample, stability_report
from .training import TrainConfig, grid_search, train

__version__ = "0.1.0"
