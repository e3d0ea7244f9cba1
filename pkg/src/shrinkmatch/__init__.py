"""ShrinkMatch: pseudo-labeling with shrunk class spaces for uncertain samples."""

from ._jit import JIT_ENABLED
from .data import BlobConfig, Dataset, generate_confusable_blobs, load_external, split
from .losses import (AlignmentState, BatchLossReport, align_distribution, batch_certain_ratio,
                     certain_loss, supervised_loss, total_loss, uncertain_loss)
from .nn import ParamSet, backward, confidence, cross_entropy_hard, cross_entropy_soft, forward, softmax
from .shrink import ShrunkSpace, SortedLogits, assemble, find_cutoff, shrunk_confidence, sort_logits
from .state import EmaTracker, update_ratio, update_teacher
from .trainer import RunConfig, Trainer, lr_schedule, run, train_step

__version__ = "0.1.0"
