"""Multi-modal multi-view device-directed speech detection: dual-encoder
fusion with per-view heads, contrastive text-audio alignment, weighted
multi-task training, and post-hoc decision policies."""

from .data import Dataset, GenConfig, UtterancePair, generate_synthetic, load_jsonl, save_jsonl, split
from .losses import LossBreakdown, LossWeights, info_nce, total_loss
from .metrics import EvalReport, accuracy, build_report, eer, roc_curve
from .model import M3VParams, ViewScores, alignment_score, fuse, score
from .policy import Decision, SvmModel, ThresholdSet, calibrate_thresholds, policy1_decide, policy2_decide, train_svm
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
