"""Multi-objective robust representation learning for image classifiers."""

from .attacks import AttackSpec, cw_linf, fgsm, pgd, project_linf
from .data import BatchPlan, LabeledImages, clamp_to_domain, load_dataset, make_batches
from .embedding import EmbeddingConfig, EmbeddingSpace
from .evaluation import RobustnessReport, accuracy, black_box_eval, build_report, robust_accuracy
from .losses import LossParams
from .scalarization import ScalarizationParams, conic_scalarize
from .training import TrainConfig, fit, load_checkpoint, lr_at_epoch, save_checkpoint, train_step

__version__ = "0.1.0"
