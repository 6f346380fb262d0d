"""Multi-label learning with missing labels: ternary label merging, masked
metrics, a soft-F1 loss with analytic gradients, class balancing and a toy
trainer."""

from .balance import BalancePlan, SelectionConfig, drop_all_unknown, greedy_balance, imbalance_ratio, occurrence_filter
from .labelstore import (
    ClassHistogram,
    DatasetDescriptor,
    LabelMatrix,
    MergedDatabase,
    PredictionMatrix,
    TernaryLabel,
    class_histogram,
    merge,
    missing_fraction,
)
from .loss import LossResult, SoftF1Config, finite_difference_check, soft_class_f1, soft_f1_loss
from .metrics import (
    MetricReport,
    OccurrenceWeights,
    binarize,
    class_f1,
    macro_f1,
    mask_class,
    masked_accuracy,
    selection_score,
    weighted_macro_f1,
)
from .trainer import TrainConfig, ToyModel, fit, predict, synth_dataset

__version__ = "0.1.0"
