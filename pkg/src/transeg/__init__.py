"""Transductive semi-supervised segmentation on synthetic shifted tasks."""

from .calibration import (
    CalibrationReport,
    IGCurve,
    empirical_delta,
    entropy_bits,
    expected_ig,
    ig_curve,
    ig_zero_crossing,
    reliability,
    surrogate_entropy,
)
from .dataspace import (
    FoldSplit,
    LabeledSet,
    LabelGrid,
    NormalizationStats,
    SampleGrid,
    TargetSet,
    TaskSpec,
    generate_task,
    split_two_folds,
    zscore_fit_apply,
)
from .errors import ConfigurationError, DataFormatError, NumericError, TrainingDiverged
from .learner import (
    ClassifierSpec,
    Supervised,
    SupervisedPlusEntropyMin,
    SupervisedPlusPseudo,
    TrainConfig,
    entropy_loss,
    forward,
    gradient_check,
    init_params,
    supervised_loss,
    train,
)
from .selftrain import (
    Ensemble,
    PseudoLabelSet,
    confidence,
    ensemble_predict,
    make_pseudolabels,
    self_train_pipeline,
    train_ensemble,
)

__version__ = "0.1.0"
