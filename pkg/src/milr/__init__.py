"""Multiple-instance logistic regression fitted by EM, with LASSO selection."""

from .dataset import (
    Bag,
    BagDataset,
    CsvSchema,
    DataError,
    FoldAssignment,
    StandardizationStats,
    load_csv,
    standardize,
    stratified_kfold,
    write_csv,
)
from .em import (
    FitConfig,
    FitError,
    FitResult,
    LambdaPath,
    fit_milr,
    fit_path,
    gamma,
    kkt_check,
    lambda_grid,
    lambda_max,
    soft_threshold_update,
    working_quantities,
)
from .model import (
    Coefficients,
    Metrics,
    accuracy,
    auc,
    bag_prob,
    bag_probs,
    deviance,
    instance_prob,
    log_likelihood,
    predict,
    predict_bag,
    softmax_bag_score,
    softmax_scores,
)

__version__ = "0.1.0"
