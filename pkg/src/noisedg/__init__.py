"""Desk-scale laboratory for label noise versus spurious correlations in
linear multi-environment classification."""

__version__ = "0.1.0"

from .datagen import (  # noqa: F401
    EnvironmentSpec,
    FeatureSpec,
    LabeledDataset,
    ProjectionMatrix,
    apply_projection,
    apply_random_projection,
    export_dataset,
    group_counts,
    import_dataset,
    inject_label_noise,
    make_cmnist_analogue,
    random_orthogonal,
    derive_seed,
    sample_environment,
    sample_population,
    sample_test_environment,
)
from .errors import (  # noqa: F401
    ConfigError,
    NoFlippedLabelsError,
    NonSeparableError,
    TrainingDivergedError,
)
from .model import (  # noqa: F401
    BlockedLinearModel,
    BlockMask,
    load_model,
    logistic_loss,
    loss_gradient,
    predict_logits,
    save_model,
    zero_one_error,
)
from .objectives import (  # noqa: F401
    EnvRiskVector,
    MixupBatch,
    ObjectiveConfig,
    groupdro_step,
    irm_coefficient,
    irmv1_objective_and_gradient,
    mixup_objective_and_gradient,
    mixup_pairs,
    vrex_env_coefficients,
    vrex_objective_and_gradient,
)
from .trainer import TrainConfig, TrainHistory, fit_restricted, train  # noqa: F401
from .analysis import (  # noqa: F401
    GapReport,
    GroupErrorReport,
    NormDecomposition,
    estimate_memorization_cost,
    expected_gradient_coeffs,
    group_errors,
    invariant_risk,
    max_margin_direction,
    max_margin_direction_by_enumeration,
    memorization_accuracy,
    memorization_counts,
    norm_decomposition,
    spurious_risk,
    theorem_gap_check,
)
from .experiments import (  # noqa: F401
    ExperimentConfig,
    SweepResult,
    run_experiment,
)
