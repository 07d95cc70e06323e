"""Design-aware distributional random forests for complex survey samples.

Estimates full conditional laws P(Y | X = x) from probability samples with
unequal inclusion probabilities, via a design-respecting pseudo-population
bootstrap, PSU-level honest trees, and an MMD split criterion on kernel mean
embeddings of design-weighted node distributions. Plug-in functionals (means,
quantiles, covariances, tolerance regions) and a simulation benchmark round
out the package.
"""

from .kernels import (
    DegenerateSample,
    DimensionMismatch,
    FeatureMean,
    KernelSpec,
    UnnormalizedInput,
    WeightedDistribution,
    ZeroDim,
    kernel_eval,
    median_heuristic,
    mmd2_exact,
    mmd2_rff,
    rff_feature_matrix,
    rff_features,
)
from .survey import (
    DesignDiagnostics,
    EmptyRegion,
    EmptySelection,
    FinitePopulation,
    IncompatibleDesign,
    InvalidWeights,
    PoissonDesign,
    PpsSystematicDesign,
    SchemaError,
    SrsworDesign,
    SurveySample,
    TwoStageDesign,
    design_diagnostics,
    draw_sample,
    hajek_distribution,
    pps_inclusion_probs,
    psu_codes,
    read_sample_csv,
    ups_systematic,
    write_sample_csv,
)
from .bootstrap import (
    BootstrapConfig,
    DegenerateDraw,
    MismatchedDraws,
    PseudoPopulation,
    ResampleDraw,
    average_multipliers,
    build_pseudo_population,
    draw_multipliers,
    iid_multipliers,
)
from .forest import (
    EmptySplitSide,
    FittedTree,
    Forest,
    ForestConfig,
    HonestyPartition,
    InvalidSplit,
    NoSupport,
    TooFewPSUs,
    TreeNode,
    audit_forest,
    best_split,
    fit_forest,
    fit_tree,
    forest_weights,
    forest_weights_batch,
    honesty_partition,
    load_forest,
    predict_distribution,
    save_forest,
    split_score,
)
from .functionals import (
    ConditionalSummary,
    DegenerateSupportWarning,
    SingularCovariance,
    ToleranceRegion,
    cond_cdf,
    cond_cov,
    cond_mean,
    cond_quantile,
    conditional_summary,
    export_tolerance_report,
    mahalanobis_score,
    mmd_to_reference,
    tolerance_contains,
    tolerance_threshold,
    weighted_quantile,
)
from .simbench import (
    MetricsReport,
    SimConfig,
    TrueConditional,
    apply_survey,
    generate_population,
    make_baseline_sample,
    measure_of_size,
    regression_means,
    run_experiment,
    true_conditional,
)

__version__ = "0.1.0"
