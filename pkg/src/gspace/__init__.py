"""gspace: gradient-space data clustering, routing, and SGD diagnostics."""

from .core import (
    DegenerateDataError,
    DimensionMismatchError,
    GradientMatrix,
    GradientRecord,
    GspaceError,
    StreamFormatError,
    ZeroVectorError,
    cosine_similarity,
    normalize,
    unit_rows,
)
from .streams import (
    GradientStream,
    StreamHeader,
    batch_iter,
    read_header,
    read_matrix,
    read_stream,
    write_stream,
)
from .spectral import (
    CentroidSet,
    KMeansResult,
    SpectralReport,
    explained_variance,
    initial_centroids,
    kmeans,
    lift_centroids,
    project,
    select_k,
    silhouette,
    subspace_dim_for_threshold,
    thin_svd,
)
from .online import (
    ClusterCache,
    ConvergenceResult,
    OnlineState,
    Partition,
    assign_batch,
    cache_push,
    ema_update,
    final_assignment,
    refine_epoch,
    run_until_converged,
)
from .analysis import (
    FlopsModel,
    MixtureVarianceResult,
    VarianceReport,
    flops_estimate,
    gradient_variance,
    mixture_variance_check,
    purity,
    stationarity_ratio,
    tfidf_summarize,
    tokenize,
    total_variance_decomposition,
)
from .models import LinearRegression, LogisticModel, TwoLayerMLP, make_model
from .sim import (
    CorrelationResult,
    ExpertVsSharedReport,
    SimConfig,
    SimDataset,
    TrainTrajectory,
    discover_partition,
    embedding_vs_gradient_correlation,
    expert_vs_shared_experiment,
    fourmode_fixture,
    gen_mixture,
    gradient_records,
    heterogeneous_fixture,
    homogeneous_fixture,
    negative_control_fixture,
    per_example_gradient,
    random_partition,
    router_ordering_fixture,
    router_separable_fixture,
    sample_directions,
    sgd_train,
    warmup_train,
)
from .pipeline import (
    RouterBundle,
    build_router_bundle,
    evaluate_router_bundle,
    run_analyze,
    run_cluster,
    run_estimate_k,
    run_simulate,
    validation_matrix,
)
from .router import (
    RouterModel,
    RoutingEval,
    baseline_es,
    baseline_gs,
    baseline_ks,
    evaluate_routers,
    route,
    softmax,
    train_router,
)

__version__ = "0.1.0"
