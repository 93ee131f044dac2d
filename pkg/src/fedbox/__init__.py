"""Desk-scale federated learning sandbox.

Weighted federated averaging with partial (backbone-only) parameter sharing
between heterogeneous clients, a synchronous round-based server/client
protocol with a byte-exact wire format, a toy grid detector trained with
Adam on a multi-task loss, deterministic synthetic datasets, and IoU-based
detection metrics.
"""

from .aggregation import (
    SHARE_ALL,
    AggregationPlan,
    ClientWeight,
    FilterRule,
    apply_global,
    fedavg,
    filter_shared,
)
from .data import (
    ClientProfile,
    DetectionSample,
    SplitDataset,
    default_profiles,
    generate,
    intensity_histogram,
    ks_distance,
    load_dataset,
    save_dataset,
)
from .detector import (
    ToyDetectorConfig,
    ToyTrainer,
    decode_predictions,
    encode_targets,
    forward,
    init_params,
    loss,
    loss_and_grads,
    predict,
)
from .errors import (
    ConfigError,
    DegenerateBoxError,
    FederationError,
    FedboxError,
    SchemaMismatchError,
    UnknownClientError,
    WireFormatError,
    ZeroWeightError,
)
from .metrics import (
    MatchResult,
    MetricsReport,
    Prediction,
    best_round_per_client,
    compute_metrics,
    iou,
    match,
    metrics_from_counts,
    select_best_round,
)
from .params import (
    ROLE_STATISTIC,
    ROLE_TRAINABLE,
    NamedParameterSet,
    diff_names,
)
from .protocol import (
    FederatedClient,
    FederationResult,
    RoundSchedule,
    epochs_for,
    run_federation,
)
from .wire import (
    Done,
    GlobalUpdate,
    InitModel,
    Metrics,
    TrainRequest,
    WeightUpdate,
    decode_message,
    deserialize_params,
    encode_message,
    serialize_params,
)

__version__ = "0.1.0"
