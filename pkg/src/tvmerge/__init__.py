"""Task-vector extraction and training-free checkpoint merging."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DowncastOverflowWarning,
    FormatError,
    IntegrityError,
    ProvenanceError,
    SchemaMismatchError,
    TvMergeError,
    UndefinedMetricError,
    ValidationError,
)
from .merge import (
    MergeConfig,
    MergeReport,
    derive_vector_seed,
    drop,
    elect_sign,
    keep_mask,
    merge,
    merge_average,
    merge_dare,
    merge_ta,
    merge_ties,
    trim,
)
from .metrics import EvalPair, bleu, cer, levenshtein
from .task_vector import (
    TaskVector,
    VectorStats,
    apply,
    cosine,
    extract,
    load_vector,
    save_vector,
    stats,
)
from .tensor_store import (
    ParameterSet,
    SchemaDiff,
    TensorMeta,
    load_checkpoint,
    save_checkpoint,
    schema_compare,
)
from .workbench import (
    ForgettingReport,
    QuadraticTask,
    ScalingRow,
    WorkbenchConfig,
    World,
    run_forgetting,
    run_scaling,
    synthesize,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DowncastOverflowWarning",
    "FormatError",
    "IntegrityError",
    "ProvenanceError",
    "SchemaMismatchError",
    "TvMergeError",
    "UndefinedMetricError",
    "ValidationError",
    "MergeConfig",
    "MergeReport",
    "derive_vector_seed",
    "drop",
    "elect_sign",
    "keep_mask",
    "merge",
    "merge_average",
    "merge_dare",
    "merge_ta",
    "merge_ties",
    "trim",
    "EvalPair",
    "bleu",
    "cer",
    "levenshtein",
    "TaskVector",
    "VectorStats",
    "apply",
    "cosine",
    "extract",
    "load_vector",
    "save_vector",
    "stats",
    "ParameterSet",
    "SchemaDiff",
    "TensorMeta",
    "load_checkpoint",
    "save_checkpoint",
    "schema_compare",
    "ForgettingReport",
    "QuadraticTask",
    "ScalingRow",
    "WorkbenchConfig",
    "World",
    "run_forgetting",
    "run_scaling",
    "synthesize",
]
