# Core numerical library exports
from .errors import (
    SpyGRError,
    ShapeError,
    NonFiniteError,
    OracleSizeError,
    ConfigError,
    TrainingDivergedError,
    SerializationError,
    LabelRangeError,
)
from .tensor import DType, Tensor, Tape, backward
from .counter import MacCounter
from .gradcheck import GradCheckResult, gradcheck
from .serialization import decode_tensor, encode_tensor, load_tensor, save_tensor
from .layer import (
    AttentionMode,
    LaplacianPath,
    SpyGRParams,
    SimilarityFactors,
    embed_phi,
    channel_attention,
    build_factors,
    degrees_factored,
    similarity_row,
    materialize_similarity,
    apply_laplacian,
    apply_laplacian_factored,
    apply_laplacian_naive,
    graph_reason,
    simplest_gcn,
    save_params,
    load_params,
)
from .pyramid import (
    PyramidConfig,
    downsample,
    upsample,
    spygr_pyramid,
    max_levels,
    save_pyramid,
    load_pyramid,
)
from .costmodel import (
    CostReport,
    flops_graph_reason,
    flops_pyramid,
    memory_estimate,
    count_macs,
)
