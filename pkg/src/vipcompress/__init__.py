"""VIP-token centric sequence compression for Transformer encoders.

A handful of designated rows (the VIP tokens) steer a multi-resolution
compression of everything else: segments the VIP tokens attend to hardest
stay fine, the rest collapse into averages. A delta-encoded averaging tree
lets each layer read and write just the selected segments, so per-layer cost
scales with the compressed size instead of the sequence length. Dense
brute-force oracles verify the algebra at small scale.
"""

from .components import (
    Component,
    ComponentSet,
    CompressionPlan,
    InfeasibleBudgetError,
    SelectionBudget,
    build_plan,
    component_vector,
    dense_S,
    dense_S_pinv,
    dump_components,
    fixed_split_schedule,
    parse_components,
    score_components,
    segment_mean,
    select_components,
)
from .dense import NonFiniteError, Rng, ShapeError, elementwise_exp, matmul, weighted_softmax_rows
from .layer import (
    LayerConfig,
    LayerWeights,
    ffn,
    gamma,
    layer_forward,
    load_weights,
    mha,
    save_weights,
    simplified_attention,
)
from .layout import PartitionedSequence, VipLayout, padded_length, reorder, restore
from .model import (
    ConfigError,
    EncoderOutput,
    LayerDiagnostics,
    ModelConfig,
    compressed_layer_forward,
    encoder_forward,
    load_model_config,
)
from .oracle import (
    DenseCompressed,
    build_dense_compressed,
    dense_compressed_layer,
    error_decomposition,
    hat_approximation,
)
from .tree import (
    SeqTree,
    apply_update,
    build_tree,
    load_tree,
    materialize,
    retrieve,
    retrieve_many,
    save_tree,
)

__version__ = "0.1.0"
