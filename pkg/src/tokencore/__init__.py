"""Core-set token selection for encoder stacks.

Public surface: the selector library, length schedules, the toy
trainable encoder with pluggable mid-layer token reduction, the
measurement/analysis routines, and the experiment harness.
"""

from .errors import (
    InvalidArgumentError,
    InvariantViolationError,
    SizeLimitError,
    StateError,
    TrainingFailureError,
)
from .selectors import (
    COSINE,
    EUCLIDEAN,
    EmbeddingMatrix,
    SelectionResult,
    SelectorKind,
    attention_select,
    average_pool,
    cover_radius,
    kcenter_exact,
    kcenter_greedy_batch,
    pairwise_distances,
    parse_selector,
    select_first_k,
    select_random,
)
from .schedule import (
    LengthSchedule,
    full_retention_schedule,
    generate_random_schedule,
    generate_reference_suite,
    generate_schedule,
    input_truncation_schedule,
    pooling_schedule,
)
from .encoder import (
    AFTER_ATTENTION,
    END_OF_ENCODER,
    EncoderStack,
    ForwardTrace,
    Gradients,
    PipelineConfig,
    TokenMultiplicity,
    backward,
    count_flops,
    forward,
    forward_from_ids,
    forward_replace,
    init_stack,
    weighted_attention,
)
from .analysis import (
    importance_ablation,
    mutual_information,
    pareto_at,
    pareto_front,
    redundancy_report,
    selection_loss,
    space_reduction,
    speedup,
)
from .harness import (
    Dataset,
    RunRecord,
    StackConfig,
    SyntheticTask,
    TrainConfig,
    evaluate,
    finetune,
    make_all_duplicate_embeddings,
    make_dataset,
    sweep,
)

__version__ = "0.1.0"
