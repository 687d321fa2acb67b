"""Recursive vision transformers with sliced group self-attention.

Weight sharing across depth (a block applied N times in sequence), grouped
self-attention that costs 1/G of the global core on a shuffled token
sequence, learnable residual gains, and non-shared projection layers between
recursions -- plus an exact parameter/MAC accounting engine and a desk-scale
training harness with soft distillation.
"""

from .accounting import (
    CostReport,
    attention_core_cost,
    count_macs,
    count_params,
    verify_theorem1,
)
from .attention import (
    AttentionParams,
    invert_permutation,
    make_permutation,
    sliced_group_mhsa,
    vanilla_mhsa,
)
from .blocks import (
    BlockParams,
    FFNParams,
    MixerBlockParams,
    NLLParams,
    RecursiveBlockSpec,
    ResidualGains,
    block_forward,
    external_loop_forward,
    ffn_forward,
    mixer_block_forward,
    nll_forward,
    recursive_block_forward,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .configfile import config_digest, emit_config, parse_config
from .model import (
    GroupSchedule,
    MixedDepthModel,
    ModelConfig,
    SReTModel,
    build_mixed_depth,
    build_model,
    preset,
)
from .tensor import (
    ConfigError,
    ContractError,
    NumericError,
    PermutationError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    conv2d_grouped,
    gather_rows,
    gelu,
    global_avg_pool,
    grad_check_finite_diff,
    layer_norm,
    matmul,
    softmax_lastdim,
)
from .train import (
    AdamW,
    SynthDataset,
    TrainSettings,
    landscape_slice,
    lr_schedule,
    smoothed_ce_loss,
    soft_distill_loss,
    train_loop,
)

__version__ = "0.1.0"
