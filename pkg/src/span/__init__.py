"""Sparse rulebook compute engine and hierarchical SPAN models."""

__version__ = "0.1.0"

from .sparse import (  # noqa: F401
    Coord,
    DenseIndexGrid,
    Rect,
    SparseMap,
    align_rect,
    build_sparse_map,
    densify_index_grid,
    deserialize,
    patchify_rect,
    serialize,
)
from .conv import (  # noqa: F401
    ConvParams,
    ConvRulebook,
    ConvSpec,
    build_conv_rulebook,
    compute_output_coords,
    sac_forward,
    transpose_rulebook,
)
from .attention import (  # noqa: F401
    AttnParams,
    AttnRulebook,
    CarPair,
    CarParams,
    RpbTable,
    WindowSet,
    attention_forward,
    build_attention_rulebook,
    car_block_forward,
    generate_windows,
)
from .autodiff import ParamStore, Tape, Var, adam_step, backward, grad_check  # noqa: F401
from .losses import (  # noqa: F401
    LossSpec,
    ce_loss,
    dice_loss,
    discretize_survival,
    hybrid_loss,
    survival_nll_loss,
)
from .model import (  # noqa: F401
    EncoderOutput,
    ModelConfig,
    StageSpec,
    encoder_forward,
    forward_mil,
    forward_unet,
    init_params,
    load_checkpoint,
    mil_head,
    save_checkpoint,
    unet_decode,
)
