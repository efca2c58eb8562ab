"""Axis-projected attention segmentation for small targets in 3D volumes.

The package is organized bottom-up:

- ``tensor`` / ``convops``: a numpy reverse-mode autodiff substrate with the
  convolution, pooling and normalization operators everything else uses.
- ``blocks``: single-axis projected attention blocks (encoder, decoder, and
  the fully-2D / fully-3D reference variants) with selective-kernel fusion
  and learnable per-level axis weighting.
- ``network``: the U-shaped segmentation model and its checkpoint format.
- ``losses`` / ``metrics``: Dice + cross-entropy training objective, Dice /
  HD95 evaluation and size-stratified reporting.
- ``data``: volume container IO, synthetic small-target phantoms,
  foreground-oversampled patch sampling, flip augmentation, preprocessing.
- ``train`` / ``infer``: the SGD loop with warmup + cosine annealing, and
  sliding-window inference.
- ``gradcheck``: finite-difference verification of every operator and block.
"""

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    avg_pool3d,
    axis_pool,
    no_grad,
    norm_act,
    softmax,
)
from .convops import conv2d, conv3d, transpose_conv2d, transpose_conv3d
from .blocks import (
    AXES,
    AxisFusion,
    AttentionTrace,
    Cot2dBlock,
    Cot3dBlock,
    DecoderAttentionBlock,
    EncoderAttentionBlock,
    SKFusion,
    build_encoder_block,
    cot_variant_block,
    fuse_axes,
    project,
)
from .network import (
    ConfigError,
    NetworkConfig,
    ProjectionAttentionUNet,
    build_network,
    load_weights,
    param_count,
    restore_network,
    save_weights,
)
from .losses import ce_loss, dice_loss, one_hot, softmax_probs, total_loss
from .metrics import dice_score, hd95, size_bin, size_report
from .data import (
    PatchSpec,
    SyntheticSpec,
    VolumeRecord,
    load_volume,
    make_dataset,
    preprocess,
    random_flip,
    sample_batch,
    save_volume,
    synthesize_case,
)
from .train import SGD, TrainConfig, TrainingDiverged, cosine_lr, train
from .infer import evaluate, foreground_dice, sliding_window_infer
from .gradcheck import grad_check, gradcheck_suite, run_gradcheck

__version__ = "0.1.0"
