"""voxworld: semantic occupancy rendering, coding, and forecasting.

A desk-scale numpy pipeline in three stages: voxel-anchored Gaussian splats
rendered to depth/semantic views with analytic gradients, a dual-codebook
vector-quantized occupancy codec that codes air and non-air voxels
separately, and an autoregressive masked-temporal-attention world model for
occupancy forecasting and ego motion. Every backward pass is hand-written
and verified against finite differences (see voxworld.gradcheck).
"""

from .amvae import (
    AmvaeConfig,
    AmvaeModel,
    Codebook,
    decode,
    decode_scene_tokens,
    encode,
    encode_scene,
    quantize,
    train_amvae,
    vae_loss,
)
from .errors import VoxworldError
from .geometry import (
    CameraModel,
    Rotation,
    ScaleVector,
    build_covariance,
    project_covariance,
    projection_jacobian,
)
from .img2occ import Img2OccConfig, train_img2occ
from .losses import DepthPair, img2occ_loss, pearson_depth_loss, semantic_ce_loss
from .metrics import (
    EvalReport,
    binary_iou,
    collision_rate,
    copy_paste_baseline,
    evaluate_forecast,
    l2_trajectory,
    miou,
)
from .occupancy import (
    SemanticVoxelGrid,
    indicator,
    load_grid,
    recombine,
    save_grid,
    split_air,
)
from .splat import (
    GaussianSet,
    RenderedView,
    RenderGradients,
    anchor_init,
    argmax_occupancy,
    rasterize,
    rasterize_backward,
)
from .synthetic import (
    SceneConfig,
    SceneSequence,
    generate_rig,
    generate_sequence,
    load_sequence,
    project_ground_truth,
    save_sequence,
)
from .worldmodel import (
    EgoToken,
    SceneTokens,
    WorldModel,
    WorldModelConfig,
    forecast,
    lovasz_softmax,
    stage1_train,
    stage2_train,
    temporal_attention_step,
    tokenize_scene,
)

__version__ = "0.1.0"

__all__ = [
    "AmvaeConfig", "AmvaeModel", "Codebook", "CameraModel", "DepthPair",
    "EgoToken", "EvalReport", "GaussianSet", "Img2OccConfig", "RenderedView",
    "RenderGradients", "Rotation", "ScaleVector", "SceneConfig",
    "SceneSequence", "SceneTokens", "SemanticVoxelGrid", "VoxworldError",
    "WorldModel", "WorldModelConfig", "anchor_init", "argmax_occupancy",
    "binary_iou", "build_covariance", "collision_rate", "copy_paste_baseline",
    "decode", "decode_scene_tokens", "encode", "encode_scene",
    "evaluate_forecast", "forecast", "generate_rig", "generate_sequence",
    "img2occ_loss", "indicator", "l2_trajectory", "load_grid", "load_sequence",
    "lovasz_softmax", "miou", "pearson_depth_loss", "project_covariance",
    "project_ground_truth", "projection_jacobian", "quantize", "rasterize",
    "rasterize_backward", "recombine", "save_grid", "save_sequence",
    "semantic_ce_loss", "split_air", "stage1_train", "stage2_train",
    "temporal_attention_step", "tokenize_scene", "train_amvae", "train_img2occ",
    "vae_loss",
]
