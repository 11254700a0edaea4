"""Learned volumetric attribute compression for voxelized point clouds.

The pipeline: a binary space partition over occupied voxels, a hierarchical
mean/difference transform with geometry-dependent normalization, per-channel
quantization, a learned factorized entropy model for training-time rate, an
adaptive run-length Golomb-Rice coder for the actual bitstream, and tiny
coordinate-based networks that decode per-block latents into attributes.
Latents are optimized directly against a rate-distortion Lagrangian in an
auto-decoder loop.
"""

from .cbn import CbnParams, CbnSpec, param_count
from .codec import (
    Bitstream,
    DecodedModel,
    SideInfoPolicy,
    decode,
    encode,
    query,
    raht_baseline_decode,
    raht_baseline_encode,
    reconstruct_cloud,
)
from .entmodel import FactorizedCdf, rate_bits
from .metrics import RdPoint, bd_rate, convex_hull, psnr_rgb
from .partition import PartitionTree, block_of, build_tree, path_to_root
from .pcio import (
    VoxelizedPointCloud,
    load_ply,
    morton_keys,
    rgb_to_yuv_bt709,
    save_ply,
    synthesize_cloud,
    yuv_to_rgb_bt709,
)
from .quant import dequantize, noise_proxy, quantize, round_half_away
from .raht import CoefficientSet, analyze, dense_transforms, scale_factors, synthesize
from .rlgr import BitSink, BitSource, rlgr_decode, rlgr_encode, unzigzag, zigzag
from .trainer import TrainConfig, TrainState, gradients, init_state, loss, train

__version__ = "0.1.0"
