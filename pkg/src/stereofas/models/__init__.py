"""Network components: feature extractor, matching transformer, disparity head."""

from .disparity import (
    DisparityRefiner,
    attention_to_raw_disparity,
    minmax_normalize,
    refine_disparity,
    upscale_disparity,
    window_coefficients,
)
from .dma import ConfigError, DMABlock, DmaConfig, DMATransformer, MultiScaleAttention, TokenDown, TokenUp
from .features import FeatureExtractor, ResBlock, patch_merge, sinusoidal_encoding
