"""Structural plans: which blocks exist, where they fuse, downsample and exit.

Plans carry no parameters; :mod:`ranet.network` turns them into layers.
Sub-networks and blocks are numbered from 1.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import fusion_split, validate_config
from .errors import ConfigError

DENSE = "dense"
FUSION_KEEP = "fusion-keep"
FUSION_DOWN = "fusion-down"


@dataclass(frozen=True)
class BaseFeaturePlan:
    """One output of the initial layer.

    ``conv`` is 'regular' for the stem and for a repeated scale, 'strided'
    when the scale drops by one relative to the previous base feature.
    """

    subnet: int
    scale: int
    resolution: tuple
    in_channels: int
    out_channels: int
    conv: str
    source: object  # "image" or the sub-network whose base feature is consumed


@dataclass(frozen=True)
class BlockPlan:
    subnet: int
    index: int
    kind: str
    layers: int
    in_scale: int
    out_scale: int
    fusion_source: tuple | None
    transition_after: bool
    classifier_after: bool

    def layer_scale(self, i):
        """Scale of the state produced by layer ``i`` (1-based) of this block."""
        if self.kind == FUSION_DOWN and i == self.layers:
            return self.in_scale - 1
        return self.in_scale


@dataclass(frozen=True)
class FusionLayerPlan:
    """Channel split and source transform for one dense layer of a fusion block.

    ``source_transform`` is 'regular' (same scale), 'up' (Regular-Conv then
    2x bilinear upsampling) or 'strided' (source one scale finer than the
    target; never produced by valid configs but supported).
    """

    kind: str
    current_channels: int
    source_channels: int
    current_out: int
    source_out: int
    source_transform: str

    @property
    def out_channels(self):
        return self.current_channels + self.current_out + self.source_out


def plan_initial_layer(cfg):
    """Base features in execution order, largest scale (Sub-network H) first."""
    vc = validate_config(cfg)
    cfg = vc.config
    H = cfg.base_features
    plans = []
    for h in range(H, 0, -1):
        scale = cfg.scale_of_base[h - 1]
        if h == H:
            conv, source, c_in = "regular", "image", cfg.input_channels
        else:
            prev_scale = cfg.scale_of_base[h]
            conv = "strided" if scale < prev_scale else "regular"
            source, c_in = h + 1, cfg.base_channels[h]
        plans.append(BaseFeaturePlan(h, scale, cfg.resolution(scale), c_in, cfg.base_channels[h - 1], conv, source))
    return plans


def plan_subnetwork(cfg, h):
    """Block plans for Sub-network ``h``.

    The first b_{h-1} blocks fuse features from Sub-network h-1; the rest
    are plain dense blocks. Downsampling fusion blocks sit at b_{h-1},
    b_{h-2}, ... so the sub-network ends at scale 1.
    """
    vc = validate_config(cfg)
    cfg = vc.config
    if not 1 <= h <= cfg.base_features:
        raise ConfigError(f"sub-network index {h} outside [1, {cfg.base_features}]")
    n_blocks = cfg.blocks[h - 1]
    n_fusion = cfg.blocks[h - 2] if h > 1 else 0
    downs = set(vc.downsample_blocks[h - 1])
    classifiers = set(vc.classifier_blocks[h - 1])
    transitions = set(vc.transition_blocks[h - 1])
    scale = cfg.scale_of_base[h - 1]
    plans = []
    for j in range(1, n_blocks + 1):
        if j <= n_fusion:
            kind = FUSION_DOWN if j in downs else FUSION_KEEP
            source = (h - 1, j)
        else:
            kind, source = DENSE, None
        out_scale = scale - 1 if kind == FUSION_DOWN else scale
        plans.append(
            BlockPlan(h, j, kind, cfg.step_mode.layers(j), scale, out_scale, source, j in transitions, j in classifiers)
        )
        scale = out_scale
    if scale != 1:
        raise ConfigError(f"sub-network {h} ends at scale {scale}, classifiers need scale 1")
    return plans


def plan_network(cfg):
    return [plan_subnetwork(cfg, h) for h in range(1, cfg.base_features + 1)]


def plan_fusion_layer(kind, current_channels, source_channels, growth, compression, scale_gap=1):
    """Channel split for one fusion layer.

    ``scale_gap`` is target scale minus source scale: 1 means the source is
    coarser and goes through Up-Conv, 0 means same scale and Regular-Conv.
    """
    if not 0.0 < compression < 1.0:
        raise ConfigError(f"fusion compression must lie in (0, 1), got {compression}")
    if kind not in ("keep", "down"):
        raise ConfigError(f"fusion kind must be 'keep' or 'down', got {kind!r}")
    transforms = {1: "up", 0: "regular", -1: "strided"}
    if scale_gap not in transforms:
        raise ConfigError(f"fusion source is {scale_gap} scales away from its target; only -1, 0, 1 are supported")
    cur, src = fusion_split(growth, compression)
    return FusionLayerPlan(kind, current_channels, source_channels, cur, src, transforms[scale_gap])
