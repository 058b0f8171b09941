"""Conv-4 feature extractor, global average pooling, per-level adjusters and fusion."""

from typing import Dict, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn

LEVELS = ("image", "object", "global")
# 2x2 max-pool after the first two blocks: 84 -> 42 -> 21
POOL_AFTER = (True, True, False, False)


def conv_block(in_channels, out_channels, pool=False):
    layers = [
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Conv4(nn.Module):
    """Four 3x3/64-filter conv blocks (conv, batch norm, ReLU)."""

    def __init__(self, in_channels=3, width=64):
        super().__init__()
        self.width = width
        chans = [in_channels] + [width] * 4
        self.blocks = nn.Sequential(
            *[conv_block(chans[i], chans[i + 1], POOL_AFTER[i]) for i in range(4)]
        )

    def forward(self, x):
        return self.blocks(x)

    @staticmethod
    def output_size(size: int) -> int:
        for pooled in POOL_AFTER:
            if pooled:
                size //= 2
        return size


def encode(encoder: Conv4, images: torch.Tensor) -> torch.Tensor:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected a batch of 3-channel images, got shape {tuple(images.shape)}")
    return encoder(images)


def gap(feature_map: torch.Tensor) -> torch.Tensor:
    """Per-channel mean over all spatial positions (works on C×H×W or N×C×H×W)."""
    if feature_map.dim() < 3 or feature_map.shape[-1] < 1 or feature_map.shape[-2] < 1:
        raise ValueError(f"gap needs a map with H, W >= 1, got {tuple(feature_map.shape)}")
    return feature_map.mean(dim=(-2, -1))


class MapAdjuster(nn.Module):
    """Two conv blocks followed by a fully connected layer to ``dim``."""

    def __init__(self, in_channels, map_size, dim=64, width=64):
        super().__init__()
        self.in_channels = in_channels
        self.map_size = map_size
        self.convs = nn.Sequential(
            conv_block(in_channels, width, pool=True),
            conv_block(width, width, pool=True),
        )
        reduced = map_size // 4
        if reduced < 1:
            raise ValueError(f"feature map of size {map_size} too small for two 2x2 poolings")
        self.fc = nn.Linear(width * reduced * reduced, dim)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1:] != (self.in_channels, self.map_size, self.map_size):
            raise ValueError(
                f"adjuster expects N×{self.in_channels}×{self.map_size}×{self.map_size}, "
                f"got {tuple(x.shape)}"
            )
        return self.fc(self.convs(x).flatten(1))


class VectorAdjuster(nn.Module):
    """Fully connected layer only; two conv blocks are undefined on a vector."""

    def __init__(self, in_features=64, dim=64):
        super().__init__()
        self.in_features = in_features
        self.fc = nn.Linear(in_features, dim)

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"adjuster expects N×{self.in_features}, got {tuple(x.shape)}")
        return self.fc(x)


def make_adjusters(map_size, dim=64, width=64, levels: Sequence[str] = LEVELS) -> nn.ModuleDict:
    mods = {}
    for level in levels:
        if level == "global":
            mods[level] = VectorAdjuster(width, dim)
        elif level in ("image", "object"):
            mods[level] = MapAdjuster(width, map_size, dim, width)
        else:
            raise ValueError(f"unknown level {level!r}")
    return nn.ModuleDict(mods)


def adjust(level: str, adjusters: nn.ModuleDict, x: torch.Tensor) -> torch.Tensor:
    if level not in adjusters:
        raise ValueError(f"no adjuster for level {level!r}")
    expect_map = level in ("image", "object")
    if expect_map != (x.dim() == 4):
        raise ValueError(f"level {level!r} got input of shape {tuple(x.shape)}")
    return adjusters[level](x)


def fuse(i_vec: torch.Tensor, o_vec: torch.Tensor, g_vec: torch.Tensor) -> torch.Tensor:
    """Element-sum of the three level vectors.

    Per element the three values are added smallest first, so the rounding
    does not depend on argument order and the sum is exactly commutative.
    """
    if not (i_vec.shape == o_vec.shape == g_vec.shape):
        raise ValueError(
            f"fuse needs equal shapes, got {tuple(i_vec.shape)}, {tuple(o_vec.shape)}, "
            f"{tuple(g_vec.shape)}"
        )
    ordered, _ = torch.sort(torch.stack([i_vec, o_vec, g_vec]), dim=0)
    return ordered[0] + ordered[1] + ordered[2]


class LevelFeatures(NamedTuple):
    image_map: torch.Tensor
    object_map: Optional[torch.Tensor]
    global_vec: torch.Tensor


def encode_all_levels(
    encoder: Conv4,
    adjusters: nn.ModuleDict,
    image: torch.Tensor,
    object_crop: Optional[torch.Tensor],
    levels: Sequence[str] = LEVELS,
    object_encoder: Optional[Conv4] = None,
) -> torch.Tensor:
    """Fused vector(s) for a batch of images and their object crops.

    Levels left out of ``levels`` contribute a zero vector, so an image-only
    run returns exactly ``adjust("image", I)``.
    """
    feats = level_features(encoder, image, object_crop if "object" in levels else None,
                           object_encoder)
    i_vec = adjust("image", adjusters, feats.image_map)
    zeros = torch.zeros_like(i_vec)
    o_vec = adjust("object", adjusters, feats.object_map) if "object" in levels else zeros
    g_vec = adjust("global", adjusters, feats.global_vec) if "global" in levels else zeros
    return fuse(i_vec, o_vec, g_vec)


def level_features(encoder, image, object_crop=None, object_encoder=None) -> LevelFeatures:
    image_map = encode(encoder, image)
    object_map = None
    if object_crop is not None:
        object_map = encode(object_encoder or encoder, object_crop)
    return LevelFeatures(image_map, object_map, gap(image_map))


class MultiLevelEncoder(nn.Module):
    """F_phi plus the per-level adjusters; produces one fused vector per image."""

    def __init__(self, dim=64, image_size=84, levels: Sequence[str] = LEVELS,
                 share_encoder=True, width=64):
        super().__init__()
        if "image" not in levels:
            raise ValueError("the image level is always required")
        self.levels = tuple(levels)
        self.dim = dim
        self.map_size = Conv4.output_size(image_size)
        self.encoder = Conv4(3, width)
        self.object_encoder = None
        if "object" in self.levels and not share_encoder:
            self.object_encoder = Conv4(3, width)
        self.adjusters = make_adjusters(self.map_size, dim, width, self.levels)

    def forward(self, images, crops=None):
        if "object" in self.levels and crops is None:
            raise ValueError("object level enabled but no crops given")
        return encode_all_levels(self.encoder, self.adjusters, images, crops, self.levels,
                                 self.object_encoder)


def adjuster_outputs(model: MultiLevelEncoder, images, crops=None) -> Dict[str, torch.Tensor]:
    """Per-level adjusted vectors, before fusion (diagnostics and tests)."""
    feats = level_features(model.encoder, images, crops, model.object_encoder)
    out = {"image": adjust("image", model.adjusters, feats.image_map)}
    if "global" in model.levels:
        out["global"] = adjust("global", model.adjusters, feats.global_vec)
    if "object" in model.levels and crops is not None:
        out["object"] = adjust("object", model.adjusters, feats.object_map)
    return out
