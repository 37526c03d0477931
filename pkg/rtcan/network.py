"""RT-CAN network: two residual encoder streams, RGB-assisted cross attention (RCA)
fusion at each of the five stages, global textural attention (GTA) and a cascaded
decoder with two aggregation heads whose logits are averaged.

Ablation schemes for the fusion block:
    A  T ⊙ sigmoid(Conv1×1([T, R])), then channel + spatial attention
    B  Conv1×1([T, R])
    C  T ⊙ sigmoid(Conv1×1([T, R]))
"""

from __future__ import annotations

import logging
from typing import Literal, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models as tv_models

from .errors import ModelConfigError, ShapeError
from .models import ModelConfig, SchemeVariant

logger = logging.getLogger(__name__)

STAGE_CHANNELS = (64, 256, 512, 1024, 2048)
STAGE_STRIDES = (2, 4, 8, 16, 32)
INPUT_MULTIPLE = 32

_BACKBONES = {
    50: (tv_models.resnet50, tv_models.ResNet50_Weights.IMAGENET1K_V1),
    152: (tv_models.resnet152, tv_models.ResNet152_Weights.IMAGENET1K_V1),
}

Stream = Literal["rgb", "thermal"]
# five stage maps at strides 2, 4, 8, 16, 32
FeaturePyramid = tuple[torch.Tensor, ...]


class Prediction(NamedTuple):
    logits_deep: torch.Tensor
    logits_shallow: torch.Tensor
    logits_final: torch.Tensor

    @classmethod
    def from_heads(cls, logits_deep: torch.Tensor, logits_shallow: torch.Tensor) -> "Prediction":
        return cls(logits_deep, logits_shallow, (logits_deep + logits_shallow) / 2)


def conv_bn_relu(in_channels: int, out_channels: int, kernel_size: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def check_input_size(h: int, w: int) -> None:
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE or h == 0 or w == 0:
        raise ShapeError(f"input size {h}×{w} must be a positive multiple of {INPUT_MULTIPLE}")


# --- Attention ---

class ChannelAttention(nn.Module):
    """Per-channel gate in (0, 1) from global average and max pooled statistics."""

    def __init__(self, channels: int, reduction: int = 16) -> None:
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """Per-location gate in (0, 1) from a convolution over channel mean and max."""

    def __init__(self, kernel_size: int = 7) -> None:
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(stats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


def attention_block(
    channels: int,
    order: Literal["channel_first", "spatial_first"] = "channel_first",
    reduction: int = 16,
    spatial_kernel_size: int = 7,
) -> nn.Sequential:
    ca = ChannelAttention(channels, reduction)
    sa = SpatialAttention(spatial_kernel_size)
    return nn.Sequential(ca, sa) if order == "channel_first" else nn.Sequential(sa, ca)


# --- Fusion ---

class RCAModule(nn.Module):
    """RGB-assisted cross attention: RGB features steer a gate on the thermal features."""

    def __init__(
        self,
        channels: int,
        scheme: SchemeVariant = "A",
        order: Literal["channel_first", "spatial_first"] = "channel_first",
        reduction: int = 16,
        spatial_kernel_size: int = 7,
    ) -> None:
        super().__init__()
        self.scheme = scheme
        # gate logits for A/C, the fusion projection itself for B
        self.conv = nn.Conv2d(2 * channels, channels, 1)
        if scheme == "A":
            self.attention: nn.Module = attention_block(channels, order, reduction, spatial_kernel_size)
        else:
            self.attention = nn.Identity()

    def gate(self, t: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        """sigmoid(Conv1×1([T, R])). Strictly inside (0, 1) only up to float precision:
        float32 rounds to exactly 1 once the logit passes about 17 (float64: about 37)."""
        return torch.sigmoid(self.conv(torch.cat([t, r], dim=1)))

    def forward(self, t: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        if t.shape != r.shape:
            raise ShapeError(f"thermal feature {tuple(t.shape)} and rgb feature {tuple(r.shape)} differ")
        if self.scheme == "B":
            return self.conv(torch.cat([t, r], dim=1))
        return self.attention(t * self.gate(t, r))


class GTAModule(nn.Module):
    """Global textural attention: parallel multi-kernel convolutions (plus an optional
    global-average branch), concatenated, reduced back to the input width and rescaled
    by channel self-attention."""

    def __init__(
        self,
        channels: int,
        kernel_sizes: Sequence[int] = (1, 3, 5),
        branch_channels: int = 256,
        global_branch: bool = True,
        reduction: int = 16,
    ) -> None:
        super().__init__()
        if not kernel_sizes:
            raise ModelConfigError("gta_kernel_sizes must not be empty")
        for k in kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ModelConfigError(f"gta kernel size {k} must be a positive odd integer")
        width = min(channels, branch_channels)
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, width, k, padding=k // 2, bias=False) for k in kernel_sizes
        )
        self.global_branch = nn.Conv2d(channels, width, 1, bias=False) if global_branch else None
        n_branches = len(kernel_sizes) + (1 if global_branch else 0)
        self.reduce = nn.Conv2d(n_branches * width, channels, 1, bias=False)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [branch(x) for branch in self.branches]
        if self.global_branch is not None:
            g = self.global_branch(F.adaptive_avg_pool2d(x, 1))
            outs.append(g.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.attention(self.reduce(torch.cat(outs, dim=1)))


# --- Encoder ---

class ResidualEncoder(nn.Module):
    """ResNet trunk cut into five stages (stem, layer1..layer4)."""

    def __init__(self, depth: int, in_channels: int, pretrained: bool) -> None:
        super().__init__()
        if depth not in _BACKBONES:
            raise ModelConfigError(f"unsupported backbone depth {depth}; expected one of {sorted(_BACKBONES)}")
        builder, weights = _BACKBONES[depth]
        net = builder(weights=weights if pretrained else None)
        if in_channels != 3:
            conv = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            if pretrained:
                with torch.no_grad():
                    summed = net.conv1.weight.sum(dim=1, keepdim=True)
                    conv.weight.copy_(summed.expand(-1, in_channels, -1, -1) / in_channels)
            else:
                nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
            net.conv1 = conv
        self.in_channels = in_channels
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        s1 = self.stem(x)
        feats = [s1]
        y = self.pool(s1)
        for layer in self.layers:
            y = layer(y)
            feats.append(y)
        return tuple(feats)


# --- Decoder ---

class AggregationHead(nn.Module):
    """Progressive upsample-concat-convolve aggregation over stages given deepest first."""

    def __init__(self, in_channels: Sequence[int], channels: int, num_classes: int) -> None:
        super().__init__()
        self.lateral = nn.ModuleList(conv_bn_relu(c, channels, 1) for c in in_channels)
        self.fuse = nn.ModuleList(conv_bn_relu(2 * channels, channels, 3) for _ in in_channels[1:])
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def aggregate(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self.lateral[0](feats[0])
        for lateral, fuse, f in zip(self.lateral[1:], self.fuse, feats[1:]):
            y = lateral(f)
            x = F.interpolate(x, size=y.shape[-2:], mode="bilinear", align_corners=False)
            x = fuse(torch.cat([x, y], dim=1))
        return x


class CascadedDecoder(nn.Module):
    """Deep head over stages 3-5 gates the shallow head over stages 1-2; logits are averaged."""

    def __init__(self, channels: int, num_classes: int) -> None:
        super().__init__()
        self.deep = AggregationHead(STAGE_CHANNELS[4:1:-1], channels, num_classes)
        self.shallow = AggregationHead(STAGE_CHANNELS[1::-1], channels, num_classes)
        self.deep_attention = nn.Conv2d(channels, 1, 1)

    def forward(self, fused: FeaturePyramid, out_size: tuple[int, int]) -> Prediction:
        if len(fused) != len(STAGE_CHANNELS):
            raise ShapeError(f"decoder needs {len(STAGE_CHANNELS)} fused stages, got {len(fused)}")
        deep_feat = self.deep.aggregate([fused[4], fused[3], fused[2]])
        shallow_feat = self.shallow.aggregate([fused[1], fused[0]])
        attn = torch.sigmoid(self.deep_attention(deep_feat))
        attn = F.interpolate(attn, size=shallow_feat.shape[-2:], mode="bilinear", align_corners=False)
        logits_deep = F.interpolate(self.deep.classifier(deep_feat), size=out_size, mode="bilinear", align_corners=False)
        logits_shallow = F.interpolate(
            self.shallow.classifier(shallow_feat * attn), size=out_size, mode="bilinear", align_corners=False
        )
        return Prediction.from_heads(logits_deep, logits_shallow)


# --- Full model ---

class RTCAN(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        _validate_config(config)
        self.config = config
        self.rgb_encoder = ResidualEncoder(config.backbone_depth, config.rgb_in_channels, config.pretrained_backbone)
        self.thermal_encoder = ResidualEncoder(
            config.backbone_depth, config.thermal_in_channels, config.pretrained_backbone
        )
        self.fusion = nn.ModuleList(
            RCAModule(c, config.scheme, config.attention_order, config.attention_reduction, config.spatial_kernel_size)
            for c in STAGE_CHANNELS
        )
        gta_stages = STAGE_CHANNELS if config.gta_placement == "per_stage" else STAGE_CHANNELS[-1:]
        self.gta = nn.ModuleList(
            GTAModule(
                c,
                config.gta_kernel_sizes,
                config.gta_branch_channels,
                config.gta_global_branch,
                config.attention_reduction,
            )
            for c in gta_stages
        )
        self.decoder = CascadedDecoder(config.decoder_channels, config.num_classes)

    def encode(self, stream: Stream, x: torch.Tensor) -> FeaturePyramid:
        """Five-stage pyramid for one modality. Accepts C×H×W or B×C×H×W."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        encoder = self.rgb_encoder if stream == "rgb" else self.thermal_encoder
        if x.dim() != 4 or x.shape[1] != encoder.in_channels:
            raise ShapeError(f"{stream} stream expects B×{encoder.in_channels}×H×W, got {tuple(x.shape)}")
        check_input_size(x.shape[-2], x.shape[-1])
        return encoder(x)

    def fuse(self, thermal: FeaturePyramid, rgb: FeaturePyramid) -> FeaturePyramid:
        fused = [rca(t, r) for rca, t, r in zip(self.fusion, thermal, rgb)]
        if len(self.gta) == len(fused):
            fused = [gta(f) for gta, f in zip(self.gta, fused)]
        else:
            fused[-1] = self.gta[0](fused[-1])
        return tuple(fused)

    def decode(self, fused: FeaturePyramid, out_size: tuple[int, int]) -> Prediction:
        return self.decoder(fused, out_size)

    def forward(self, rgb: torch.Tensor, thermal: torch.Tensor) -> Prediction:
        if rgb.dim() == 3:
            rgb, thermal = rgb.unsqueeze(0), thermal.unsqueeze(0)
        if rgb.shape[-2:] != thermal.shape[-2:] or rgb.shape[0] != thermal.shape[0]:
            raise ShapeError(f"rgb {tuple(rgb.shape)} and thermal {tuple(thermal.shape)} are not aligned")
        out_size = (int(rgb.shape[-2]), int(rgb.shape[-1]))
        rgb_feats = self.encode("rgb", rgb)
        thermal_feats = self.encode("thermal", thermal)
        return self.decode(self.fuse(thermal_feats, rgb_feats), out_size)


def _validate_config(config: ModelConfig) -> None:
    if config.backbone_depth not in _BACKBONES:
        raise ModelConfigError(
            f"unsupported backbone depth {config.backbone_depth}; expected one of {sorted(_BACKBONES)}"
        )
    if not config.gta_kernel_sizes or any(k < 1 or k % 2 == 0 for k in config.gta_kernel_sizes):
        raise ModelConfigError(f"gta_kernel_sizes must be nonempty positive odd integers, got {config.gta_kernel_sizes}")
    if config.spatial_kernel_size % 2 == 0:
        raise ModelConfigError(f"spatial_kernel_size must be odd, got {config.spatial_kernel_size}")


def build_model(config: ModelConfig) -> RTCAN:
    """Construct RT-CAN. Random initialization is seeded by config.init_seed; the global RNG is left untouched."""
    _validate_config(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        model = RTCAN(config)
    logger.info(
        "Built RT-CAN depth=%d scheme=%s pretrained=%s params=%d",
        config.backbone_depth, config.scheme, config.pretrained_backbone, count_parameters(model),
    )
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_mask(prediction: Prediction) -> torch.Tensor:
    """Argmax over {background, gas} of logits_final; exact ties go to background."""
    logits = prediction.logits_final
    return (logits.select(-3, 1) > logits.select(-3, 0)).to(torch.int64)
