"""HED-style generator, conditional patch discriminator and a U-Net baseline."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

# (convs per stage, output width at base_width=64), VGG16 layout.
VGG16_STAGES = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]


@dataclass
class SideOutputs:
    side_maps: List[torch.Tensor]
    fused_map: torch.Tensor
    side_logits: List[torch.Tensor] = field(default_factory=list)
    fused_logits: Optional[torch.Tensor] = None

    def all_maps(self):
        return [*self.side_maps, self.fused_map]


@dataclass
class GeneratorConfig:
    backbone_stages: int = 5
    pretrained_backbone: bool = False
    pretrained_path: Optional[str] = None
    fusion_init: Optional[float] = None  # defaults to 1 / backbone_stages
    base_width: int = 64

    def validate(self):
        if not 2 <= self.backbone_stages <= 5:
            raise ConfigError("model.backbone_stages: must lie in [2, 5]")
        if self.base_width < 1:
            raise ConfigError("model.base_width: must be >= 1")
        if self.pretrained_backbone and self.base_width != 64:
            raise ConfigError("model.base_width: pretrained VGG16 weights require base_width = 64")
        return self


@dataclass
class DiscriminatorConfig:
    patch_size: int = 128
    input_channels: int = 4
    base_width: int = 64

    def validate(self):
        if self.patch_size not in (64, 128):
            raise ConfigError(f"model.patch_size: unsupported patch size {self.patch_size} (expected 64 or 128)")
        if self.input_channels != 4:
            raise ConfigError("model.input_channels: the conditional discriminator takes exactly 4 channels")
        if self.base_width < 1:
            raise ConfigError("model.disc_base_width: must be >= 1")
        return self


def patch_size_for(lesion):
    """Microaneurysms are judged on 64 px patches, every other lesion on 128 px."""
    return 64 if str(getattr(lesion, "value", lesion)).upper() == "MA" else 128


class HEDNet(nn.Module):
    """VGG16 trunk without pool5 and dense head; one 1x1 side head per stage.

    ``features`` keeps torchvision's VGG16 indexing so ImageNet weights load
    by key. Side logits are upsampled bilinearly to the input size and fused
    by a learned 1x1 convolution over their concatenation.
    """

    def __init__(self, config: GeneratorConfig = None):
        super().__init__()
        cfg = (config or GeneratorConfig()).validate()
        self.config = cfg
        layers, self.taps, side_widths = [], [], []
        in_ch = 3
        for stage, (n_convs, width) in enumerate(VGG16_STAGES[:cfg.backbone_stages]):
            width = max(1, width * cfg.base_width // 64)
            if stage > 0:
                layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
            for _ in range(n_convs):
                layers += [nn.Conv2d(in_ch, width, kernel_size=3, padding=1), nn.ReLU(inplace=True)]
                in_ch = width
            self.taps.append(len(layers) - 1)
            side_widths.append(width)
        self.features = nn.Sequential(*layers)
        self.side_heads = nn.ModuleList(nn.Conv2d(w, 1, kernel_size=1) for w in side_widths)
        self.fuse = nn.Conv2d(len(side_widths), 1, kernel_size=1)
        self.stride = 2 ** (cfg.backbone_stages - 1)
        self._init_weights()
        if cfg.pretrained_backbone:
            self.load_backbone(cfg.pretrained_path)

    def _init_weights(self):
        for m in self.features.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        init = self.config.fusion_init
        if init is None:
            init = 1.0 / len(self.side_heads)
        nn.init.constant_(self.fuse.weight, init)
        nn.init.zeros_(self.fuse.bias)

    def load_backbone(self, path):
        if not path or not Path(path).is_file():
            raise FileNotFoundError(f"pretrained backbone weights not found at {path!r}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        own = self.features.state_dict()
        picked = {}
        for key in own:
            src = "features." + key
            if src not in state:
                raise KeyError(f"pretrained file lacks {src}")
            if state[src].shape != own[key].shape:
                raise ValueError(f"shape mismatch for {src}: {tuple(state[src].shape)} vs {tuple(own[key].shape)}")
            picked[key] = state[src]
        self.features.load_state_dict(picked)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input size {h}x{w} must be divisible by {self.stride}")
        side_logits = []
        tap = 0
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i == self.taps[tap]:
                s = self.side_heads[tap](x)
                if s.shape[-2:] != (h, w):
                    s = F.interpolate(s, size=(h, w), mode="bilinear", align_corners=False)
                side_logits.append(s)
                tap += 1
        fused = self.fuse(torch.cat(side_logits, dim=1))
        return SideOutputs(
            side_maps=[torch.sigmoid(s) for s in side_logits],
            fused_map=torch.sigmoid(fused),
            side_logits=side_logits,
            fused_logits=fused,
        )


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN over (image, segmentation) pairs.

    ``n = log2(patch_size) - 2`` stride-2 3x3 conv blocks plus a stride-1 3x3
    logit layer give each output unit a receptive field of ``patch_size - 1``
    pixels (63 for 64, 127 for 128). Widths double per block from
    ``base_width`` up to ``8 * base_width``; LeakyReLU(0.2); batch norm on all
    but the first block.
    """

    def __init__(self, config: DiscriminatorConfig = None):
        super().__init__()
        cfg = (config or DiscriminatorConfig()).validate()
        self.config = cfg
        n_blocks = cfg.patch_size.bit_length() - 3
        layers = []
        in_ch = cfg.input_channels
        for i in range(n_blocks):
            out_ch = cfg.base_width * min(2 ** i, 8)
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch = out_ch
        layers.append(nn.Conv2d(in_ch, 1, kernel_size=3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def receptive_field(self):
        rf = 1
        for m in reversed(self.net):
            if isinstance(m, nn.Conv2d):
                rf = (rf - 1) * m.stride[0] + m.kernel_size[0]
        return rf

    def forward(self, image, seg):
        if image.shape[0] != seg.shape[0] or image.shape[-2:] != seg.shape[-2:]:
            raise ValueError(f"image {tuple(image.shape)} and segmentation {tuple(seg.shape)} are not aligned")
        x = torch.cat([image, seg], dim=1)
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {x.shape[1]}")
        return self.net(x)


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Four-level encoder/decoder with skip concatenation at every level."""

    def __init__(self, base_width=64, depth=4):
        super().__init__()
        self.base_width = base_width
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.encoders = nn.ModuleList([_double_conv(3, widths[0])])
        self.encoders.extend(_double_conv(widths[i], widths[i + 1]) for i in range(depth))
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], kernel_size=2, stride=2) for i in reversed(range(depth))
        )
        self.decoders = nn.ModuleList(_double_conv(2 * widths[i], widths[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)
        self.stride = 2 ** depth

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input size {h}x{w} must be divisible by {self.stride}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        logits = self.head(x)
        prob = torch.sigmoid(logits)
        return SideOutputs(side_maps=[prob], fused_map=prob, side_logits=[logits], fused_logits=logits)


def build_generator(config: GeneratorConfig = None) -> HEDNet:
    return HEDNet(config)


def build_discriminator(config: DiscriminatorConfig = None) -> PatchDiscriminator:
    return PatchDiscriminator(config)


def build_unet(base_width=64) -> UNet:
    if base_width < 1:
        raise ConfigError("model.base_width: must be >= 1")
    return UNet(base_width)


def model_spec(gen, disc=None):
    """Plain-data description sufficient to rebuild the architecture."""
    if isinstance(gen, HEDNet):
        g = {"name": "hednet", **dataclasses.asdict(gen.config)}
    elif isinstance(gen, UNet):
        g = {"name": "unet", "base_width": gen.base_width}
    else:
        g = {"name": type(gen).__name__}
    d = None if disc is None else dataclasses.asdict(disc.config)
    return {"generator": g, "discriminator": d}


def build_from_spec(spec):
    g = dict(spec["generator"])
    name = g.pop("name")
    if name == "hednet":
        # Weights come from the checkpoint, never from the backbone file.
        g["pretrained_backbone"] = False
        gen = HEDNet(GeneratorConfig(**g))
    elif name == "unet":
        gen = UNet(g["base_width"])
    else:
        raise ValueError(f"cannot rebuild generator of type {name!r}")
    disc = None if spec.get("discriminator") is None else PatchDiscriminator(DiscriminatorConfig(**spec["discriminator"]))
    return gen, disc
