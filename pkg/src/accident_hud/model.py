"""Backbone adapters and the hotspot classifier (backbone -> ABM -> pool -> fc -> softmax)."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._io import atomic_write_bytes, write_json
from .abm import ABM, AbmConfig
from .imagery import IMAGENET_MEAN, IMAGENET_STD, MODEL_SIZE

HOTSPOT, NON_HOTSPOT = 0, 1
CLASS_NAMES = ("hotspot", "non_hotspot")


class Backbone(nn.Module):
    """Feature extractor contract.

    ``features`` maps an image batch to the final convolutional feature map,
    ``out_channels`` is its depth, ``mean``/``std`` are the normalization
    constants the weights expect.
    """

    name = "backbone"
    out_channels: int
    mean = IMAGENET_MEAN
    std = IMAGENET_STD

    def forward(self, x):
        return self.features(x)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(flag)


class TinyBackbone(Backbone):
    """Three conv blocks; small enough for CPU tests."""

    name = "tiny"

    def __init__(self, widths=(8, 16, 32)):
        super().__init__()
        layers, cin = [], 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(cin, w, 3, padding=1), nn.ReLU()]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(4 if i == 0 else 2))
            cin = w
        self.features = nn.Sequential(*layers)
        self.out_channels = widths[-1]


class TorchvisionBackbone(Backbone):
    """Convolutional trunk of a torchvision classifier."""

    _builders = {
        "squeezenet": ("squeezenet1_1", 512),
        "vgg16": ("vgg16", 512),
        "resnet18": ("resnet18", 512),
        "densenet": ("densenet121", 1024),
    }

    def __init__(self, name: str, pretrained: bool = False):
        super().__init__()
        import torchvision.models as tvm

        if name not in self._builders:
            raise ValueError(f"unknown backbone {name!r}; choose from {sorted(self._builders)}")
        fn, channels = self._builders[name]
        net = getattr(tvm, fn)(weights="DEFAULT" if pretrained else None)
        if name == "resnet18":
            trunk = nn.Sequential(*list(net.children())[:-2])
        elif name == "densenet":
            trunk = nn.Sequential(net.features, nn.ReLU())
        else:
            trunk = net.features
        self.name = name
        self.features = trunk
        self.out_channels = channels


def make_backbone(name: str = "tiny", pretrained: bool = False) -> Backbone:
    if name == "tiny":
        return TinyBackbone()
    return TorchvisionBackbone(name, pretrained=pretrained)


class HotspotClassifier(nn.Module):
    def __init__(self, backbone: Backbone, abm_config: AbmConfig = AbmConfig()):
        super().__init__()
        self.backbone = backbone
        self.abm = ABM(backbone.out_channels, abm_config)
        self.fc = nn.Linear(backbone.out_channels, 2)

    def head(self, feats):
        return self.fc(feats.mean(dim=(2, 3)))

    def forward(self, x):
        return self.head(self.abm(self.backbone(x)))

    def layer_split(self, layer: str = "backbone"):
        """(encoder, decoder) around a named layer for CAM methods.

        ``"backbone"`` is the last conv feature map before the attention
        block; ``"abm"`` is the attention block output.
        """
        if layer == "backbone":
            return self.backbone, lambda a: self.head(self.abm(a))
        if layer == "abm":
            return (lambda x: self.abm(self.backbone(x))), self.head
        raise ValueError(f"unknown CAM layer {layer!r}")


@dataclass(frozen=True)
class ClassScores:
    p_hotspot: float
    p_non_hotspot: float

    @property
    def predicted(self) -> str:
        return CLASS_NAMES[int(self.p_non_hotspot > self.p_hotspot)]


def to_batch(x) -> torch.Tensor:
    """HxWx3 float array (or 3xHxW / 1x3xHxW tensor) -> 1x3xHxW tensor."""
    if isinstance(x, np.ndarray):
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected HxWx3 array, got {x.shape}")
        return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
    if x.ndim == 3:
        x = x[None]
    return x


def classify(image, model: nn.Module, size: int = MODEL_SIZE) -> ClassScores:
    x = to_batch(image)
    if tuple(x.shape[1:]) != (3, size, size):
        raise ValueError(f"expected a preprocessed 3x{size}x{size} input, got {tuple(x.shape[1:])}")
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = torch.softmax(model(x.to(param.dtype)), dim=1)[0]
    model.train(was_training)
    return ClassScores(float(p[HOTSPOT]), float(p[NON_HOTSPOT]))


def build_classifier(backbone: str = "tiny", abm: AbmConfig = AbmConfig(), pretrained: bool = False) -> HotspotClassifier:
    return HotspotClassifier(make_backbone(backbone, pretrained), abm)


def save_checkpoint(path, model: HotspotClassifier, seed: int) -> None:
    path = Path(path)
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    atomic_write_bytes(path, buf.getvalue())
    write_json(path.with_suffix(".json"), {
        "backbone": model.backbone.name,
        "abm_variant": model.abm.config.variant,
        "compression_ratio": model.abm.config.compression_ratio,
        "seed": seed,
        "mean": list(model.backbone.mean),
        "std": list(model.backbone.std),
    })


def load_checkpoint(path) -> tuple[HotspotClassifier, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = build_classifier(meta["backbone"], AbmConfig(meta["abm_variant"], meta["compression_ratio"]))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, meta
