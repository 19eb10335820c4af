"""Convolutional backbones for the three supported families.

Each family comes in two variants:

* ``full``: the torchvision ResNet50 / InceptionV3 / DenseNet121 network, with
  optional ImageNet weights.
* ``compact``: a narrow, shallow network built from the same family's block
  (bottleneck residual, inception mixing, dense block) for desk-scale runs.

Every backbone exposes ``forward_maps`` (final convolutional stage, the
Grad-CAM target) and ``forward`` (global-average-pooled feature vector).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torchvision import models as tvm
from torchvision.models.densenet import DenseNet
from torchvision.models.resnet import Bottleneck

FAMILIES = ("resnet50", "inceptionv3", "densenet121")
VARIANTS = ("full", "compact")

# (family, variant) -> (feature_dim, native input size)
_GEOMETRY = {
    ("resnet50", "full"): (2048, 224),
    ("inceptionv3", "full"): (2048, 299),
    ("densenet121", "full"): (1024, 224),
    ("resnet50", "compact"): (128, 64),
    ("inceptionv3", "compact"): (128, 64),
    ("densenet121", "compact"): (64, 64),
}

_TARGET_LAYERS = {
    ("resnet50", "full"): "layer4",
    ("inceptionv3", "full"): "Mixed_7c",
    ("densenet121", "full"): "features.denseblock4",
    ("resnet50", "compact"): "stage3",
    ("inceptionv3", "compact"): "mix3",
    ("densenet121", "compact"): "features.denseblock3",
}


class MissingWeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "resnet50"
    variant: str = "compact"
    pretrained: bool = False
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def feature_dim(self) -> int:
        return _GEOMETRY[(self.family, self.variant)][0]

    @property
    def input_size(self) -> int:
        return _GEOMETRY[(self.family, self.variant)][1]

    @property
    def target_layer(self) -> str:
        return _TARGET_LAYERS[(self.family, self.variant)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(feature_dim=self.feature_dim, input_size=self.input_size, target_layer=self.target_layer)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(d["family"], d.get("variant", "full"), bool(d.get("pretrained", False)), d.get("weights_path"))


class Backbone(nn.Module):
    feature_dim: int

    def forward_maps(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.forward_maps(x), 1).flatten(1)


# -- full-size torchvision backbones -----------------------------------------


class ResNet50Backbone(Backbone):
    feature_dim = 2048

    def __init__(self, net: tvm.ResNet):
        super().__init__()
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward_maps(self, x):
        return self.layer4(self.layer3(self.layer2(self.layer1(self.stem(x)))))


class InceptionV3Backbone(Backbone):
    feature_dim = 2048
    _BLOCKS = (
        "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1", "Conv2d_4a_3x3",
        "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d",
        "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
    )

    def __init__(self, net: tvm.Inception3):
        super().__init__()
        for name in self._BLOCKS:
            setattr(self, name, getattr(net, name))

    def forward_maps(self, x):
        for name in self._BLOCKS:
            x = getattr(self, name)(x)
        return x


class DenseNet121Backbone(Backbone):
    feature_dim = 1024

    def __init__(self, net: tvm.DenseNet):
        super().__init__()
        self.features = net.features

    def forward_maps(self, x):
        return F.relu(self.features(x))


# -- compact variants ----------------------------------------------------------


def _conv_bn(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class CompactResNet(Backbone):
    """Three stages of torchvision bottleneck blocks, widths 32/64/128."""

    feature_dim = 128

    def __init__(self):
        super().__init__()
        self.stem = _conv_bn(3, 16, 3, stride=2)
        self.stage1 = self._stage(16, 8, stride=1)
        self.stage2 = self._stage(32, 16, stride=2)
        self.stage3 = self._stage(64, 32, stride=2)

    @staticmethod
    def _stage(inplanes: int, planes: int, stride: int) -> nn.Sequential:
        out = planes * Bottleneck.expansion
        down = nn.Sequential(nn.Conv2d(inplanes, out, 1, stride=stride, bias=False), nn.BatchNorm2d(out))
        return nn.Sequential(Bottleneck(inplanes, planes, stride, down), Bottleneck(out, planes))

    def forward_maps(self, x):
        return self.stage3(self.stage2(self.stage1(self.stem(x))))


class _Mix(nn.Module):
    """Inception-style block: 1x1, 3x3, double 3x3 and pooled branches, concatenated."""

    def __init__(self, cin: int, width: int):
        super().__init__()
        self.b1 = _conv_bn(cin, width, 1)
        self.b3 = nn.Sequential(_conv_bn(cin, width, 1), _conv_bn(width, width, 3))
        self.b5 = nn.Sequential(_conv_bn(cin, width, 1), _conv_bn(width, width, 3), _conv_bn(width, width, 3))
        self.bp = nn.Sequential(nn.AvgPool2d(3, stride=1, padding=1), _conv_bn(cin, width, 1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class CompactInception(Backbone):
    feature_dim = 128

    def __init__(self):
        super().__init__()
        self.stem = _conv_bn(3, 24, 3, stride=2)
        self.mix1 = _Mix(24, 16)
        self.reduce1 = _conv_bn(64, 64, 3, stride=2)
        self.mix2 = _Mix(64, 32)
        self.reduce2 = _conv_bn(128, 128, 3, stride=2)
        self.mix3 = _Mix(128, 32)

    def forward_maps(self, x):
        x = self.reduce1(self.mix1(self.stem(x)))
        return self.mix3(self.reduce2(self.mix2(x)))


class CompactDenseNet(Backbone):
    feature_dim = 64

    def __init__(self):
        super().__init__()
        net = DenseNet(growth_rate=16, block_config=(2, 2, 2), num_init_features=32, bn_size=2)
        self.features = net.features

    def forward_maps(self, x):
        return F.relu(self.features(x))


_COMPACT = {"resnet50": CompactResNet, "inceptionv3": CompactInception, "densenet121": CompactDenseNet}


def _torchvision_net(family: str, pretrained: bool):
    weights = None
    if pretrained:
        weights = {
            "resnet50": tvm.ResNet50_Weights.DEFAULT,
            "inceptionv3": tvm.Inception_V3_Weights.DEFAULT,
            "densenet121": tvm.DenseNet121_Weights.DEFAULT,
        }[family]
    try:
        if family == "resnet50":
            return ResNet50Backbone(tvm.resnet50(weights=weights))
        if family == "inceptionv3":
            net = tvm.inception_v3(weights=weights, aux_logits=True, init_weights=weights is None)
            return InceptionV3Backbone(net)
        return DenseNet121Backbone(tvm.densenet121(weights=weights))
    except Exception as exc:
        if pretrained:
            raise MissingWeightsError(f"ImageNet weights for {family} are not available: {exc}") from exc
        raise


def build_backbone(spec: BackboneSpec) -> Backbone:
    """Instantiate the backbone described by ``spec``.

    Weights come from ``spec.weights_path`` when set (a state dict of the
    backbone), else from torchvision when ``spec.pretrained`` is true. Compact
    variants have no published weights, so they need ``weights_path``.
    """
    if spec.variant == "compact":
        backbone = _COMPACT[spec.family]()
        if spec.pretrained and spec.weights_path is None:
            raise MissingWeightsError(f"no pretrained weights exist for compact {spec.family}; set weights_path")
    else:
        backbone = _torchvision_net(spec.family, spec.pretrained and spec.weights_path is None)
    if spec.weights_path is not None:
        path = Path(spec.weights_path)
        if not path.is_file():
            raise MissingWeightsError(f"backbone weights not found: {path}")
        backbone.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return backbone


def get_submodule(module: nn.Module, dotted: str) -> nn.Module:
    return module.get_submodule(dotted)
