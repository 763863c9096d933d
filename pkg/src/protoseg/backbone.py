"""Per-pixel feature extractor: a small stack of stride-1 conv layers.

Maps an (h, w, 3) image in [0, 1] to an (h, w, c) embedding at the same
spatial resolution, so label masks never need resampling. ReLU follows every
layer except the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

IN_CHANNELS = 3
KERNEL_SIZE = 3


@dataclass
class BackboneParams:
    """Conv-layer parameters; final layer's output channels == embed_dim."""

    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    embed_dim: int = 0

    def tensors(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (kernel, bias) in enumerate(self.layers):
            named.append((f"backbone.{i}.kernel", kernel))
            named.append((f"backbone.{i}.bias", bias))
        return named


def init_backbone(c: int, layers: int, seed, trainable: bool = True) -> BackboneParams:
    """Deterministic variance-preserving uniform init, zero biases.

    ReLU layers use gain 6 (He), the linear last layer gain 3, i.e. bounds
    +-sqrt(gain/fan_in). Smaller bounds shrink activations ~3x per layer;
    with a cosine head the resulting 1/|f| gradient factor then blows up the
    first steps and training collapses onto the majority class.
    """
    if c < 2:
        raise ConfigError(f"embed_dim must be >= 2, got {c}")
    if layers < 1:
        raise ConfigError(f"need at least one layer, got {layers}")
    rng = np.random.default_rng(seed)
    params = BackboneParams(embed_dim=c)
    c_in = IN_CHANNELS
    for li in range(layers):
        fan_in = KERNEL_SIZE * KERNEL_SIZE * c_in
        gain = 3.0 if li == layers - 1 else 6.0
        s = np.sqrt(gain / fan_in)
        kernel = rng.uniform(-s, s, (KERNEL_SIZE, KERNEL_SIZE, c_in, c))
        bias = np.zeros(c)
        params.layers.append(
            (Tensor(kernel, requires_grad=trainable), Tensor(bias, requires_grad=trainable))
        )
        c_in = c
    return params


def extract_features(params: BackboneParams, image: Tensor) -> Tensor:
    """Image (h, w, 3) -> feature map (h, w, c); differentiable when taped.

    The input is centered to [-0.5, 0.5] before the first convolution:
    all-positive inputs give every pixel a large shared feature component,
    which collapses cosine scores to ~1 for every class.
    """
    if image.data.ndim != 3 or image.shape[2] != IN_CHANNELS:
        raise ShapeError(f"expected (h, w, {IN_CHANNELS}) image, got {image.shape}")
    out = T.scale(image, 1.0, -0.5)
    last = len(params.layers) - 1
    for i, (kernel, bias) in enumerate(params.layers):
        out = T.conv2d(out, kernel, bias)
        if i != last:
            out = T.relu(out)
    return out
