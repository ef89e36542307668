"""Uncertainty-aware feature selection.

A small head predicts class logits at a layer's scale; the normalized
Shannon entropy of the per-location class distribution becomes an
uncertainty map u in [0, 1], and the layer's features are rescaled by
1 + (1 - u), so confident locations are amplified up to 2x and maximally
uncertain ones pass through unchanged. The head gets no direct
supervision; gradients reach it only through the gated features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import BNState, Tensor


@dataclass
class UafsHead:
    """3x3 conv -> batchnorm -> relu -> 1x1 conv producing class logits."""

    conv1_w: Tensor
    conv1_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_state: BNState
    conv2_w: Tensor
    conv2_b: Tensor

    @property
    def in_channels(self) -> int:
        return self.conv1_w.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.conv2_w.data.shape[0]

    def named_params(self, prefix: str):
        yield f"{prefix}.conv1.weight", self.conv1_w
        yield f"{prefix}.conv1.bias", self.conv1_b
        yield f"{prefix}.bn.gamma", self.bn_gamma
        yield f"{prefix}.bn.beta", self.bn_beta
        yield f"{prefix}.conv2.weight", self.conv2_w
        yield f"{prefix}.conv2.bias", self.conv2_b


def init_head(channels: int, num_classes: int, rng: np.random.Generator) -> UafsHead:
    """Head with Xavier-uniform conv1 and a zero-initialized conv2.

    Zero logits make the gate an exact no-op at initialization (uniform
    class distribution, u = 1, scale 1).
    """
    bound = np.sqrt(6.0 / (channels * 9 + channels * 9))
    return UafsHead(
        conv1_w=Tensor(rng.uniform(-bound, bound, size=(channels, channels, 3, 3)), requires_grad=True),
        conv1_b=Tensor(np.zeros(channels), requires_grad=True),
        bn_gamma=Tensor(np.ones(channels), requires_grad=True),
        bn_beta=Tensor(np.zeros(channels), requires_grad=True),
        bn_state=BNState.initial(channels),
        conv2_w=Tensor(np.zeros((num_classes, channels, 1, 1)), requires_grad=True),
        conv2_b=Tensor(np.zeros(num_classes), requires_grad=True),
    )


def head_forward(h: Tensor, head: UafsHead, training: bool, update_stats: bool = True) -> Tensor:
    """Per-location class distribution A predicted at this layer's scale."""
    if h.data.shape[1] != head.in_channels:
        raise ConfigError(f"head expects {head.in_channels} channels, got {h.data.shape[1]}")
    z = T.conv2d(h, head.conv1_w, head.conv1_b, stride=1, padding=1)
    z = T.batchnorm2d(z, head.bn_gamma, head.bn_beta, head.bn_state, training, update_stats=update_stats)
    z = T.relu(z)
    logits = T.conv2d(z, head.conv2_w, head.conv2_b, stride=1, padding=0)
    return T.channel_softmax(logits)


def entropy_map(a: Tensor) -> Tensor:
    """Normalized Shannon entropy over the class axis, shape (B, 1, h, w)."""
    m = a.data.shape[1]
    if m < 2:
        raise ConfigError("entropy normalization needs at least 2 classes")
    plogp = T.tsum(T.xlogx(a), axis=1, keepdims=True)
    return T.mul(plogp, -1.0 / np.log(m))


def select_features(h: Tensor, u: Tensor) -> Tensor:
    """Gate features by certainty: H * (1 + (1 - u)), scale in [1, 2]."""
    if u.data.shape[0] != h.data.shape[0] or u.data.shape[2:] != h.data.shape[2:]:
        raise ConfigError(f"uncertainty map {u.shape} does not match features {h.shape}")
    return T.mul(h, T.add(1.0, T.sub(1.0, u)))


def uafs_gate(
    h: Tensor,
    head: UafsHead,
    training: bool,
    detach_uncertainty: bool = False,
    update_stats: bool = True,
) -> tuple[Tensor, Tensor]:
    """Apply the selection block; returns (gated features, uncertainty map)."""
    a = head_forward(h, head, training, update_stats=update_stats)
    u = entropy_map(a)
    if detach_uncertainty:
        u = u.detach()
    return select_features(h, u), u
