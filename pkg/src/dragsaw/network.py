"""Toy encoder-decoder segmentation network with named tap points.

Encoder block b: 3x3 stride-1 conv + ReLU (the skip source), then 3x3
stride-2 conv + ReLU, then an optional uncertainty gate. Decoder block b:
nearest 2x upsample, concat with the matching-resolution encoder skip,
3x3 conv + ReLU, optional gate. A final 1x1 conv maps to class logits at
the input resolution. Tap b is encoder block b's final post-ReLU,
post-gate activation; its patch geometry is derived from the encoder's
conv stack.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .geometry import ConvLayerSpec, ConvStackSpec, LayerGeometry, layer_geometry
from .tensor import Tensor
from .uafs import UafsHead, init_head, uafs_gate


def _all_block_names(depth: int) -> tuple[str, ...]:
    return tuple(f"enc{i}" for i in range(1, depth + 1)) + tuple(f"dec{i}" for i in range(1, depth + 1))


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    uafs_layers: tuple[str, ...] | None = None  # None = all blocks
    pdcr_taps: tuple[int, ...] = (2, 3, 4)
    detach_uncertainty: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        depth = len(self.encoder_channels)
        names = set(_all_block_names(depth))
        for name in self.uafs_layers or ():
            if name not in names:
                raise ConfigError(f"unknown uafs layer {name!r}; valid: {sorted(names)}")
        for tap in self.pdcr_taps:
            if not 1 <= tap <= depth:
                raise ConfigError(f"pdcr tap {tap} outside encoder blocks 1..{depth}")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    def gated_blocks(self) -> frozenset[str]:
        if self.uafs_layers is None:
            return frozenset(_all_block_names(self.depth))
        return frozenset(self.uafs_layers)


@dataclass
class ConvUnit:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


@dataclass
class EncoderBlock:
    conv_a: ConvUnit
    conv_b: ConvUnit
    head: UafsHead | None


@dataclass
class DecoderBlock:
    conv: ConvUnit
    head: UafsHead | None


def encoder_stack(cfg: SegNetConfig, image_size: tuple[int, int]) -> ConvStackSpec:
    """The encoder as a conv stack (two layers per block) for geometry."""
    layers = []
    for _ in cfg.encoder_channels:
        layers.append(ConvLayerSpec(kernel=3, stride=1, padding=1))
        layers.append(ConvLayerSpec(kernel=3, stride=2, padding=1))
    return ConvStackSpec(layers=tuple(layers), image_size=image_size)


@dataclass
class SegNet:
    cfg: SegNetConfig
    enc: list[EncoderBlock]
    dec: list[DecoderBlock]
    final: ConvUnit
    tap_geometries: dict[int, LayerGeometry] = field(default_factory=dict)

    def encoder_stack(self, image_size: tuple[int, int]) -> ConvStackSpec:
        return encoder_stack(self.cfg, image_size)

    def named_params(self):
        for i, blk in enumerate(self.enc, 1):
            yield f"enc{i}.conv_a.weight", blk.conv_a.weight
            yield f"enc{i}.conv_a.bias", blk.conv_a.bias
            yield f"enc{i}.conv_b.weight", blk.conv_b.weight
            yield f"enc{i}.conv_b.bias", blk.conv_b.bias
            if blk.head is not None:
                yield from blk.head.named_params(f"enc{i}.head")
        for i, blk in enumerate(self.dec, 1):
            yield f"dec{i}.conv.weight", blk.conv.weight
            yield f"dec{i}.conv.bias", blk.conv.bias
            if blk.head is not None:
                yield from blk.head.named_params(f"dec{i}.head")
        yield "final.weight", self.final.weight
        yield "final.bias", self.final.bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def _named_bn_states(self):
        for i, blk in enumerate(self.enc, 1):
            if blk.head is not None:
                yield f"enc{i}.head.bn", blk.head.bn_state
        for i, blk in enumerate(self.dec, 1):
            if blk.head is not None:
                yield f"dec{i}.head.bn", blk.head.bn_state

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, t in self.named_params():
            out[name] = t.data.copy()
        for name, st in self._named_bn_states():
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(d)
        extra = set(d) - set(expected)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.named_params():
            if d[name].shape != t.data.shape:
                raise ConfigError(f"{name}: shape {d[name].shape} != {t.data.shape}")
            t.data[...] = d[name]
        for name, st in self._named_bn_states():
            st.running_mean[...] = d[f"{name}.running_mean"]
            st.running_var[...] = d[f"{name}.running_var"]


def _xavier_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    fan_in = cin * k * k
    fan_out = cout * k * k
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)


def _conv_unit(rng: np.random.Generator, cout: int, cin: int, k: int, stride: int, padding: int) -> ConvUnit:
    return ConvUnit(
        weight=_xavier_conv(rng, cout, cin, k),
        bias=Tensor(np.zeros(cout), requires_grad=True),
        stride=stride,
        padding=padding,
    )


def init_parameters(cfg: SegNetConfig) -> SegNet:
    """Build a network fully determined by cfg.seed.

    Trunk weights are drawn from one stream and head weights from a
    separate derived stream, so toggling uafs_layers never shifts the
    trunk initialization.
    """
    trunk_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    head_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    gated = cfg.gated_blocks()
    chans = cfg.encoder_channels
    m = cfg.num_classes

    enc: list[EncoderBlock] = []
    prev = cfg.in_channels
    for i, c in enumerate(chans, 1):
        conv_a = _conv_unit(trunk_rng, c, prev, 3, stride=1, padding=1)
        conv_b = _conv_unit(trunk_rng, c, c, 3, stride=2, padding=1)
        head = init_head(c, m, head_rng) if f"enc{i}" in gated else None
        enc.append(EncoderBlock(conv_a, conv_b, head))
        prev = c

    dec: list[DecoderBlock] = []
    for i in range(1, cfg.depth + 1):
        c_skip = chans[i - 1]
        c_prev = chans[i] if i < cfg.depth else chans[-1]
        conv = _conv_unit(trunk_rng, c_skip, c_prev + c_skip, 3, stride=1, padding=1)
        head = init_head(c_skip, m, head_rng) if f"dec{i}" in gated else None
        dec.append(DecoderBlock(conv, head))

    final = _conv_unit(trunk_rng, m, chans[0], 1, stride=1, padding=0)
    net = SegNet(cfg=cfg, enc=enc, dec=dec, final=final)

    stack = net.encoder_stack((64, 64))  # geometry is independent of image size
    for b in range(1, cfg.depth + 1):
        net.tap_geometries[b] = layer_geometry(stack, 2 * b)
    return net


def forward_with_taps(
    net: SegNet,
    x: Tensor,
    training: bool,
    update_stats: bool = True,
    uncertainty_out: dict[str, Tensor] | None = None,
) -> tuple[Tensor, dict[int, Tensor]]:
    """Run the network, returning final logits and the configured tap features."""
    cfg = net.cfg
    B, C, H, W = x.data.shape
    if C != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels} input channels, got {C}")
    factor = 2 ** cfg.depth
    if H % factor or W % factor:
        need_h = (factor - H % factor) % factor
        need_w = (factor - W % factor) % factor
        raise ConfigError(
            f"input {H}x{W} not divisible by {factor}; pad by {need_h}x{need_w} to {H + need_h}x{W + need_w}"
        )

    taps: dict[int, Tensor] = {}
    skips: list[Tensor] = []
    h = x
    for i, blk in enumerate(net.enc, 1):
        a = T.relu(blk.conv_a(h))
        skips.append(a)
        h = T.relu(blk.conv_b(a))
        if blk.head is not None:
            h, u = uafs_gate(h, blk.head, training, cfg.detach_uncertainty, update_stats)
            if uncertainty_out is not None:
                uncertainty_out[f"enc{i}"] = u
        if i in cfg.pdcr_taps:
            taps[i] = h

    for i in range(cfg.depth, 0, -1):
        blk = net.dec[i - 1]
        h = T.upsample_nearest2x(h)
        h = T.concat_channels(h, skips[i - 1])
        h = T.relu(blk.conv(h))
        if blk.head is not None:
            h, u = uafs_gate(h, blk.head, training, cfg.detach_uncertainty, update_stats)
            if uncertainty_out is not None:
                uncertainty_out[f"dec{i}"] = u

    logits = net.final(h)
    return logits, taps


def predict_mask(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def config_from_state(state: dict[str, np.ndarray]) -> SegNetConfig:
    """Reconstruct the architecture a checkpoint's tensors describe."""
    if "enc1.conv_a.weight" not in state or "final.weight" not in state:
        raise ConfigError("state dict does not describe a segmentation network")
    chans = []
    depth = 1
    while f"enc{depth}.conv_a.weight" in state:
        chans.append(state[f"enc{depth}.conv_a.weight"].shape[0])
        depth += 1
    depth = len(chans)
    gated = tuple(
        name
        for name in _all_block_names(depth)
        if f"{name}.head.conv1.weight" in state
    )
    return SegNetConfig(
        in_channels=state["enc1.conv_a.weight"].shape[1],
        num_classes=state["final.weight"].shape[0],
        encoder_channels=tuple(chans),
        uafs_layers=gated,
        pdcr_taps=(),
    )


def load_network(state: dict[str, np.ndarray]) -> SegNet:
    net = init_parameters(config_from_state(state))
    net.load_state_dict(state)
    return net
