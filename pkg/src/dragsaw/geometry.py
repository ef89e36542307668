"""Receptive-field arithmetic for stacks of square convolutions.

Maps a hidden coordinate at any stack depth to the input-image patch that
influences it: side length r, cumulative stride (jump), and the input
coordinate of hidden unit (0,0) (start). Only odd kernels and strided
convs are supported; see ``ConvStackSpec`` validation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class ConvStackSpec:
    layers: tuple[ConvLayerSpec, ...]
    image_size: tuple[int, int]

    def __post_init__(self):
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ConfigError(f"image size must be positive, got {self.image_size}")
        for i, l in enumerate(self.layers):
            if l.kernel < 1 or l.kernel % 2 == 0:
                raise ConfigError(f"layer {i + 1}: kernel must be odd and >= 1, got {l.kernel}")
            if l.stride < 1:
                raise ConfigError(f"layer {i + 1}: stride must be >= 1, got {l.stride}")
            if l.padding < 0:
                raise ConfigError(f"layer {i + 1}: padding must be >= 0, got {l.padding}")
            h = (h + 2 * l.padding - l.kernel) // l.stride + 1
            w = (w + 2 * l.padding - l.kernel) // l.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"layer {i + 1} collapses the spatial extent to {h}x{w}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def hidden_extent(self, layer: int) -> tuple[int, int]:
        """Spatial (h, w) of the feature map after ``layer`` layers."""
        self._check_index(layer)
        h, w = self.image_size
        for l in self.layers[:layer]:
            h = (h + 2 * l.padding - l.kernel) // l.stride + 1
            w = (w + 2 * l.padding - l.kernel) // l.stride + 1
        return h, w

    def _check_index(self, layer: int) -> None:
        if not 0 <= layer <= self.depth:
            raise ConfigError(f"layer index {layer} out of range [0, {self.depth}]")


@dataclass(frozen=True)
class LayerGeometry:
    r: int      # receptive-field side length in input pixels
    jump: int   # input pixels per unit hidden step
    start: int  # input coordinate of the center of hidden unit (0, 0)


@dataclass(frozen=True)
class PatchRect:
    """Half-open pixel bounds of one hidden unit's input patch, clipped."""

    top: int
    left: int
    bottom: int
    right: int
    unclipped_area: int
    clipped_area: int


def rf_size(spec: ConvStackSpec, layer: int) -> int:
    """Receptive-field side after ``layer`` layers: sum of (k-1) * stride products + 1."""
    spec._check_index(layer)
    r = 1
    jump = 1
    for l in spec.layers[:layer]:
        r += (l.kernel - 1) * jump
        jump *= l.stride
    return r


def layer_geometry(spec: ConvStackSpec, layer: int) -> LayerGeometry:
    """Size, cumulative stride, and center offset of a layer's patches."""
    spec._check_index(layer)
    r = 1
    jump = 1
    start = 0
    for l in spec.layers[:layer]:
        r += (l.kernel - 1) * jump
        start += ((l.kernel - 1) // 2 - l.padding) * jump
        jump *= l.stride
    return LayerGeometry(r=r, jump=jump, start=start)


def patch_bounds(geom: LayerGeometry, coord: tuple[int, int], image_size: tuple[int, int]) -> PatchRect:
    """Input-image rectangle of the hidden unit at ``coord``, clipped to the image."""
    H, W = image_size
    cy = geom.start + coord[0] * geom.jump
    cx = geom.start + coord[1] * geom.jump
    half = (geom.r - 1) // 2
    top = max(0, cy - half)
    left = max(0, cx - half)
    bottom = min(H, cy + half + 1)
    right = min(W, cx + half + 1)
    clipped = max(0, bottom - top) * max(0, right - left)
    if clipped == 0:
        top = left = bottom = right = 0
    return PatchRect(
        top=top,
        left=left,
        bottom=bottom,
        right=right,
        unclipped_area=geom.r * geom.r,
        clipped_area=clipped,
    )
