"""Patch affinity from annotation masks.

For two hidden vectors, the affinity w in [0, 1] is one minus the mean
absolute difference of their patches' per-class area ratios: 1 means
identical class composition, 0 fully disjoint. Three ablation variants
(constant, diagonal, bipartite) replace the continuous score. Affinities
derive from annotations only and never carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import LayerGeometry, PatchRect, patch_bounds

VARIANTS = ("continuous", "constant", "diagonal", "bipartite")


@dataclass(frozen=True)
class SampleGrid:
    """Deterministic lattice of hidden coordinates for one layer."""

    coords: tuple[tuple[int, int], ...]


def grid_sample_coords(hidden_extent: tuple[int, int], n: int) -> SampleGrid:
    """Pick up to ``n`` coordinates on a centered square lattice.

    When the extent holds at most ``n`` locations, all of them are returned
    row-major. Otherwise a g x g lattice (g = ceil(sqrt(n))) with spacing
    extent/g and a half-spacing offset is emitted row-major, deduplicated,
    truncated to ``n``, and padded with the first unused row-major
    coordinates if flooring ever collapses lattice points.
    """
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    h, w = hidden_extent
    if h < 1 or w < 1:
        raise ConfigError(f"hidden extent must be positive, got {hidden_extent}")
    if h * w <= n:
        return SampleGrid(tuple((y, x) for y in range(h) for x in range(w)))

    g = int(np.ceil(np.sqrt(n)))
    ys = [min(h - 1, int((i + 0.5) * h / g)) for i in range(g)]
    xs = [min(w - 1, int((j + 0.5) * w / g)) for j in range(g)]
    coords: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for y in ys:
        for x in xs:
            if (y, x) not in seen:
                seen.add((y, x))
                coords.append((y, x))
            if len(coords) == n:
                return SampleGrid(tuple(coords))
    for y in range(h):
        for x in range(w):
            if (y, x) not in seen:
                seen.add((y, x))
                coords.append((y, x))
            if len(coords) == n:
                return SampleGrid(tuple(coords))
    return SampleGrid(tuple(coords))


def foreground_ratios(mask: np.ndarray, rect: PatchRect, num_classes: int, denominator: str = "unclipped") -> np.ndarray:
    """Per-class pixel fractions of one patch (class 0 = background).

    ``unclipped`` divides by r^2; ``clipped`` divides by the in-image pixel
    count so border ratios still sum to 1. An empty clipped rect yields the
    all-zero vector.
    """
    if denominator not in ("unclipped", "clipped"):
        raise ConfigError(f"unknown denominator mode {denominator!r}")
    if rect.clipped_area == 0:
        return np.zeros(num_classes)
    window = mask[rect.top : rect.bottom, rect.left : rect.right]
    counts = np.bincount(window.reshape(-1), minlength=num_classes).astype(np.float64)
    if counts.size > num_classes:
        raise ConfigError(f"mask holds class indices >= {num_classes}")
    d = rect.unclipped_area if denominator == "unclipped" else rect.clipped_area
    return counts / d


def affinity_score(phi_i: np.ndarray, phi_j: np.ndarray) -> float:
    """1 - mean absolute difference of two class-ratio vectors."""
    if phi_i.shape != phi_j.shape:
        raise ConfigError(f"ratio vectors disagree on class count: {phi_i.shape} vs {phi_j.shape}")
    m = phi_i.shape[0]
    return float(1.0 - np.abs(phi_i - phi_j).sum() / m)


def class_ratio_table(
    mask: np.ndarray,
    coords,
    geom: LayerGeometry,
    num_classes: int,
    denominator: str = "unclipped",
) -> np.ndarray:
    """Ratio vectors for many coordinates via per-class integral images."""
    H, W = mask.shape
    integral = np.zeros((num_classes, H + 1, W + 1))
    for m in range(num_classes):
        integral[m, 1:, 1:] = np.cumsum(np.cumsum(mask == m, axis=0), axis=1)
    out = np.zeros((len(coords), num_classes))
    for i, coord in enumerate(coords):
        rect = patch_bounds(geom, coord, (H, W))
        if rect.clipped_area == 0:
            continue
        counts = (
            integral[:, rect.bottom, rect.right]
            - integral[:, rect.top, rect.right]
            - integral[:, rect.bottom, rect.left]
            + integral[:, rect.top, rect.left]
        )
        d = rect.unclipped_area if denominator == "unclipped" else rect.clipped_area
        out[i] = counts / d
    return out


def affinity_matrix(
    mask: np.ndarray,
    grid: SampleGrid,
    geom: LayerGeometry,
    num_classes: int,
    variant: str = "continuous",
    denominator: str = "unclipped",
) -> np.ndarray:
    """n x n pair weights for the sampled coordinates, per the chosen variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown affinity variant {variant!r}; choose from {VARIANTS}")
    if int(mask.max(initial=0)) >= num_classes:
        raise ConfigError(f"mask holds class indices >= {num_classes}")
    n = len(grid.coords)
    if variant == "constant":
        return np.full((n, n), 0.5)
    if variant == "diagonal":
        return np.eye(n)
    H, W = mask.shape
    if variant == "bipartite":
        labels = np.empty(n, dtype=np.int64)
        for i, (y, x) in enumerate(grid.coords):
            cy = min(max(geom.start + y * geom.jump, 0), H - 1)
            cx = min(max(geom.start + x * geom.jump, 0), W - 1)
            labels[i] = mask[cy, cx]
        return (labels[:, None] == labels[None, :]).astype(np.float64)
    ratios = class_ratio_table(mask, grid.coords, geom, num_classes, denominator)
    dist = np.abs(ratios[:, None, :] - ratios[None, :, :]).sum(axis=2) / num_classes
    return 1.0 - dist
