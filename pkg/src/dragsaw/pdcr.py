"""Patch-dragsaw contrastive loss.

Per layer: cosine similarities s_ij between sampled hidden vectors are
pulled together with strength w_ij and pushed apart with strength
1 - w_ij through an InfoNCE-shaped term,

    l_ij = -log( exp(s_ij * w_ij / tau) / sum_k exp(s_ik * (1 - w_ik) / tau) )

summed over all ordered pairs (the k-sum always includes k = i). Layer
losses are averaged over the tapped layers and the batch. Affinities come
from annotations and are constants; gradients reach only the vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .affinity import SampleGrid, affinity_matrix, grid_sample_coords
from .errors import ConfigError
from .geometry import LayerGeometry, patch_bounds
from .tensor import Tensor

ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class PdcrConfig:
    tau: float = 0.5
    lam: float = 0.1
    n: int = 128
    tap_layers: tuple[int, ...] = (2, 3, 4)
    variant: str = "continuous"
    include_diagonal: bool = True
    denominator: str = "unclipped"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.n < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.n}")


def cosine_similarity_matrix(vectors: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of an (n, d) tensor."""
    if vectors.data.ndim != 2:
        raise ConfigError(f"expected (n, d) vectors, got shape {vectors.shape}")
    norms = np.sqrt((vectors.data * vectors.data).sum(axis=1))
    if np.any(norms <= ZERO_NORM_EPS):
        raise ConfigError("zero-norm vector reached cosine_similarity_matrix; filter first")
    n = T.sqrt(T.tsum(T.mul(vectors, vectors), axis=1))  # (n,)
    outer = T.mul(T.reshape(n, (-1, 1)), T.reshape(n, (1, -1)))
    return T.div(T.matmul(vectors, T.transpose2d(vectors)), outer)


def pdcr_layer_loss(sim: Tensor, affinity: np.ndarray, tau: float, include_diagonal: bool = True) -> Tensor:
    """Dragsaw loss of one layer given similarities and pair affinities."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = sim.data.shape[0] if sim.data.ndim else 0
    if n == 0:
        return Tensor(0.0)
    if sim.data.shape != (n, n) or affinity.shape != (n, n):
        raise ConfigError(f"similarity {sim.shape} and affinity {affinity.shape} must both be ({n}, {n})")
    pull = T.mul(sim, affinity / tau)
    push = T.mul(sim, (1.0 - affinity) / tau)
    lse = T.logsumexp(push, axis=1)  # (n,)
    pull_sum = T.tsum(pull)
    if include_diagonal:
        return T.add(T.mul(pull_sum, -1.0), T.mul(T.tsum(lse), float(n)))
    diag = T.tsum(T.mul(pull, np.eye(n)))
    return T.add(T.sub(diag, pull_sum), T.mul(T.tsum(lse), float(n - 1)))


@dataclass
class PdcrStats:
    """Bookkeeping for dropped samples and empty layers (diagnostics only)."""

    dropped_zero_norm: int = 0
    dropped_empty_patch: int = 0
    empty_layers: int = 0
    pair_rows: list = field(default_factory=list)


PAIR_CSV_HEADER = "layer,i,j,s_ij,w_ij,loss_ij"


def dump_pair_rows(stats: PdcrStats, path) -> None:
    """Write the per-pair debug rows collected with ``collect_pairs=True``."""
    from pathlib import Path

    lines = [PAIR_CSV_HEADER + "\n"]
    for layer, i, j, s_ij, w_ij, l_ij in stats.pair_rows:
        lines.append(f"{layer},{i},{j},{s_ij!r},{w_ij!r},{l_ij!r}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def _valid_sample_coords(
    tap_data: np.ndarray,
    grid: SampleGrid,
    geom: LayerGeometry,
    image_size: tuple[int, int],
    stats: PdcrStats | None,
) -> list[tuple[int, int]]:
    kept = []
    for (y, x) in grid.coords:
        rect = patch_bounds(geom, (y, x), image_size)
        if rect.clipped_area == 0:
            if stats:
                stats.dropped_empty_patch += 1
            continue
        v = tap_data[:, y, x]
        if float(np.sqrt((v * v).sum())) <= ZERO_NORM_EPS:
            if stats:
                stats.dropped_zero_norm += 1
            continue
        kept.append((y, x))
    return kept


def pdcr_total_loss(
    net_taps: dict[int, Tensor],
    masks: np.ndarray,
    cfg: PdcrConfig,
    geoms: dict[int, LayerGeometry],
    stats: PdcrStats | None = None,
    collect_pairs: bool = False,
) -> Tensor:
    """Mean dragsaw loss over tap layers, then over the batch.

    Pairs never cross images: the affinity matrix and the similarity matrix
    are rebuilt per image from that image's mask and activations.
    """
    for layer in cfg.tap_layers:
        if layer not in net_taps:
            raise ConfigError(f"tap layer {layer} missing from network taps {sorted(net_taps)}")
        if layer not in geoms:
            raise ConfigError(f"tap layer {layer} missing from geometries {sorted(geoms)}")
    if masks.ndim != 3:
        raise ConfigError(f"expected (B, H, W) masks, got shape {masks.shape}")
    batch = masks.shape[0]
    image_size = masks.shape[1:]
    num_classes = int(masks.max()) + 1
    layers = sorted(cfg.tap_layers)

    total = Tensor(0.0)
    for b in range(batch):
        per_image = Tensor(0.0)
        for layer in layers:
            tap = net_taps[layer]
            extent = tap.data.shape[2], tap.data.shape[3]
            grid = grid_sample_coords(extent, cfg.n)
            kept = _valid_sample_coords(tap.data[b], grid, geoms[layer], image_size, stats)
            if not kept:
                if stats:
                    stats.empty_layers += 1
                continue
            aff = affinity_matrix(
                masks[b], SampleGrid(tuple(kept)), geoms[layer], num_classes, cfg.variant, cfg.denominator
            )
            vectors = T.gather_pixels(tap, b, kept)
            sim = cosine_similarity_matrix(vectors)
            loss_l = pdcr_layer_loss(sim, aff, cfg.tau, cfg.include_diagonal)
            if collect_pairs and stats is not None:
                for i in range(len(kept)):
                    for j in range(len(kept)):
                        s_ij = float(sim.data[i, j])
                        w_ij = float(aff[i, j])
                        row_lse = float(np.log(np.exp(sim.data[i] * (1.0 - aff[i]) / cfg.tau).sum()))
                        stats.pair_rows.append((layer, i, j, s_ij, w_ij, -s_ij * w_ij / cfg.tau + row_lse))
            per_image = T.add(per_image, loss_l)
        total = T.add(total, T.div(per_image, float(len(layers))))
    return T.div(total, float(batch))
