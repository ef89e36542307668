"""Synthetic segmentation data and bit-exact file IO.

Samples are grayscale images with 1-3 elliptical blobs whose intensity
offsets are smoothed by a Gaussian blur of random sigma, over a lightly
textured background plus white noise. Masks keep the crisp ellipse
membership, so image boundaries are ambiguous while annotations are not.
Everything is derived deterministically from (seed, index).

Files are binary PGM (P5); the manifest is one tab-separated line per
sample: image path, mask path, and sha256 of each file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

_GEN_RETRIES = 10


@dataclass(frozen=True)
class SyntheticConfig:
    count: int
    size: int = 64
    num_classes: int = 2
    blob_count: tuple[int, int] = (1, 3)
    intensity_offset: tuple[float, float] = (0.2, 0.5)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    noise_sigma: float = 0.05
    texture: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"count must be >= 0, got {self.count}")
        if self.size % 32 != 0:
            raise ConfigError(f"size must be divisible by 32, got {self.size}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        for name, (lo, hi) in (
            ("blob_count", self.blob_count),
            ("intensity_offset", self.intensity_offset),
            ("blur_sigma", self.blur_sigma),
        ):
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {(lo, hi)}")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    image_sha: str
    mask_sha: str


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    root: Path
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# PGM (binary P5)


def write_pgm(path: Path | str, data: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary P5 with maxval 255."""
    arr = np.asarray(data)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ConfigError(f"write_pgm needs a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    """Strict binary P5 reader; errors name the offending byte offset."""
    blob = Path(path).read_bytes()

    def fail(offset: int, what: str):
        raise ValueError(f"{path}: malformed PGM at byte {offset}: {what}")

    if blob[:2] != b"P5":
        fail(0, "missing P5 magic")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            fail(start, f"expected integer header field, got {token[:10]!r}")
        fields.append(int(token))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        fail(pos, "expected single whitespace byte after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        fail(pos, f"maxval must be 255, got {maxval}")
    need = w * h
    payload = blob[pos : pos + need]
    if len(payload) != need:
        fail(pos + len(payload), f"payload has {len(payload)} of {need} bytes")
    if len(blob) > pos + need:
        fail(pos + need, f"{len(blob) - pos - need} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def quantize_unit(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] reals to uint8 with round-half-up."""
    return np.clip(np.floor(255.0 * img + 0.5), 0, 255).astype(np.uint8)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# sample synthesis


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, radius, mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, out)
    return out


def _render_sample(cfg: SyntheticConfig, index: int, attempt: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index, attempt)))
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s]

    base = np.full((s, s), 0.3)
    if cfg.texture:
        fy, fx = rng.uniform(1.0, 3.0, size=2)
        py, px = rng.uniform(0.0, 2.0 * np.pi, size=2)
        base = base + 0.025 * (np.sin(2.0 * np.pi * fy * yy / s + py) + np.sin(2.0 * np.pi * fx * xx / s + px))

    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    sigma = float(rng.uniform(*cfg.blur_sigma))

    mask = np.zeros((s, s), dtype=np.uint8)
    offsets = np.zeros((s, s))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15 * s, 0.85 * s, size=2)
        ra, rb = rng.uniform(s / 8.0, s / 4.0, size=2)
        theta = rng.uniform(0.0, np.pi)
        cls = int(rng.integers(1, cfg.num_classes))
        offset = float(rng.uniform(*cfg.intensity_offset))
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
        mask[inside] = cls
        offsets[inside] += offset

    img = _gaussian_blur(base + offsets, sigma)
    img = img + rng.normal(0.0, cfg.noise_sigma, size=(s, s))
    return np.clip(img, 0.0, 1.0), mask


def render_sample(cfg: SyntheticConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image, mask) for one index; retries empty masks."""
    for attempt in range(_GEN_RETRIES):
        img, mask = _render_sample(cfg, index, attempt)
        if mask.any():
            return img, mask
    raise RuntimeError(f"no foreground after {_GEN_RETRIES} attempts for sample {index}")


def generate_synthetic(cfg: SyntheticConfig, out_dir: Path | str, split: str = "train") -> DatasetManifest:
    """Write `count` samples plus manifest.tsv into out_dir."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create dataset directory {root}: {e}") from e

    entries = []
    for i in range(cfg.count):
        img, mask = render_sample(cfg, i)
        img_name = f"img_{i:05d}.pgm"
        msk_name = f"msk_{i:05d}.pgm"
        try:
            write_pgm(root / img_name, quantize_unit(img))
            write_pgm(root / msk_name, mask)
        except OSError as e:
            raise RuntimeError(f"failed writing sample files under {root}: {e}") from e
        entries.append(
            ManifestEntry(
                image_path=img_name,
                mask_path=msk_name,
                image_sha=_sha256(root / img_name),
                mask_sha=_sha256(root / msk_name),
            )
        )
    manifest = DatasetManifest(split=split, root=root, entries=tuple(entries))
    write_manifest(manifest, root / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    lines = [f"{e.image_path}\t{e.mask_path}\t{e.image_sha}\t{e.mask_sha}\n" for e in manifest.entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: Path | str, split: str = "") -> DatasetManifest:
    p = Path(path)
    entries = []
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{p}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(*parts))
    return DatasetManifest(split=split or p.stem, root=p.parent, entries=tuple(entries))


def load_samples(manifest: DatasetManifest, verify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Load all samples as (images [n,1,H,W] in [0,1], masks [n,H,W] ints)."""
    if not manifest.entries:
        raise ConfigError("manifest is empty")
    images, masks = [], []
    for e in manifest.entries:
        img_p = manifest.root / e.image_path
        msk_p = manifest.root / e.mask_path
        for p, want in ((img_p, e.image_sha), (msk_p, e.mask_sha)):
            if not p.exists():
                raise RuntimeError(f"manifest entry missing on disk: {p}")
            if verify and _sha256(p) != want:
                raise RuntimeError(f"checksum mismatch for {p}")
        images.append(read_pgm(img_p).astype(np.float64) / 255.0)
        masks.append(read_pgm(msk_p).astype(np.int64))
    return np.stack(images)[:, None, :, :], np.stack(masks)


def select_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle, then the first ceil(fraction * n) entries.

    The shuffle depends only on (n, seed), so smaller fractions are
    prefixes of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(manifest.entries)
    k = int(np.ceil(fraction * n))
    if k < 1:
        raise ConfigError(f"fraction {fraction} of {n} samples selects nothing")
    order = np.random.default_rng(np.random.SeedSequence((seed, 7_917))).permutation(n)
    picked = tuple(manifest.entries[i] for i in order[:k])
    return DatasetManifest(split=manifest.split, root=manifest.root, entries=picked)
