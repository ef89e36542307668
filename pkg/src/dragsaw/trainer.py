"""Training loop, optimizer, metrics, and the limited-data sweep.

The objective is pixel cross-entropy plus lambda times the dragsaw loss.
Optimization is Adam (lr 0.001, betas 0.9/0.999) with decoupled weight
decay 1e-5 and a cosine schedule from the base rate to zero over the
configured epochs. Runs are bit-reproducible for a fixed RunConfig.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .dataio import DatasetManifest, SyntheticConfig, generate_synthetic, load_samples, read_manifest, select_fraction
from .errors import ConfigError
from .network import SegNet, SegNetConfig, forward_with_taps, init_parameters, predict_mask
from .pdcr import PdcrConfig, PdcrStats, pdcr_total_loss
from .tensor import Tensor

EPOCH_CSV_HEADER = "epoch,lr,train_ce,train_pdcr,test_ja,test_di,test_ac"
PER_SAMPLE_HEADER = "sample,ja,di,ac"


@dataclass(frozen=True)
class RunConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 8
    seed: int = 42
    fraction: float | None = None
    data_dir: str | None = None
    pdcr: PdcrConfig = field(default_factory=PdcrConfig)
    net: SegNetConfig = field(default_factory=SegNetConfig)
    synth: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(count=400, seed=42))

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def flat_config(cfg: RunConfig) -> "OrderedDict[str, str]":
    """Serialize every effective hyperparameter as flat dotted key = value."""

    def fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return "" if v is None else str(v)

    out: "OrderedDict[str, str]" = OrderedDict()
    out["seed"] = fmt(cfg.seed)
    out["epochs"] = fmt(cfg.epochs)
    out["batch_size"] = fmt(cfg.batch_size)
    out["lr"] = fmt(cfg.lr)
    out["weight_decay"] = fmt(cfg.weight_decay)
    out["fraction"] = fmt(cfg.fraction)
    out["pdcr.tau"] = fmt(cfg.pdcr.tau)
    out["pdcr.lambda"] = fmt(cfg.pdcr.lam)
    out["pdcr.n"] = fmt(cfg.pdcr.n)
    out["pdcr.taps"] = fmt(cfg.pdcr.tap_layers)
    out["pdcr.variant"] = cfg.pdcr.variant
    out["pdcr.include_diagonal"] = fmt(cfg.pdcr.include_diagonal)
    out["pdcr.denominator"] = cfg.pdcr.denominator
    out["uafs.layers"] = "all" if cfg.net.uafs_layers is None else (fmt(cfg.net.uafs_layers) or "none")
    out["uafs.detach"] = fmt(cfg.net.detach_uncertainty)
    out["net.in_channels"] = fmt(cfg.net.in_channels)
    out["net.classes"] = fmt(cfg.net.num_classes)
    out["net.encoder_channels"] = fmt(cfg.net.encoder_channels)
    out["data.dir"] = fmt(cfg.data_dir)
    out["data.count"] = fmt(cfg.synth.count)
    out["data.size"] = fmt(cfg.synth.size)
    out["data.noise_sigma"] = fmt(cfg.synth.noise_sigma)
    out["data.texture"] = fmt(cfg.synth.texture)
    out["data.seed"] = fmt(cfg.synth.seed)
    return out


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax probability of the true class."""
    B, M, H, W = logits.data.shape
    if masks.shape != (B, H, W):
        raise ConfigError(f"mask shape {masks.shape} != {(B, H, W)}")
    if masks.min() < 0 or masks.max() >= M:
        raise ConfigError(f"mask classes outside [0, {M})")
    onehot = np.zeros((B, M, H, W))
    b_idx, h_idx, w_idx = np.meshgrid(np.arange(B), np.arange(H), np.arange(W), indexing="ij")
    onehot[b_idx, masks, h_idx, w_idx] = 1.0
    lse = T.logsumexp(logits, axis=1)  # (B,H,W)
    picked = T.tsum(T.mul(logits, onehot), axis=1)
    return T.tmean(T.sub(lse, picked))


@dataclass
class LossParts:
    total: Tensor
    ce: float
    pdcr: float


def total_loss(
    logits: Tensor,
    taps: dict[int, Tensor],
    masks: np.ndarray,
    pdcr_cfg: PdcrConfig,
    geoms,
    stats: PdcrStats | None = None,
) -> LossParts:
    """CE plus lambda * dragsaw loss; lambda = 0 is exactly CE."""
    ce = cross_entropy_loss(logits, masks)
    if pdcr_cfg.lam == 0.0 or not pdcr_cfg.tap_layers:
        return LossParts(total=ce, ce=float(ce.data), pdcr=0.0)
    pd = pdcr_total_loss(taps, masks, pdcr_cfg, geoms, stats=stats)
    return LossParts(total=T.add(ce, T.mul(pd, pdcr_cfg.lam)), ce=float(ce.data), pdcr=float(pd.data))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr_t: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam with decoupled weight decay."""
    state.t += 1
    if weight_decay:
        param *= 1.0 - lr_t * weight_decay
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    param -= lr_t * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at t = 0 to 0 at t = total."""
    if total <= 0:
        return lr0
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return float(lr0 * (1.0 + np.cos(np.pi * t / total)) / 2.0)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    ja: float
    di: float
    ac: float
    per_class_ja: tuple[float, ...]
    per_class_di: tuple[float, ...]
    n_samples: int


def _class_scores(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> tuple[list[float], list[float], float]:
    """Foreground-class JA/DI from aggregated counts plus overall accuracy."""
    jas, dis = [], []
    for c in range(1, num_classes):
        tp = int(np.count_nonzero((pred == c) & (truth == c)))
        fp = int(np.count_nonzero((pred == c) & (truth != c)))
        fn = int(np.count_nonzero((pred != c) & (truth == c)))
        if tp + fp + fn == 0:
            jas.append(1.0)
            dis.append(1.0)
        else:
            jas.append(tp / (tp + fp + fn))
            dis.append(2 * tp / (2 * tp + fp + fn))
    ac = float(np.count_nonzero(pred == truth)) / truth.size
    return jas, dis, ac


def compute_metrics(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> MetricsReport:
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction shape {pred.shape} != truth {truth.shape}")
    jas, dis, ac = _class_scores(pred, truth, num_classes)
    return MetricsReport(
        ja=float(np.mean(jas)),
        di=float(np.mean(dis)),
        ac=ac,
        per_class_ja=tuple(jas),
        per_class_di=tuple(dis),
        n_samples=pred.shape[0] if pred.ndim == 3 else 1,
    )


def _predict_all(net: SegNet, images: np.ndarray, batch_size: int) -> np.ndarray:
    preds = []
    with T.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            x = Tensor(images[lo : lo + batch_size])
            logits, _ = forward_with_taps(net, x, training=False)
            preds.append(predict_mask(logits))
    return np.concatenate(preds)


def evaluate(
    net: SegNet,
    manifest: DatasetManifest,
    batch_size: int = 8,
    per_sample_csv: Path | str | None = None,
) -> MetricsReport:
    """Dataset-aggregated JA/DI/AC in eval mode; optional per-sample rows."""
    images, masks = load_samples(manifest)
    return evaluate_arrays(net, images, masks, batch_size, per_sample_csv, names=[e.image_path for e in manifest.entries])


def evaluate_arrays(
    net: SegNet,
    images: np.ndarray,
    masks: np.ndarray,
    batch_size: int = 8,
    per_sample_csv: Path | str | None = None,
    names: list[str] | None = None,
) -> MetricsReport:
    preds = _predict_all(net, images, batch_size)
    report = compute_metrics(preds, masks, net.cfg.num_classes)
    if per_sample_csv is not None:
        lines = [PER_SAMPLE_HEADER + "\n"]
        for i in range(preds.shape[0]):
            jas, dis, ac = _class_scores(preds[i], masks[i], net.cfg.num_classes)
            label = names[i] if names else str(i)
            lines.append(f"{label},{float(np.mean(jas))!r},{float(np.mean(dis))!r},{ac!r}\n")
        Path(per_sample_csv).write_text("".join(lines), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_ce: float
    train_pdcr: float
    test_ja: float
    test_di: float
    test_ac: float

    def format(self) -> str:
        return (
            f"{self.epoch},{self.lr!r},{self.train_ce!r},{self.train_pdcr!r},"
            f"{self.test_ja!r},{self.test_di!r},{self.test_ac!r}"
        )


@dataclass
class TrainResult:
    out_dir: Path
    csv_path: Path
    best_path: Path
    final_path: Path
    best_di: float
    rows: list[EpochRow]


def default_test_synth(synth: SyntheticConfig, test_count: int | None = None) -> SyntheticConfig:
    """Held-out split config: quarter-size by default, disjoint seed stream."""
    count = test_count if test_count is not None else max(1, synth.count // 4)
    return replace(synth, count=count, seed=synth.seed + 1)


def resolve_data(cfg: RunConfig, out_dir: Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Read manifests from cfg.data_dir, or synthesize under out_dir/data."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        train_m = read_manifest(root / "train" / "manifest.tsv", split="train")
        test_m = read_manifest(root / "test" / "manifest.tsv", split="test")
        return train_m, test_m
    data_root = out_dir / "data"
    train_m = generate_synthetic(cfg.synth, data_root / "train", split="train")
    test_m = generate_synthetic(default_test_synth(cfg.synth), data_root / "test", split="test")
    return train_m, test_m


def _dump_abort_state(net: SegNet, out_dir: Path) -> Path:
    path = out_dir / "abort_state.ckpt"
    save_checkpoint(path, net.state_dict())
    return path


def train(
    cfg: RunConfig,
    out_dir: Path | str,
    train_manifest: DatasetManifest | None = None,
    test_manifest: DatasetManifest | None = None,
) -> TrainResult:
    """Full optimization run; deterministic for a fixed cfg.

    Writes config.txt (flat snapshot), epochs.csv, best.ckpt (highest test
    DI), and final.ckpt. Aborts with the state dumped if any loss goes
    non-finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_manifest is None or test_manifest is None:
        train_manifest, test_manifest = resolve_data(cfg, out)
    if cfg.fraction is not None:
        train_manifest = select_fraction(train_manifest, cfg.fraction, cfg.seed)

    snapshot = flat_config(cfg)
    (out / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in snapshot.items()), encoding="utf-8"
    )

    train_x, train_y = load_samples(train_manifest)
    test_x, test_y = load_samples(test_manifest)

    net_cfg = replace(cfg.net, pdcr_taps=cfg.pdcr.tap_layers if cfg.pdcr.lam > 0 else ())
    net = init_parameters(net_cfg)
    params = list(net.named_params())
    states = {name: AdamState.like(t.data) for name, t in params}

    csv_path = out / "epochs.csv"
    best_path = out / "best.ckpt"
    final_path = out / "final.ckpt"
    rows: list[EpochRow] = []
    best_di = -1.0

    def eval_row(epoch: int, lr_t: float, ce: float, pd: float) -> EpochRow:
        rep = evaluate_arrays(net, test_x, test_y, cfg.batch_size)
        return EpochRow(epoch, lr_t, ce, pd, rep.ja, rep.di, rep.ac)

    if cfg.epochs == 0:
        row = eval_row(0, cosine_lr(0, 0, cfg.lr), float("nan"), float("nan"))
        rows.append(row)
        best_di = row.test_di
        save_checkpoint(best_path, net.state_dict())
    n = train_x.shape[0]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr_t = cosine_lr(epoch - 1, cfg.epochs, cfg.lr)
        ce_sum = 0.0
        pd_sum = 0.0
        n_steps = 0
        for lo in range(0, n, cfg.batch_size):
            x = Tensor(train_x[lo : lo + cfg.batch_size])
            y = train_y[lo : lo + cfg.batch_size]
            logits, taps = forward_with_taps(net, x, training=True)
            parts = total_loss(logits, taps, y, cfg.pdcr, net.tap_geometries)
            if not np.isfinite(parts.total.data).all():
                dump = _dump_abort_state(net, out)
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"ce={parts.ce} pdcr={parts.pdcr}; state dumped to {dump}"
                )
            for _, t in params:
                t.zero_grad()
            T.backward(parts.total)
            for name, t in params:
                if t.grad is not None:
                    adam_step(
                        t.data, t.grad, states[name], lr_t,
                        cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps,
                    )
            ce_sum += parts.ce
            pd_sum += parts.pdcr
            n_steps += 1
            step += 1
        row = eval_row(epoch, lr_t, ce_sum / n_steps, pd_sum / n_steps)
        rows.append(row)
        if row.test_di > best_di:
            best_di = row.test_di
            save_checkpoint(best_path, net.state_dict())

    save_checkpoint(final_path, net.state_dict())
    csv_path.write_text(
        EPOCH_CSV_HEADER + "\n" + "".join(r.format() + "\n" for r in rows), encoding="utf-8"
    )
    return TrainResult(out, csv_path, best_path, final_path, best_di, rows)


SWEEP_CSV_HEADER = "fraction,n_train,ja,di,ac,wall_seconds"


def fraction_sweep(cfg: RunConfig, fractions: list[float], out_csv: Path | str) -> Path:
    """One full train+eval per fraction over nested prefix subsets."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    base_out = out_csv.parent / "sweep_runs"
    train_m, test_m = resolve_data(cfg, base_out)

    subsets: dict[float, DatasetManifest | None] = {}
    for frac in fractions:
        try:
            subsets[frac] = select_fraction(train_m, frac, cfg.seed)
        except ConfigError:
            subsets[frac] = None
    ordered = sorted((s for s in subsets.values() if s is not None), key=len)
    for small, big in zip(ordered, ordered[1:]):
        if big.entries[: len(small)] != small.entries:
            raise RuntimeError("fraction subsets are not nested prefixes")

    lines = [SWEEP_CSV_HEADER + "\n"]
    for frac in fractions:
        subset = subsets[frac]
        if subset is None:
            lines.append(f"{frac!r},0,nan,nan,nan,0.0\n")
            continue
        t0 = time.perf_counter()
        run_cfg = replace(cfg, fraction=None)
        result = train(run_cfg, base_out / f"frac_{frac:g}", train_manifest=subset, test_manifest=test_m)
        wall = time.perf_counter() - t0
        last = result.rows[-1]
        lines.append(f"{frac!r},{len(subset)},{last.test_ja!r},{last.test_di!r},{last.test_ac!r},{wall!r}\n")
    out_csv.write_text("".join(lines), encoding="utf-8")
    return out_csv
