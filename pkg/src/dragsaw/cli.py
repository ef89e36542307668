"""Command-line entry point.

Subcommands: synth, train, eval, rf, affinity, uncertainty, embeddings,
sweep. Configuration is flat ``key = value`` text with ``#`` comments and
dotted keys; precedence is built-in defaults < DRAGSAW_SEED env var <
config file < command-line flags. Exit codes: 0 success, 1 runtime/IO
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .affinity import affinity_matrix, class_ratio_table, grid_sample_coords, VARIANTS
from .checkpoint import load_checkpoint
from .dataio import SyntheticConfig, generate_synthetic, quantize_unit, read_manifest, read_pgm, write_pgm
from .errors import ConfigError
from .geometry import layer_geometry
from .network import SegNetConfig, encoder_stack, forward_with_taps, load_network
from .pdcr import PdcrConfig
from .tensor import Tensor, no_grad
from .trainer import RunConfig, default_test_synth, evaluate, flat_config, fraction_sweep, train

SEED_ENV = "DRAGSAW_SEED"


# ---------------------------------------------------------------------------
# configuration assembly


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_bool(s: str, key: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {s!r}")


def _parse_int_tuple(s: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {s!r}")


def assemble_run_config(overrides: dict[str, str]) -> RunConfig:
    """Overlay string key/values onto the built-in defaults."""
    base = flat_config(RunConfig())
    for key in overrides:
        if key not in base:
            raise ConfigError(f"unknown config key: {key}")
    base.update(overrides)

    def num(key: str, kind):
        try:
            return kind(base[key])
        except ValueError:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {base[key]!r}")

    seed = num("seed", int)
    taps = _parse_int_tuple(base["pdcr.taps"], "pdcr.taps")
    pdcr = PdcrConfig(
        tau=num("pdcr.tau", float),
        lam=num("pdcr.lambda", float),
        n=num("pdcr.n", int),
        tap_layers=taps,
        variant=base["pdcr.variant"],
        include_diagonal=_parse_bool(base["pdcr.include_diagonal"], "pdcr.include_diagonal"),
        denominator=base["pdcr.denominator"],
    )
    if pdcr.variant not in VARIANTS:
        raise ConfigError(f"pdcr.variant: unknown variant {pdcr.variant!r}")
    layers_raw = base["uafs.layers"]
    if layers_raw == "all":
        uafs_layers = None
    elif layers_raw in ("none", ""):
        uafs_layers = ()
    else:
        uafs_layers = tuple(x.strip() for x in layers_raw.split(",") if x.strip())
    num_classes = num("net.classes", int)
    net = SegNetConfig(
        in_channels=num("net.in_channels", int),
        num_classes=num_classes,
        encoder_channels=_parse_int_tuple(base["net.encoder_channels"], "net.encoder_channels"),
        uafs_layers=uafs_layers,
        pdcr_taps=taps,
        detach_uncertainty=_parse_bool(base["uafs.detach"], "uafs.detach"),
        seed=seed,
    )
    synth = SyntheticConfig(
        count=num("data.count", int),
        size=num("data.size", int),
        num_classes=num_classes,
        noise_sigma=num("data.noise_sigma", float),
        texture=_parse_bool(base["data.texture"], "data.texture"),
        seed=num("data.seed", int),
    )
    return RunConfig(
        lr=num("lr", float),
        weight_decay=num("weight_decay", float),
        epochs=num("epochs", int),
        batch_size=num("batch_size", int),
        seed=seed,
        fraction=None if base["fraction"] == "" else num("fraction", float),
        data_dir=base["data.dir"] or None,
        pdcr=pdcr,
        net=net,
        synth=synth,
    )


def _layered_config(config_path: str | None, flag_overrides: dict[str, str]) -> RunConfig:
    kv: dict[str, str] = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        kv["seed"] = env_seed
        kv["data.seed"] = env_seed
    if config_path:
        kv.update(parse_config_text(Path(config_path).read_text(encoding="utf-8"), config_path))
    kv.update(flag_overrides)
    return assemble_run_config(kv)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(count=args.count, size=args.size, num_classes=args.classes, seed=args.seed)
    out = Path(args.out)
    train_m = generate_synthetic(cfg, out / "train", split="train")
    test_count = args.test_count if args.test_count is not None else args.count // 4
    test_m = generate_synthetic(default_test_synth(cfg, test_count), out / "test", split="test")
    print(out / "train" / "manifest.tsv")
    print(out / "test" / "manifest.tsv")
    print(f"wrote {len(train_m)} train and {len(test_m)} test samples")
    return 0


def cmd_train(args) -> int:
    flags: dict[str, str] = {}
    if args.data:
        flags["data.dir"] = args.data
    if args.fraction is not None:
        flags["fraction"] = repr(args.fraction)
    if args.no_pdcr:
        flags["pdcr.lambda"] = "0.0"
        flags["pdcr.taps"] = ""
    if args.no_uafs:
        flags["uafs.layers"] = "none"
    if args.affinity_variant:
        flags["pdcr.variant"] = args.affinity_variant
    cfg = _layered_config(args.config, flags)
    result = train(cfg, args.out)
    last = result.rows[-1]
    print(f"epochs csv: {result.csv_path}")
    print(f"best checkpoint: {result.best_path} (test DI {result.best_di!r})")
    print(f"final: ja={last.test_ja!r} di={last.test_di!r} ac={last.test_ac!r}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    net = load_network(state)
    manifest = read_manifest(Path(args.data) / args.split / "manifest.tsv", split=args.split)
    report = evaluate(net, manifest, per_sample_csv=args.out)
    print(f"ja={report.ja!r} di={report.di!r} ac={report.ac!r} n={report.n_samples}")
    return 0


def cmd_rf(args) -> int:
    cfg = _layered_config(args.config, {})
    stack = encoder_stack(cfg.net, (cfg.synth.size, cfg.synth.size))
    print("block layer r jump start")
    for b in range(1, cfg.net.depth + 1):
        geom = layer_geometry(stack, 2 * b)
        print(f"{b} {2 * b} {geom.r} {geom.jump} {geom.start}")
    return 0


def cmd_affinity(args) -> int:
    mask = read_pgm(args.mask).astype(np.int64)
    net_cfg = SegNetConfig(num_classes=max(args.classes, int(mask.max()) + 1))
    if not 1 <= args.block <= net_cfg.depth:
        raise ConfigError(f"block {args.block} outside encoder blocks 1..{net_cfg.depth}")
    stack = encoder_stack(net_cfg, mask.shape)
    layer = 2 * args.block
    geom = layer_geometry(stack, layer)
    grid = grid_sample_coords(stack.hidden_extent(layer), args.n)
    w = affinity_matrix(mask, grid, geom, net_cfg.num_classes, args.variant)
    ratios = class_ratio_table(mask, grid.coords, geom, net_cfg.num_classes)
    m = net_cfg.num_classes
    header = (
        "row,col,w,"
        + ",".join(f"phi_i_{c}" for c in range(m))
        + ","
        + ",".join(f"phi_j_{c}" for c in range(m))
    )
    lines = [header + "\n"]
    n = len(grid.coords)
    for i in range(n):
        for j in range(n):
            phi_i = ",".join(repr(float(v)) for v in ratios[i])
            phi_j = ",".join(repr(float(v)) for v in ratios[j])
            lines.append(f"{i},{j},{float(w[i, j])!r},{phi_i},{phi_j}\n")
    Path(args.out).write_text("".join(lines), encoding="utf-8")
    print(f"wrote {n * n} pairs to {args.out}")
    return 0


def cmd_uncertainty(args) -> int:
    net = load_network(load_checkpoint(args.checkpoint))
    img = read_pgm(args.image).astype(np.float64) / 255.0
    x = Tensor(img[None, None, :, :])
    maps: dict[str, Tensor] = {}
    with no_grad():
        forward_with_taps(net, x, training=False, uncertainty_out=maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, u in maps.items():
        write_pgm(out / f"uncertainty_{name}.pgm", quantize_unit(u.data[0, 0]))
    print(f"wrote {len(maps)} uncertainty maps to {out}")
    return 0


def cmd_embeddings(args) -> int:
    state = load_checkpoint(args.checkpoint)
    net = load_network(state)
    blocks = _parse_int_tuple(args.blocks, "--blocks")
    net.cfg = replace(net.cfg, pdcr_taps=blocks)
    img = read_pgm(args.image).astype(np.float64) / 255.0
    x = Tensor(img[None, None, :, :])
    with no_grad():
        _, taps = forward_with_taps(net, x, training=False)
    lines = []
    for b in blocks:
        tap = taps[b].data[0]
        grid = grid_sample_coords((tap.shape[1], tap.shape[2]), args.n)
        for i, (y, xx) in enumerate(grid.coords):
            vec = ",".join(repr(float(v)) for v in tap[:, y, xx])
            lines.append(f"{b},{i},{y},{xx},{vec}\n")
    Path(args.out).write_text("".join(lines), encoding="utf-8")
    print(f"wrote {len(lines)} vectors to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _layered_config(args.config, {"data.dir": args.data} if args.data else {})
    fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    path = fraction_sweep(cfg, fractions, args.out)
    print(f"sweep csv: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dragsaw", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset (train + test splits)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=400)
    s.add_argument("--test-count", type=int, default=None)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a segmentation network")
    s.add_argument("--config", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--fraction", type=float, default=None)
    s.add_argument("--no-pdcr", action="store_true")
    s.add_argument("--no-uafs", action="store_true")
    s.add_argument("--affinity-variant", default=None, choices=VARIANTS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rf", help="print per-block receptive-field table")
    s.add_argument("--config", default=None)
    s.set_defaults(func=cmd_rf)

    s = sub.add_parser("affinity", help="dump an affinity matrix as CSV")
    s.add_argument("--mask", required=True)
    s.add_argument("--block", type=int, required=True)
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--variant", default="continuous", choices=VARIANTS)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_affinity)

    s = sub.add_parser("uncertainty", help="export per-layer uncertainty maps as PGM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_uncertainty)

    s = sub.add_parser("embeddings", help="export sampled hidden vectors as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--blocks", default="2,3,4")
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embeddings)

    s = sub.add_parser("sweep", help="limited-data fraction sweep")
    s.add_argument("--config", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--fractions", default="0.05,0.1,0.25,0.5,1.0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
