"""End-to-end acceptance gate.

Each test covers one numbered criterion and prints a PASS line on
success (run with ``pytest tests/test_acceptance.py -v -s``). The two
20-epoch training runs and the determinism rerun are shared session
fixtures; expect the full module to take roughly 40-50 minutes on 2 CPU
cores.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dragsaw import tensor as T
from dragsaw.affinity import SampleGrid, affinity_matrix, grid_sample_coords
from dragsaw.checkpoint import load_checkpoint, save_checkpoint
from dragsaw.dataio import SyntheticConfig, generate_synthetic, quantize_unit, read_pgm, write_pgm
from dragsaw.geometry import LayerGeometry, layer_geometry, patch_bounds, rf_size
from dragsaw.network import SegNetConfig, forward_with_taps, init_parameters
from dragsaw.pdcr import PdcrConfig, cosine_similarity_matrix, pdcr_layer_loss
from dragsaw.tensor import Tensor
from dragsaw.trainer import RunConfig, cosine_lr, fraction_sweep, total_loss, train
from dragsaw.uafs import entropy_map, init_head, select_features, uafs_gate

from test_geometry import _dependency, _random_valid_stack
from test_pdcr import naive_dragsaw_loss

BASELINE_MIN_DI = 0.85          # criterion 8b, pinned
COMBINED_DI_SLACK = 0.02        # criterion 8c, pinned


def _progress(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# shared fixtures: the default dataset and the three 20-epoch runs


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    cfg = SyntheticConfig(count=400, size=64, num_classes=2, seed=42)
    _progress("[acceptance] generating default synthetic set (400 train / 100 test) ...")
    train_m = generate_synthetic(cfg, root / "train", split="train")
    test_m = generate_synthetic(replace(cfg, count=100, seed=43), root / "test", split="test")
    return train_m, test_m


def _default_config(**kw):
    return RunConfig(seed=42, **kw)


def _baseline_config():
    return _default_config(
        pdcr=PdcrConfig(lam=0.0, tap_layers=()),
        net=SegNetConfig(uafs_layers=(), pdcr_taps=(), seed=42),
    )


@pytest.fixture(scope="session")
def baseline_run(default_dataset, tmp_path_factory):
    train_m, test_m = default_dataset
    out = tmp_path_factory.mktemp("run_baseline")
    _progress("[acceptance] training baseline (20 epochs) ...")
    t0 = time.perf_counter()
    result = train(_baseline_config(), out, train_manifest=train_m, test_manifest=test_m)
    _progress(f"[acceptance] baseline done in {time.perf_counter() - t0:.0f}s, best DI {result.best_di:.4f}")
    return result


@pytest.fixture(scope="session")
def combined_run(default_dataset, tmp_path_factory):
    train_m, test_m = default_dataset
    out = tmp_path_factory.mktemp("run_combined")
    _progress("[acceptance] training PDCR+UAFS (20 epochs) ...")
    t0 = time.perf_counter()
    result = train(_default_config(), out, train_manifest=train_m, test_manifest=test_m)
    _progress(f"[acceptance] combined done in {time.perf_counter() - t0:.0f}s, best DI {result.best_di:.4f}")
    return result


@pytest.fixture(scope="session")
def combined_rerun(default_dataset, tmp_path_factory):
    train_m, test_m = default_dataset
    out = tmp_path_factory.mktemp("run_combined_again")
    _progress("[acceptance] re-running PDCR+UAFS for determinism check ...")
    result = train(_default_config(), out, train_manifest=train_m, test_manifest=test_m)
    return result


# ---------------------------------------------------------------------------
# criteria


def test_c01_pdcr_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    for trial in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 7))
        vectors = rng.normal(size=(n, d))
        w = rng.uniform(size=(n, n))
        w = (w + w.T) / 2.0
        np.fill_diagonal(w, 1.0)
        tau = float(rng.uniform(0.2, 2.0))
        loss = pdcr_layer_loss(cosine_similarity_matrix(Tensor(vectors)), w, tau).item()
        ref = naive_dragsaw_loss(vectors.tolist(), w.tolist(), tau)
        assert abs(loss - ref) <= 1e-10, (trial, n, loss, ref)
    wall = time.perf_counter() - t0
    assert wall < 5.0, f"200 oracle trials took {wall:.1f}s"
    print(f"PASS criterion 1: vectorized loss == Algorithm-1 loop on 200 trials ({wall:.2f}s)")


def test_c02_hand_computed_loss_case():
    vectors = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    w = np.eye(2)
    loss = pdcr_layer_loss(cosine_similarity_matrix(vectors), w, tau=1.0).item()
    expected = 2.0 * (math.log(2.0) - 1.0) + 2.0 * math.log(2.0)
    assert abs(loss - expected) <= 1e-12
    print(f"PASS criterion 2: n=2 orthogonal case = 2(ln2-1)+2ln2 ({loss:.12f})")


def test_c03_receptive_field_oracle():
    rng = np.random.default_rng(20240)
    image_size = (14, 14)
    t0 = time.perf_counter()
    for trial in range(20):
        spec, layers = _random_valid_stack(rng, image_size)
        influence, (ho, wo) = _dependency(layers, image_size)
        geom = layer_geometry(spec, spec.depth)
        assert geom.r == rf_size(spec, spec.depth)
        for uy in range(ho):
            for ux in range(wo):
                rect = patch_bounds(geom, (uy, ux), image_size)
                mask = np.zeros(image_size, dtype=bool)
                mask[rect.top : rect.bottom, rect.left : rect.right] = True
                got = influence[:, uy * wo + ux].reshape(image_size)
                assert np.array_equal(got, mask), (trial, layers, (uy, ux))
    wall = time.perf_counter() - t0
    assert wall < 30.0, f"dependency oracle took {wall:.1f}s"
    print(f"PASS criterion 3: receptive fields match dependency oracle on 20 stacks ({wall:.2f}s)")


def test_c04_gradient_suite():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()

    # (a) primitives at 1e-6
    checks = {
        "relu": lambda t: T.tsum(T.relu(t)),
        "exp": lambda t: T.tsum(T.exp(t)),
        "log": lambda t: T.tsum(T.log(t)),
        "sqrt": lambda t: T.tsum(T.sqrt(t)),
        "xlogx": lambda t: T.tsum(T.xlogx(t)),
        "mean": lambda t: T.tsum(T.tmean(t, axis=0)),
        "logsumexp": lambda t: T.tsum(T.logsumexp(t, axis=1)),
        "matmul": lambda t: T.tsum(T.matmul(t, T.transpose2d(t))),
    }
    for name, f in checks.items():
        base = np.abs(rng.normal(size=(4, 5))) + 0.5
        report = T.grad_check(f, Tensor(base, requires_grad=True), tol=1e-6)
        assert report.passed, (name, report)
    conv_w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    conv_b = Tensor(np.zeros(3), requires_grad=True)
    conv_x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    weights = np.asarray(rng.normal(size=(1, 3, 3, 3)))
    f_conv = lambda t: T.tsum(T.mul(T.conv2d(conv_x, conv_w, conv_b, 2, 1), weights))
    for tgt in (conv_x, conv_w, conv_b):
        report = T.grad_check(f_conv, tgt, tol=1e-6)
        assert report.passed, ("conv2d", report)
    up_x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    report = T.grad_check(lambda t: T.tsum(T.mul(T.upsample_nearest2x(t), 0.7)), up_x, tol=1e-6)
    assert report.passed, ("upsample", report)

    # (b) layer loss w.r.t. feature vectors
    vectors = Tensor(rng.normal(size=(5, 4)) + 1.0, requires_grad=True)
    w = rng.uniform(size=(5, 5))
    w = (w + w.T) / 2.0
    np.fill_diagonal(w, 1.0)
    report = T.grad_check(lambda t: pdcr_layer_loss(cosine_similarity_matrix(t), w, 0.5), vectors, tol=1e-4)
    assert report.passed, ("pdcr", report)

    # (c) gated forward w.r.t. features and every head parameter; the base
    # point must keep every relu away from its kink for central differences
    def find_gate_case():
        for seed in range(100):
            local = np.random.default_rng((404, seed))
            head = init_head(channels=3, num_classes=2, rng=local)
            head.conv2_w.data[...] = local.normal(size=head.conv2_w.shape) * 0.3
            h = Tensor(local.normal(size=(1, 3, 4, 4)), requires_grad=True)
            mix = np.asarray(local.normal(size=(1, 3, 4, 4)))
            with T.track_relu_margins() as margins:
                uafs_gate(h, head, training=True, update_stats=False)
            if min(margins) > 1e-3:
                return head, h, mix
        raise AssertionError("no kink-free base point found for the gate check")

    head, h, mix = find_gate_case()

    def f_gate(_):
        gated, _u = uafs_gate(h, head, training=True, update_stats=False)
        return T.tsum(T.mul(gated, mix))

    for tgt in (h, head.conv1_w, head.conv1_b, head.bn_gamma, head.bn_beta, head.conv2_w, head.conv2_b):
        report = T.grad_check(f_gate, tgt, tol=1e-4)
        assert report.passed, ("uafs", report)

    # (d) the full objective on a 2-block net with 8x8 input, all parameters
    def find_net_case():
        for seed in range(100):
            local = np.random.default_rng((1717, seed))
            net = init_parameters(SegNetConfig(encoder_channels=(3, 4), pdcr_taps=(1, 2), seed=seed))
            x = Tensor(local.uniform(size=(1, 1, 8, 8)))
            masks = local.integers(0, 2, size=(1, 8, 8))
            with T.track_relu_margins() as margins:
                forward_with_taps(net, x, training=True, update_stats=False)
            if min(margins) > 1e-3:
                return net, x, masks
        raise AssertionError("no kink-free base point found for the full-objective check")

    net, x, masks = find_net_case()
    cfg = PdcrConfig(lam=0.1, n=4, tap_layers=(1, 2))

    def f_total(_):
        logits, taps = forward_with_taps(net, x, training=True, update_stats=False)
        return total_loss(logits, taps, masks, cfg, net.tap_geometries).total

    n_checked = 0
    for name, t in net.named_params():
        report = T.grad_check(f_total, t, step=1e-5, tol=1e-4)
        assert report.passed, (name, report)
        n_checked += t.size
    wall = time.perf_counter() - t0
    assert wall < 120.0, f"gradient suite took {wall:.1f}s"
    print(f"PASS criterion 4: gradient suite ({n_checked} full-objective params, {wall:.1f}s)")


def test_c05_affinity_invariants():
    rng = np.random.default_rng(505)
    mask = rng.integers(0, 2, size=(16, 16))
    geom = LayerGeometry(r=5, jump=2, start=0)
    grid = grid_sample_coords((8, 8), 9)
    w = affinity_matrix(mask, grid, geom, 2, "continuous")
    assert_array_equal(w, w.T)
    assert w.min() >= 0.0 and w.max() <= 1.0
    assert_allclose(np.diag(w), 1.0, atol=0)

    const = affinity_matrix(mask, grid, geom, 2, "constant")
    assert_array_equal(const, np.full((9, 9), 0.5))
    diag = affinity_matrix(mask, grid, geom, 2, "diagonal")
    assert_array_equal(diag, np.eye(9))

    half = np.zeros((16, 16), dtype=np.int64)
    half[:, 8:] = 1
    unit = LayerGeometry(r=1, jump=1, start=0)
    pick = SampleGrid(((3, 2), (9, 4), (4, 11), (12, 13)))
    bip = affinity_matrix(half, pick, unit, 2, "bipartite")
    assert_array_equal(bip, np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], dtype=float))
    print("PASS criterion 5: affinity invariants (symmetry, range, diagonal, variants)")


def test_c06_entropy_invariants():
    one_hot = Tensor(np.array([1.0, 0.0, 0.0]).reshape(1, 3, 1, 1))
    assert abs(entropy_map(one_hot).item() - 0.0) <= 1e-12
    for m in (2, 3, 4):
        uniform = Tensor(np.full((1, m, 1, 1), 1.0 / m))
        assert abs(entropy_map(uniform).item() - 1.0) <= 1e-12
    hand = Tensor(np.array([0.75, 0.25]).reshape(1, 2, 1, 1))
    assert abs(entropy_map(hand).item() - 0.811278) <= 1e-6

    rng = np.random.default_rng(606)
    a = T.channel_softmax(Tensor(rng.normal(size=(2, 3, 8, 8)) * 6))
    u = entropy_map(a)
    h = Tensor(np.ones((2, 3, 8, 8)))
    scale = select_features(h, u).data
    assert scale.min() >= 1.0 - 1e-12 and scale.max() <= 2.0 + 1e-12
    print("PASS criterion 6: entropy invariants and gate scale bounds")


def test_c07_zero_init_noop():
    rng = np.random.default_rng(707)
    gated = init_parameters(SegNetConfig(seed=42))
    plain = init_parameters(SegNetConfig(seed=42, uafs_layers=()))
    x = Tensor(rng.uniform(size=(1, 1, 64, 64)))
    with T.no_grad():
        la, _ = forward_with_taps(gated, x, training=False)
        lb, _ = forward_with_taps(plain, x, training=False)
    assert np.array_equal(la.data, lb.data)
    print("PASS criterion 7: zero-initialized gates leave logits bit-identical")


def test_c08_training_sanity(baseline_run, combined_run):
    for result, label in ((baseline_run, "baseline"), (combined_run, "pdcr+uafs")):
        for row in result.rows:
            assert np.isfinite(row.train_ce), (label, row.epoch)
            assert np.isfinite(row.train_pdcr), (label, row.epoch)
            for v in (row.test_ja, row.test_di, row.test_ac):
                assert np.isfinite(v), (label, row.epoch)
    assert baseline_run.best_di >= BASELINE_MIN_DI, f"baseline best DI {baseline_run.best_di:.4f} < {BASELINE_MIN_DI}"
    assert combined_run.best_di >= baseline_run.best_di - COMBINED_DI_SLACK, (
        f"combined best DI {combined_run.best_di:.4f} vs baseline {baseline_run.best_di:.4f}"
    )
    print(
        "PASS criterion 8: finite losses; baseline DI "
        f"{baseline_run.best_di:.4f} >= {BASELINE_MIN_DI}; combined DI {combined_run.best_di:.4f} "
        f">= baseline - {COMBINED_DI_SLACK}"
    )


def test_c09_determinism(combined_run, combined_rerun):
    a = combined_run.csv_path.read_bytes()
    b = combined_rerun.csv_path.read_bytes()
    assert a == b, "per-epoch CSVs differ between identical runs"
    print(f"PASS criterion 9: identical configs give byte-identical per-epoch CSVs ({len(a)} bytes)")


def test_c10_fraction_sweep(default_dataset, tmp_path_factory):
    train_m, test_m = default_dataset
    out_dir = tmp_path_factory.mktemp("sweep")
    # protocol check at reduced depth: 3 epochs keeps the five runs tractable
    cfg = _default_config(epochs=3, data_dir=str(train_m.root.parent))
    _progress("[acceptance] fraction sweep {0.05, 0.1, 0.25, 0.5, 1.0} at 3 epochs ...")
    csv_path = fraction_sweep(cfg, [0.05, 0.1, 0.25, 0.5, 1.0], out_dir / "sweep.csv")
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "fraction,n_train,ja,di,ac,wall_seconds"
    assert len(lines) == 6
    n_train = [int(l.split(",")[1]) for l in lines[1:]]
    assert n_train == sorted(n_train)
    assert n_train == [20, 40, 100, 200, 400]
    for line in lines[1:]:
        fields = line.split(",")
        assert all(np.isfinite(float(v)) for v in fields[2:5])
        print(f"  sweep row: {line}")
    print("PASS criterion 10: sweep completes with schema-conformant CSV and nested subsets")


def test_c11_metric_identities(baseline_run, combined_run):
    from dragsaw.trainer import compute_metrics

    for result in (baseline_run, combined_run):
        for row in result.rows:
            assert row.test_di >= row.test_ja - 1e-15, row

    truth = np.zeros((1, 6, 6), dtype=np.int64)
    truth[0, :, :4] = 1  # 24 pixels
    pred = np.zeros((1, 6, 6), dtype=np.int64)
    pred[0, :, :2] = 1  # half of them, no false positives
    rep = compute_metrics(pred, truth, 2)
    assert rep.di == 2.0 / 3.0
    assert rep.ja == 0.5
    print("PASS criterion 11: DI >= JA on every row; half-overlap case exact")


def test_c12_io_bit_exactness(tmp_path):
    rng = np.random.default_rng(1212)
    img = rng.integers(0, 256, size=(33, 17)).astype(np.uint8)
    p = tmp_path / "img.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_pgm(p), img)

    real = rng.uniform(size=(8, 8))
    q = tmp_path / "real.pgm"
    write_pgm(q, quantize_unit(real))
    assert np.array_equal(read_pgm(q), quantize_unit(real))

    net = init_parameters(SegNetConfig(encoder_channels=(4, 6), pdcr_taps=(1, 2), seed=3))
    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(c1, net.state_dict())
    save_checkpoint(c2, load_checkpoint(c1))
    assert c1.read_bytes() == c2.read_bytes()
    print("PASS criterion 12: PGM round trip lossless; checkpoint write-read-write byte-identical")
