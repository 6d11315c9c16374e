"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test records one PASS/FAIL line, printed in the terminal summary
(and immediately with ``pytest -s``).
"""

import io
import math
import time

import numpy as np
import pytest

from grjointnet import autodiff as ad
from grjointnet.autodiff import Tensor
from grjointnet.cli import main
from grjointnet.config import RunConfig
from grjointnet.core import GridCoordMap, LabeledPointCloud, make_rng
from grjointnet.gradcheck import run_all
from grjointnet.gridding import corner_weights, gridding, gridding_reverse
from grjointnet.harness import evaluate, load_pairs, train
from grjointnet.losses import chamfer_terms, combined_loss, cross_entropy, nearest_brute
from grjointnet.network import init_params
from grjointnet.core import derive_seed

from conftest import ACCEPTANCE_LINES


def record(name, passed, detail):
    ACCEPTANCE_LINES.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, detail


def test_partition_of_unity():
    rng = make_rng(1)
    start = time.perf_counter()
    pts = rng.uniform(-1, 1, (10_000, 3))
    err = float(np.max(np.abs(corner_weights(pts, 16).sum(axis=1) - 1.0)))
    elapsed = time.perf_counter() - start
    record("partition of unity", err <= 1e-12 and elapsed < 1.0,
           f"max |sum-1| = {err:.2e} (<= 1e-12), {elapsed:.3f} s (< 1 s)")


def test_single_point_roundtrip():
    rng = make_rng(2)
    n = 16
    pts = rng.uniform(-1 + 1e-6, 1 - 1e-6, (1000, 3))
    start = time.perf_counter()
    worst = 0.0
    cmap = GridCoordMap(n)
    for p in pts:
        out, cells = gridding_reverse(gridding(p[None], n), return_cells=True)
        c = cmap.cell(p[None])[0]
        own = (c[2] * (n - 1) + c[1]) * (n - 1) + c[0]
        k = int(np.searchsorted(cells, own))
        worst = max(worst, float(np.max(np.abs(out.data[k] - p))))
    elapsed = time.perf_counter() - start
    record("single-point roundtrip", worst <= 1e-12 and elapsed < 1.0,
           f"max coordinate error {worst:.2e} (<= 1e-12), {elapsed:.3f} s (< 1 s)")


def test_chamfer_oracle_equivalence():
    rng = make_rng(3)
    start = time.perf_counter()
    worst = sym = trans = 0.0
    for _ in range(100):
        g = rng.uniform(-1, 1, (int(rng.integers(1, 513)), 3))
        m = rng.uniform(-1, 1, (int(rng.integers(1, 513)), 3))
        d = ((g[:, None, :] - m[None, :, :]) ** 2).sum(-1)
        brute = d.min(axis=1).mean() + d.min(axis=0).mean()
        fast = sum(chamfer_terms(g, m, "hash"))
        worst = max(worst, abs(fast - brute))
        sym = max(sym, abs(fast - sum(chamfer_terms(m, g, "hash"))))
        t = rng.normal(size=3)
        trans = max(trans, abs(sum(chamfer_terms(g + t, m + t, "hash")) - fast))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and sym <= 1e-12 and trans <= 1e-12 and elapsed < 10
    record("chamfer oracle equivalence", ok,
           f"|hash-brute| {worst:.1e} (< 1e-10), symmetry {sym:.1e}, translation "
           f"{trans:.1e} (<= 1e-12), {elapsed:.2f} s (< 10 s)")


def test_gradient_suites():
    start = time.perf_counter()
    results = run_all(seed=0, include_network=True)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    seeds_ok = all(r.seeds >= 5 for r in results if r.name != "network_end_to_end")
    worst = max(results, key=lambda r: r.max_error / r.threshold)
    record("gradient suites", not failed and seeds_ok and elapsed < 120,
           f"{len(results)} suites, failures {failed or 'none'}; tightest "
           f"{worst.name} {worst.max_error:.1e} vs {worst.threshold:.0e}; {elapsed:.1f} s "
           f"(< 120 s)")


def test_adjoint_identity():
    rng = make_rng(4)
    worst, done = 0.0, 0
    while done < 20:
        ci, co = (int(v) for v in rng.integers(1, 5, size=2))
        k, s = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        p, n = int(rng.integers(0, k)), int(rng.integers(k + 1, 9))
        if (n + 2 * p - k) % s:
            continue
        x = rng.normal(size=(2, ci, n, n, n))
        w = rng.normal(size=(co, ci, k, k, k))
        y_ = ad.conv3d(Tensor(x), Tensor(w), s, p).data
        y = rng.normal(size=y_.shape)
        lhs = float(np.sum(y_ * y))
        rhs = float(np.sum(x * ad.conv3d_transposed(Tensor(y), Tensor(w), s, p).data))
        worst = max(worst, abs(lhs - rhs))
        done += 1
    record("adjoint identity", worst < 1e-8, f"max |<Ax,y>-<x,A^T y>| = {worst:.1e} "
           f"over 20 instances (< 1e-8)")


def test_loss_zero_cases():
    rng = make_rng(5)
    pts = rng.uniform(-0.9, 0.9, (128, 3))
    labels = rng.integers(0, 3, 128)
    grid = gridding(pts, 16).data
    logits = np.where(np.eye(3)[labels] > 0, 50.0, -50.0)
    total, _ = combined_loss(Tensor(pts), Tensor(pts), Tensor(grid), Tensor(logits),
                             Tensor(logits), LabeledPointCloud(pts, labels), grid)
    exact = all(float(cross_entropy(np.zeros((n, c)), np.arange(n) % c).data) == math.log(c)
                for c in (2, 3, 4, 16) for n in (1, 7, 256))
    record("loss zero-cases", float(total.data) < 1e-6 and exact,
           f"combined loss {float(total.data):.1e} (< 1e-6); uniform CE == ln C exactly: "
           f"{exact}")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("desk") / "desk.grjp"
    cfg = RunConfig(synth_kinds=("barbell", "table"), synth_count=64, resolution=16,
                    k_sparse=256, r_dense=4, learning_rate=1e-3, batch_size=4, steps=200,
                    seed=7, checkpoint=str(path), log_interval=20)
    start = time.perf_counter()
    result = train(cfg, out=io.StringIO())
    holdout = load_pairs(cfg, "holdout")
    report = evaluate(result.params, cfg.model_config(), holdout, seed=cfg.seed, norm="eval")
    elapsed = time.perf_counter() - start
    return cfg, result, report, elapsed


def test_desk_training(desk_run):
    cfg, result, report, elapsed = desk_run
    losses = [h["loss"] for h in result.history]
    first, last = float(np.mean(losses[:20])), float(np.mean(losses[-20:]))
    acc = report.row("overall")["acc_sparse"]
    n_holdout = report.row("overall")["samples"]
    ok = last <= 0.5 * first and acc >= 0.90 and n_holdout == 16 and elapsed < 300
    record("end-to-end desk training", ok,
           f"loss steps 1-20 {first:.3f} -> last 20 {last:.3f} (ratio {last / first:.3f} <= "
           f"0.5); held-out sparse accuracy {acc:.3f} on {n_holdout} shapes (>= 0.90); "
           f"{elapsed:.0f} s (< 300 s)")


def test_training_improves_dense_chamfer(desk_run):
    cfg, result, _, _ = desk_run
    pairs = load_pairs(cfg, "train")
    untrained = init_params(cfg.model_config(), make_rng(derive_seed(cfg.seed, 0)))
    before = evaluate(untrained, cfg.model_config(), pairs, cfg.seed).row("overall")
    after = evaluate(result.params, cfg.model_config(), pairs, cfg.seed).row("overall")
    record("training improves dense Chamfer on the training set",
           after["cd_dense"] < before["cd_dense"],
           f"{before['cd_dense_x1e3']:.1f} -> {after['cd_dense_x1e3']:.1f} (x1e3)")


def test_explicit_non_reproducibility(desk_run):
    _, _, report, _ = desk_run
    text = report.format()
    header = text.splitlines()[2].split("\t")
    paired = header[2:4] == ["cd_sparse_x1e3", "cd_dense_x1e3"]
    noted = "chair 4.58/2.36" in text and "not reproduced" in text
    overall = report.row("overall")
    record("explicit non-reproducibility", paired and noted,
           f"desk overall sparse/dense {overall['cd_sparse_x1e3']:.2f}/"
           f"{overall['cd_dense_x1e3']:.2f} (x1e3) vs published chair 4.58/2.36; full "
           f"ShapeNet-Part training is out of scope and the table is not reproduced; report "
           f"keeps the sparse/dense column pair")


def test_determinism(tmp_path):
    paths = [tmp_path / "a.grjp", tmp_path / "b.grjp"]
    for path in paths:
        code = main(["--seed", "7", "--precision", "f64", "--frozen-norm", "train",
                     "--steps", "6", "--checkpoint", str(path)], out=io.StringIO())
        assert code == 0
    same = paths[0].read_bytes() == paths[1].read_bytes()
    record("determinism", same, f"two f64 frozen-norm train runs (seed 7, 6 desk steps) "
           f"bit-identical: {same}")
