"""Built-in verification suite behind the `selftest` CLI command.

Each check returns (ok, detail); the runner prints one PASS/FAIL line per
check. Covers gradient integrity of every op and the composed blocks, the
DropBlock mask statistics, the attention parameter budget, rank-based AUC
against a threshold-sweep oracle, and the pad/crop geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .data import crop_to, pad_to
from .gradcheck import check_gradients
from .layers import (RSAB, DropBlockConfig, PreActResidualBlock,
                     SpatialAttention, dropblock_draw, parameter_count)
from .metrics import auc
from .tensor import Tensor
from .training import bce_loss

ATOL_ATOMIC = 1e-4
ATOL_COMPOSED = 1e-3


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _projected(rng, fn, leaves):
    out_shape = fn().shape
    proj = Tensor(rng.standard_normal(out_shape), dtype=np.float64)

    def build_loss():
        return ops.sum_all(ops.mul(fn(), proj))

    return check_gradients(build_loss, leaves)


def check_gradients_atomic() -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    worst_name = ""

    def run(name, fn, leaves, tol=ATOL_ATOMIC):
        nonlocal worst, worst_name
        res = _projected(rng, fn, leaves)
        if res.max_rel_error > worst:
            worst, worst_name = res.max_rel_error, name
        return res.max_rel_error < tol

    x = _leaf(rng, (2, 6, 6, 3))
    k3 = _leaf(rng, (3, 3, 3, 4))
    b = _leaf(rng, (4,))
    ok = run("conv2d-3x3", lambda: ops.conv2d(x, k3, b), [x, k3, b])
    k7 = _leaf(rng, (7, 7, 3, 2))
    x8 = _leaf(rng, (1, 8, 8, 3))
    ok &= run("conv2d-7x7", lambda: ops.conv2d(x8, k7), [x8, k7])
    kv = _leaf(rng, (3, 3, 3, 2))
    ok &= run("conv2d-stride2-valid",
              lambda: ops.conv2d(x8, kv, stride=2, padding="valid"), [x8, kv])
    kt = _leaf(rng, (2, 2, 3, 2))
    ok &= run("conv2d_transpose", lambda: ops.conv2d_transpose(x8, kt), [x8, kt])
    ok &= run("maxpool2d", lambda: ops.maxpool2d(x8), [x8])
    ok &= run("channel_max", lambda: ops.channel_max(x), [x])
    ok &= run("channel_avg", lambda: ops.channel_avg(x), [x])
    y = _leaf(rng, (2, 6, 6, 2))
    ok &= run("concat_channels", lambda: ops.concat_channels(x, y), [x, y])
    ok &= run("relu", lambda: ops.relu(x), [x])
    ok &= run("sigmoid", lambda: ops.sigmoid(x), [x])
    x2 = _leaf(rng, (2, 6, 6, 3))
    ok &= run("add", lambda: ops.add(x, x2), [x, x2])
    m = _leaf(rng, (2, 6, 6, 1))
    ok &= run("mul_broadcast", lambda: ops.mul_broadcast(x, m), [x, m])

    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    beta = _leaf(rng, (3,))
    rm = np.zeros(3)
    rv = np.ones(3)
    ok &= run("batch_norm",
              lambda: ops.batch_norm(x, gamma, beta, rm, rv, "train"),
              [x, gamma, beta], tol=ATOL_COMPOSED)

    pred = Tensor(rng.uniform(0.05, 0.95, (2, 4, 4, 1)), requires_grad=True, dtype=np.float64)
    tgt = Tensor((rng.random((2, 4, 4, 1)) > 0.5).astype(np.float64), dtype=np.float64)
    res = check_gradients(lambda: bce_loss(pred, tgt), [pred])
    ok &= res.max_rel_error < ATOL_ATOMIC
    if res.max_rel_error > worst:
        worst, worst_name = res.max_rel_error, "bce_loss"
    return CheckResult("gradients-atomic", bool(ok),
                       f"max rel err {worst:.2e} ({worst_name})")


def check_gradients_blocks() -> CheckResult:
    rng = np.random.default_rng(12)
    db = DropBlockConfig(block_size=3, keep_prob=1.0)
    init = np.random.default_rng(5)
    worst = 0.0

    blk = PreActResidualBlock(2, 3, db, init, dtype=np.float64)
    x = _leaf(rng, (1, 8, 8, 2))
    leaves = [x] + [p for _, p in blk.named_parameters()]
    res = _projected(rng, lambda: blk.forward(x, "train"), leaves)
    worst = max(worst, res.max_rel_error)

    sa = SpatialAttention(init, dtype=np.float64)
    xs = _leaf(rng, (1, 8, 8, 3))
    res = _projected(rng, lambda: sa.forward(xs)[1], [xs, sa.kernel])
    worst = max(worst, res.max_rel_error)

    rsab = RSAB(3, 3, db, init, dtype=np.float64)
    xr = _leaf(rng, (1, 8, 8, 3))
    leaves = [xr] + [p for _, p in rsab.named_parameters()]
    res = _projected(rng, lambda: rsab.forward(xr, "train"), leaves)
    worst = max(worst, res.max_rel_error)
    return CheckResult("gradients-blocks", worst < ATOL_COMPOSED, f"max rel err {worst:.2e}")


def check_sa_parameter_count() -> CheckResult:
    rng = np.random.default_rng(0)
    counts = []
    for channels in (1, 8, 64):
        sa = SpatialAttention(np.random.default_rng(1))
        gate, out = sa.forward(Tensor(rng.random((1, 8, 8, channels), dtype=np.float32)))
        assert gate.shape == (1, 8, 8, 1) and out.shape == (1, 8, 8, channels)
        counts.append(parameter_count(sa))
    ok = all(c == 98 for c in counts)
    return CheckResult("sa-parameter-count", ok, f"counts {counts} (want 98)")


def check_dropblock_statistics(n_masks: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(21)
    cfg = DropBlockConfig(block_size=7, keep_prob=0.85)
    seeds, masks = dropblock_draw(n_masks, 28, 28, cfg, rng)
    frac = float((masks == 0).mean())
    ok = abs(frac - 0.15) <= 0.02

    # every zero region must reconstruct exactly from the sampled seeds
    off = cfg.block_size // 2
    for i in range(16):
        grid = np.zeros((1, 28, 28), dtype=bool)
        grid[0, off:off + seeds.shape[1], off:off + seeds.shape[2]] = seeds[i]
        padded = np.pad(grid, ((0, 0), (off, off), (off, off)))
        zero = np.zeros((1, 28, 28), dtype=bool)
        for di in range(cfg.block_size):
            for dj in range(cfg.block_size):
                zero |= padded[:, di:di + 28, dj:dj + 28]
        ok &= bool(np.array_equal(zero[0], masks[i] == 0))

    _, ones = dropblock_draw(4, 28, 28, DropBlockConfig(7, 1.0), rng)
    ok &= bool(np.all(ones == 1.0))
    return CheckResult("dropblock-statistics", bool(ok),
                       f"zero fraction {frac:.4f} (target 0.15 +- 0.02), seeds reconstruct")


def roc_trapezoid_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Brute-force AUC: sweep every distinct threshold, integrate the ROC."""
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    fprs = [0.0]
    tprs = [0.0]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        tprs.append(float((pred & pos).sum()) / n_pos)
        fprs.append(float((pred & ~pos).sum()) / n_neg)
    area = 0.0
    for i in range(1, len(fprs)):
        area += (fprs[i] - fprs[i - 1]) * (tprs[i] + tprs[i - 1]) / 2.0
    return area


def check_auc_oracle(instances: int = 100, n: int = 1000) -> CheckResult:
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(instances):
        scores = np.round(rng.random(n), 2)  # coarse grid forces plenty of ties
        labels = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(np.float64)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        diff = abs(auc(scores, labels) - roc_trapezoid_auc(scores, labels))
        worst = max(worst, diff)
    return CheckResult("auc-oracle", worst < 1e-9, f"max |rank - trapezoid| = {worst:.2e}")


def check_pad_crop() -> CheckResult:
    rng = np.random.default_rng(41)
    ok = True
    for (h, w), (th, tw) in (((565, 584), (592, 592)), ((999, 960), (1008, 1008))):
        img = rng.random((h, w, 3)).astype(np.float32)
        padded = pad_to(img, (th, tw))
        ok &= padded.shape[:2] == (th, tw)
        ok &= bool(np.array_equal(crop_to(padded, (h, w)), img))
    for _ in range(20):
        h, w = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        th, tw = h + int(rng.integers(0, 9)), w + int(rng.integers(0, 9))
        img = rng.random((h, w)).astype(np.float32)
        ok &= bool(np.array_equal(crop_to(pad_to(img, (th, tw)), (h, w)), img))
    return CheckResult("pad-crop-roundtrip", bool(ok), "dataset geometries + random round trips")


ALL_CHECKS = (
    check_gradients_atomic,
    check_gradients_blocks,
    check_sa_parameter_count,
    check_dropblock_statistics,
    check_auc_oracle,
    check_pad_crop,
)


def run_selftest(report=print) -> bool:
    all_ok = True
    for check in ALL_CHECKS:
        result = check()
        all_ok &= result.ok
        report(f"{'PASS' if result.ok else 'FAIL'} {result.name}: {result.detail}")
    return all_ok
