"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so the full criterion table is visible even when one fails.
"""

import functools
import time

import numpy as np
import pytest

from conftest import numeric_grad, record_criterion
from ucelab import data
from ucelab.harness import SweepSpec, TrainConfig, fit, poly_lr, sgd_step, sweep
from ucelab.metrics import ConfusionMatrix, ece, miou, munc, update_confusion
from ucelab.network import NetworkConfig, RngStream, build, load_checkpoint, save_checkpoint
from ucelab.tensor import Tensor, backward, softmax
from ucelab.uce import UceConfig, sample_predictive, summarize_samples, training_step, uce_loss, uncertainty_weight


def _check(number, name, passed, detail=""):
    record_criterion(number, name, bool(passed), detail)
    assert passed, f"criterion {number} ({name}) failed: {detail}"


def _ce_oracle(logits, labels, ignore=255):
    """Plain float64 cross-entropy (sum / numel) and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    valid = labels != ignore
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    numel = labels.size
    loss = -(picked * valid).sum() / numel
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (np.exp(logp) - onehot) * valid[:, None] / numel
    return loss, grad


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_ce_reduction_identity():
    g = np.random.default_rng(101)
    worst_loss = worst_grad = 0.0
    for _ in range(50):
        logits = g.normal(0, 3, (2, 4, 16, 16))
        labels = g.integers(0, 4, (2, 16, 16))
        labels[g.random(labels.shape) < 0.1] = 255
        sigma = g.random((2, 16, 16)) * 0.5
        stats = type("S", (), {"weight": uncertainty_weight(sigma, 0.0)})()
        t = Tensor(logits, requires_grad=True)
        loss = uce_loss(t, labels, stats, UceConfig(alpha=0.0))
        backward(loss)
        ref_loss, ref_grad = _ce_oracle(logits, labels)
        worst_loss = max(worst_loss, abs(loss.item() - ref_loss) / abs(ref_loss))
        worst_grad = max(worst_grad, float(np.max(np.abs(t.grad - ref_grad))))

    # the same identity through a full training step: alpha=0 U-CE vs unweighted CE
    net_a = build(NetworkConfig(num_classes=4, block_channels=[4, 4], dropout_ratio=0.2, seed=3))
    net_b = build(NetworkConfig(num_classes=4, block_channels=[4, 4], dropout_ratio=0.2, seed=3))
    x = g.random((2, 3, 16, 16)).astype(np.float32)
    y = g.integers(0, 4, (2, 16, 16))
    cfg = UceConfig(alpha=0.0, beta=3)
    ra = training_step(net_a, x, y, cfg, RngStream(0, "dropout"), RngStream(0, "sample"), weighted=True)
    rb = training_step(net_b, x, y, cfg, RngStream(0, "dropout"), None, weighted=False)
    step_same = ra.loss == rb.loss and all(
        np.array_equal(pa.grad, pb.grad) for (pa, _), (pb, _) in zip(net_a.parameters(), net_b.parameters())
    )
    passed = worst_loss <= 1e-7 and worst_grad <= 1e-6 and step_same
    _check(1, "CE-reduction identity", passed,
           f"(max rel loss err {worst_loss:.2e}, max grad err {worst_grad:.2e}, step identical={step_same})")


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_full_network_gradient_oracle():
    net = build(NetworkConfig(num_classes=4, block_channels=[3, 3], dropout_ratio=0.2, seed=7)).astype(np.float64)
    g = np.random.default_rng(7)
    x = Tensor(g.random((2, 3, 6, 6)))
    y = g.integers(0, 4, (2, 6, 6))
    y[0, 0, :3] = 255
    cfg = UceConfig(alpha=10.0, beta=4)
    grad_rng = RngStream(1, "dropout")
    stats = sample_predictive(net, x, cfg, RngStream(1, "sample"))

    def loss_value():
        return uce_loss(net(x, grad_rng.fork()), y, stats, cfg).item()

    net.zero_grad()
    backward(uce_loss(net(x, grad_rng.fork()), y, stats, cfg))
    worst_rel = worst_abs = 0.0
    failures = 0
    for name, t, _ in net.named_parameters():
        num = numeric_grad(loss_value, t.data, step=1e-5)
        err = np.abs(num - t.grad)
        rel = err / np.maximum(np.abs(num), 1e-12)
        failures += int(np.count_nonzero((rel > 1e-4) & (err > 1e-6)))
        worst_abs = max(worst_abs, float(err.max()))
        worst_rel = max(worst_rel, float(np.where(err > 1e-6, rel, 0.0).max()))
    _check(2, "full-network gradient oracle", failures == 0,
           f"({net.num_parameters()} params, {failures} outside tolerance, max abs err {worst_abs:.2e})")


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_weight_formula():
    w = lambda s, a: float(uncertainty_weight(np.array([s]), a).data[0])
    checks = [
        all(w(0.0, a) == 1.0 for a in (0, 1, 10, 50)),
        all(w(s, 0.0) == 1.0 for s in (0.0, 0.1, 0.5, 0.7)),
        abs(w(0.1, 10.0) - 2.5937424601) <= 1e-9,
        w(0.5, 1.0) == 1.5,
    ]
    _check(3, "weight formula", all(checks), f"(w(0.1,10)={w(0.1, 10.0):.10f})")


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_sigma_oracle():
    net = build(NetworkConfig(num_classes=4, block_channels=[6, 6], dropout_ratio=0.3, seed=2))
    x = Tensor(np.random.default_rng(4).random((2, 3, 10, 10)).astype(np.float32))
    beta = 8
    rng = RngStream(5, "sample", counter=11)

    replay = rng.fork()
    stack = np.stack([softmax(net(x, replay), axis=1).data.astype(np.float64) for _ in range(beta)])
    mean = stack.sum(axis=0) / beta
    std = np.sqrt(((stack - mean) ** 2).sum(axis=0) / (beta - 1))
    top = np.argmax(mean, axis=1)
    sigma_ref = np.take_along_axis(std, top[:, None], axis=1)[:, 0]

    stats = sample_predictive(net, x, UceConfig(alpha=10.0, beta=beta), rng)
    err = float(np.max(np.abs(stats.sigma.data - sigma_ref)))

    perm = np.random.default_rng(0).permutation(beta)
    permuted = summarize_samples([stack[i] for i in perm], 10.0)
    original = summarize_samples(list(stack), 10.0)
    perm_err = float(np.max(np.abs(permuted.sigma.data - original.sigma.data)))
    _check(4, "sigma oracle", err <= 1e-6 and perm_err <= 1e-7 and sigma_ref.max() > 0,
           f"(max err {err:.2e}, permutation drift {perm_err:.2e})")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    cm = update_confusion(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    m = miou(cm)
    e = ece([0.95, 0.95, 0.65, 0.55], [True, False, True, True], num_bins=10)
    u = munc(np.array([0.1, 0.3, 0.2]), np.array([0, 0, 1]), 2)
    passed = abs(m - 7 / 12) <= 1e-9 and abs(e - 0.425) <= 1e-9 and abs(u - 0.2) <= 1e-9
    _check(5, "metric oracles", passed, f"(mIoU={m:.12f}, ECE={e:.12f}, mUnc={u:.12f})")


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_scheduler_and_optimizer():
    lr0, total = 0.01, 1000
    ends = poly_lr(0, total, lr0) == lr0 and poly_lr(total, total, lr0) == 0.0
    mid = abs(poly_lr(total // 2, total, lr0) - lr0 * 0.5**0.9) <= 1e-12

    grad = np.array([0.3, -1.7, 2.5])
    theta = Tensor(np.zeros(3))
    params = [(theta, "backbone")]
    state = sgd_step(params, [grad], 1.0, 0.9, 0.0, 10.0)
    sgd_step(params, [grad], 1.0, 0.9, 0.0, 10.0, state)
    unroll = float(np.max(np.abs(theta.data - (-2.9 * grad)))) <= 1e-9
    _check(6, "scheduler/optimizer", ends and mid and unroll,
           f"(endpoints={ends}, midpoint={mid}, momentum unroll={unroll})")


# -- 7 / 8: desk-scale training --------------------------------------------

SMOKE_DATA = data.DatasetConfig(
    num_images=250, height=64, width=64, num_classes=4, pixel_noise_std=0.1, boundary_label_noise=0.05, seed=0
)
SMOKE_TRAIN = dict(block_channels=(16, 16), dropout_ratio=0.2, epochs=30, batch_size=8, alpha=10.0, beta=6)
RUN_LIMIT_SECONDS = 600.0


@functools.lru_cache(maxsize=1)
def _smoke_data():
    samples = data.generate(SMOKE_DATA)
    return samples[:200], samples[200:]


@functools.lru_cache(maxsize=None)
def _smoke_run(loss_mode, seed):
    train_s, val_s = _smoke_data()
    cfg = TrainConfig(loss_mode=loss_mode, seed=seed, **SMOKE_TRAIN)
    start = time.perf_counter()
    result = fit(cfg, train_s, val_s, num_classes=4)
    return result, time.perf_counter() - start


def _param_bytes(net):
    return b"".join(t.data.tobytes() for t, _ in net.parameters())


@pytest.mark.slow
def test_criterion_7_smoke_training():
    details, passed = [], True
    for mode in ("ce", "uce"):
        result, seconds = _smoke_run(mode, 0)
        rerun = fit(TrainConfig(loss_mode=mode, seed=0, **SMOKE_TRAIN), *_smoke_data(), num_classes=4)
        same = _param_bytes(rerun.net) == _param_bytes(result.net) and rerun.report.miou == result.report.miou
        ok = result.report.miou >= 0.60 and seconds <= RUN_LIMIT_SECONDS and same
        passed &= ok
        details.append(f"{mode}: mIoU {result.report.miou:.3f} in {seconds:.0f}s, deterministic={same}")
    _check(7, "smoke training", passed, "(" + "; ".join(details) + ")")


@pytest.mark.slow
def test_criterion_8_directional():
    seeds = (0, 1, 2)
    ce = [_smoke_run("ce", s)[0].report for s in seeds]
    uce = [_smoke_run("uce", s)[0].report for s in seeds]
    ce_mean = float(np.mean([r.miou for r in ce]))
    uce_mean = float(np.mean([r.miou for r in uce]))
    wrong = float(np.mean([r.sigma_incorrect for r in uce]))
    right = float(np.mean([r.sigma_correct for r in uce]))
    passed = uce_mean >= ce_mean - 0.02 and wrong > right
    _check(8, "directional U-CE vs CE", passed,
           f"(mIoU U-CE {uce_mean:.4f} vs CE {ce_mean:.4f}; sigma wrong {wrong:.4f} vs right {right:.4f})")


# -- 9 ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_beta_cost_monotone():
    train_s, val_s = _smoke_data()
    base = TrainConfig(loss_mode="uce", epochs=2, **{k: v for k, v in SMOKE_TRAIN.items() if k != "epochs"})
    rows = sweep(SweepSpec("beta", [2, 6, 10], 1, base), train_s, val_s[:8], 4)
    per_epoch = [r["wall_seconds_per_epoch"] for r in rows if r["status"] == "ok"]
    passed = len(per_epoch) == 3 and per_epoch[0] < per_epoch[1] < per_epoch[2]
    _check(9, "beta-cost monotonicity", passed, "(s/epoch: " + ", ".join(f"{s:.2f}" for s in per_epoch) + ")")


# -- 10 --------------------------------------------------------------------


def test_criterion_10_round_trips(tmp_path):
    net = build(NetworkConfig(num_classes=4, block_channels=[16, 16], seed=9))
    save_checkpoint(net, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", dropout_ratio=0.2)
    save_checkpoint(back, tmp_path / "b.ckpt")
    ckpt_ok = _param_bytes(back) == _param_bytes(net) and (
        (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    )

    cfg = data.DatasetConfig(num_images=5, height=32, width=32, seed=4)
    pair_ok = True
    for i, s in enumerate(data.generate(cfg)):
        data.save_pair(tmp_path / f"p{i}", s)
        loaded = data.load_pair(tmp_path / f"p{i}")
        data.save_pair(tmp_path / f"q{i}", loaded)
        pair_ok &= loaded.label.tobytes() == s.label.tobytes()
        pair_ok &= (tmp_path / f"p{i}.ppm").read_bytes() == (tmp_path / f"q{i}.ppm").read_bytes()
        pair_ok &= float(np.max(np.abs(loaded.image - s.image))) <= 0.5 / 255 + 1e-7

    data.write_dataset(tmp_path / "d1", cfg, 3, 2)
    data.write_dataset(tmp_path / "d2", cfg, 3, 2)
    files = sorted(p.relative_to(tmp_path / "d1") for p in (tmp_path / "d1").rglob("*") if p.is_file())
    regen_ok = all((tmp_path / "d1" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes() for f in files)
    regen_ok &= all(
        a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
        for a, b in zip(data.generate(cfg), data.generate(cfg))
    )
    _check(10, "round-trips", ckpt_ok and pair_ok and regen_ok,
           f"(checkpoint={ckpt_ok}, netpbm pair={pair_ok}, regeneration={regen_ok})")
