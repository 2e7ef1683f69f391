"""Acceptance gate: one verdict per headline criterion, printed in the terminal summary.

The semi-supervised comparison trains six models; each run gets
SSGAN_ACCEPT_BUDGET seconds of wall time (default 60, at most 900).
"""
import os
import statistics

import mpmath
import numpy as np
import pytest
from PIL import Image

from conftest import ACCEPTANCE
from ssgan import data, evaluation, gradcheck, models, training
from ssgan import losses as L
from ssgan import tensor as T
from ssgan.models import DiscriminatorOutput
from ssgan.tensor import Tensor


def record(name, passed, detail):
    ACCEPTANCE[name] = (bool(passed), detail)
    assert passed, detail


def out_of(logits):
    lg = Tensor(np.asarray(logits, dtype=np.float64))
    return DiscriminatorOutput(lg, T.softmax(lg, axis=1), lg)


def test_gradient_suite():
    import time
    start = time.perf_counter()
    results = gradcheck.run_suite(trials=20, seed=0, precision="double")
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_error)
    failing = [r.op for r in results if not r.passed or r.max_error >= 1e-4 or r.trials < 20]
    record("gradient suite", not failing and elapsed < 120,
           f"{len(results)} checks, worst {worst.op} {worst.max_error:.2e}, {elapsed:.1f}s"
           + (f", failing {failing}" if failing else ""))


def test_loss_identities():
    g = np.random.default_rng(5)
    gap_delta = gap_total = gap_lnk = 0.0
    for _ in range(50):
        k, n = int(g.integers(2, 12)), int(g.integers(1, 9))
        real, fake = out_of(g.normal(0, 3, (n, k + 1))), out_of(g.normal(0, 3, (n, k + 1)))
        labels = g.integers(1, k + 1, size=n)
        theta = L.supervised_loss(real, labels)
        delta = L.unsupervised_loss(real, fake)
        alt = L.unsupervised_loss_via_real_mass(real, fake)
        gap_delta = max(gap_delta, abs(delta.item() - alt.item()))
        gap_total = max(gap_total, abs(L.total_loss(theta, delta).item() - (theta.item() + delta.item())))
        uniform = L.supervised_loss(out_of(np.zeros((n, k + 1))), labels).item()
        gap_lnk = max(gap_lnk, abs(uniform - np.log(k)))
    record("loss identities", gap_total == 0.0 and gap_delta < 1e-9 and gap_lnk < 1e-9,
           f"total-(theta+delta)={gap_total:.1e}, delta forms {gap_delta:.1e}, ln k {gap_lnk:.1e}")


def test_worked_values():
    mpmath.mp.dps = 50
    # theta: logits (ln 2, 0 | 0), true class 1 -> -ln(2/(2+1))
    theta_ref = float(-mpmath.log(2 / mpmath.mpf(3)))
    # delta: real has p_fake = 1/3, fake has p_fake = 1/3
    e = [mpmath.mpf(1), mpmath.mpf(1), mpmath.mpf(1)]
    p = e[-1] / mpmath.fsum(e)
    delta_ref = float(-mpmath.log(1 - p) - mpmath.log(p))
    theta = L.supervised_loss(out_of([[np.log(2), 0.0, 0.0]]), [1]).item()
    delta = L.unsupervised_loss(out_of([[0.0, 0.0, 0.0]]), out_of([[0.0, 0.0, 0.0]])).item()
    record("worked values", abs(theta - theta_ref) < 1e-6 and abs(delta - delta_ref) < 1e-6,
           f"theta {theta:.6f} (ref {theta_ref:.6f}), delta {delta:.6f} (ref {delta_ref:.6f})")


def brute_force_cmc(logits, labels):
    n, k = len(labels), logits.shape[1] - 1
    curve = []
    for r in range(1, k + 1):
        hits = sum(labels[i] - 1 in sorted(range(k), key=lambda c: (-logits[i, c], c))[:r]
                   for i in range(n))
        curve.append(hits / n)
    return curve


def test_cmc_properties():
    g = np.random.default_rng(42)
    bad = []
    for trial in range(100):
        k, n = int(g.integers(2, 11)), int(g.integers(1, 51))
        logits = g.integers(-3, 4, size=(n, k + 1)).astype(float)
        labels = g.integers(1, k + 1, size=n)
        acc = evaluation.cmc_curve(evaluation.rank_classes(logits), labels).accuracies
        monotone = all(b >= a for a, b in zip(acc, acc[1:]))
        if acc != brute_force_cmc(logits, labels) or not monotone or acc[-1] != 1.0:
            bad.append(trial)
    record("CMC properties", not bad, f"100 instances, {len(bad)} disagreements")


def test_adjoint():
    g = np.random.default_rng(7)
    worst = 0.0
    done = 0
    while done < 50:
        n, c, f = (int(v) for v in g.integers(1, 4, size=3))
        k, stride, pad = int(g.integers(1, 5)), int(g.integers(1, 4)), int(g.integers(0, 3))
        # input sizes the transpose maps back onto exactly
        h = (int(g.integers(1, 6)) - 1) * stride + k - 2 * pad
        if h < 1:
            continue
        done += 1
        x, w = g.normal(size=(n, c, h, h)), g.normal(size=(f, c, k, k))
        y = T.conv2d(Tensor(x), Tensor(w), stride, pad)
        r = g.normal(size=y.shape)
        back = T.conv2d_transpose(Tensor(r), Tensor(w), stride, pad)
        worst = max(worst, abs((y.data * r).sum() - (x * back.data).sum()))
    record("adjoint property", worst < 1e-10, f"50 combinations, worst gap {worst:.1e}")


def _shapes_split(seed=100):
    ds = data.make_synthetic(4, 350, 16, seed=seed)
    ds = data.split_train_test(ds, f"fraction:{250 / 350}", seed)
    return data.strip_labels(ds, 0.9, seed)


def _budget_run(ds, algorithm, seed, budget):
    widths, latent = (16, 32), 32
    cfg = training.TrainingConfig(algorithm=algorithm, batch_size=64, iterations=10 ** 8,
                                  latent_dim=latent, seed=seed, eval_interval=10 ** 8,
                                  time_budget=budget)
    g = models.build_generator(latent, (1, 16, 16), widths, seed=seed)
    d = models.build_discriminator(4, (1, 16, 16), widths, 0.5, seed=seed)
    training.train(g, d, ds, cfg)
    return evaluation.evaluate(d, ds.test).top1


@pytest.mark.slow
def test_semi_supervised_benefit():
    budget = min(float(os.environ.get("SSGAN_ACCEPT_BUDGET", "60")), 900.0)
    ds = _shapes_split()
    labeled = sum(s.label is not None for s in ds.train)
    assert labeled == 100 and len(ds.train) == 1000
    ss = [_budget_run(ds, "ssgan", seed, budget) for seed in range(3)]
    sup = [_budget_run(ds, "supervised", seed, budget) for seed in range(3)]
    gain = statistics.median(ss) - statistics.median(sup)
    record("semi-supervised benefit", gain >= 5.0,
           f"{budget:.0f}s/run, SSGAN median {statistics.median(ss):.2f} {ss}, "
           f"supervised median {statistics.median(sup):.2f} {sup}, gain {gain:+.2f} (need +5)")


def _tiny_run(iterations, resume=None):
    ds = data.strip_labels(data.split_train_test(data.make_synthetic(3, 12, 8, seed=0),
                                                 "fraction:0.75", 0), 0.5, 0)
    g = models.build_generator(4, (1, 8, 8), (4, 8), seed=0, dtype=np.float64)
    d = models.build_discriminator(3, (1, 8, 8), (4, 8), seed=0, dtype=np.float64)
    rows = []

    class Sink:
        def write(self, row):
            rows.append(row)

    cfg = training.TrainingConfig(batch_size=8, iterations=iterations, latent_dim=4,
                                  eval_interval=1000, seed=7)
    ckpt, _ = training.train(g, d, ds, cfg, sinks=[Sink()], resume=resume)
    return ckpt, rows


def test_determinism_and_persistence(tmp_path):
    keys = ("theta", "delta", "total", "gen_loss")
    _, a = _tiny_run(10)
    _, b = _tiny_run(10)
    repeat_gap = max(abs(ra[k] - rb[k]) for ra, rb in zip(a, b) for k in keys)
    half, _ = _tiny_run(5)
    training.save_checkpoint(half, tmp_path / "half.ssgn")
    state = training.restore_state(training.load_checkpoint(tmp_path / "half.ssgn"))
    _, rest = _tiny_run(10, resume=state)
    resume_gap = max(abs(ra[k] - rb[k]) for ra, rb in zip(a[5:], rest) for k in keys)
    ok = len(a) == 10 and len(rest) == 5 and repeat_gap <= 1e-12 and resume_gap <= 1e-12
    record("determinism and persistence", ok,
           f"rerun gap {repeat_gap:.1e} over 10 iterations, resume gap {resume_gap:.1e} over 5")


def _tree(root, classes, per_class):
    g = np.random.default_rng(0)
    for name in classes:
        os.makedirs(root / name)
        for i in range(per_class):
            Image.fromarray(g.integers(0, 256, (8, 8), dtype=np.uint8)).save(
                root / name / f"{i:04d}.png")
    return data.load_dataset(str(root), (1, 8, 8))


def _tally(ds):
    out = {}
    for s in ds.train:
        out.setdefault(s.class_index, [0, 0, 0])[0] += 1
        out[s.class_index][1] += s.labeled
    for s in ds.test:
        out[s.class_index][2] += 1
    return {tuple(v) for v in out.values()}


def test_protocol_fidelity(tmp_path):
    eth = data.strip_labels(data.split_train_test(
        _tree(tmp_path / "eth", ["a", "b", "c"], 1000), "eth", 0), 0.1, 0)
    indian = data.strip_labels(data.split_train_test(
        _tree(tmp_path / "indian", ["a", "b", "c", "d"], 100), "indian", 0), 0.5, 0)
    got_eth, got_indian = _tally(eth), _tally(indian)
    ok = got_eth == {(750, 675, 250)} and got_indian == {(80, 40, 20)}
    record("protocol fidelity", ok,
           f"eth (train, labeled, test) {sorted(got_eth)}, indian {sorted(got_indian)}")
