import time

import pytest

from ssgan import gradcheck
from ssgan.tensor import inject_fault

LAYERS = ["dense", "conv2d", "conv2d_transpose", "batchnorm", "leaky_relu", "sigmoid",
          "softmax", "noise_frozen"]
LOSSES = ["supervised_loss", "unsupervised_loss", "total_loss", "feature_matching_loss",
          "vanilla_d_objective", "vanilla_g_objective"]


def test_suite_covers_every_layer_and_loss():
    assert set(LAYERS + LOSSES) <= set(gradcheck.CHECKS)


@pytest.fixture(scope="module")
def suite():
    start = time.perf_counter()
    results = gradcheck.run_suite(trials=20, seed=0)
    return results, time.perf_counter() - start


def test_all_pass_in_double(suite):
    results, _ = suite
    failing = [(r.op, r.max_error) for r in results if not r.passed]
    assert not failing


def test_trials_and_runtime(suite):
    results, elapsed = suite
    assert all(r.trials >= 20 for r in results)
    assert elapsed < 120


@pytest.mark.parametrize("op,check", [("matmul", "dense"), ("log_softmax", "supervised_loss"),
                                      ("batchnorm", "batchnorm"), ("conv2d", "conv2d")])
def test_injected_sign_error_is_caught(op, check):
    with inject_fault(op):
        result = gradcheck.run_check(check, trials=2)
    assert not result.passed


def test_single_precision_is_looser():
    double = gradcheck.run_check("composite_graph", trials=3)
    single = gradcheck.run_check("composite_graph", trials=3, precision="single")
    assert double.passed
    assert single.max_error > double.max_error


def test_table():
    text = gradcheck.format_table([gradcheck.run_check("sigmoid", trials=2)])
    assert "sigmoid" in text and "PASS" in text
