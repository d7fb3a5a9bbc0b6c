import numpy as np
import pytest

from sansaw import gradsuite
from sansaw.gradsuite import (
    OPERATORS,
    CheckResult,
    NoValidInstance,
    channel_max_margin,
    kink_signature,
    ranking_margin,
    run_suite,
    whitening_margin,
)
from sansaw.toynet import NetConfig, ToyNet, make_pins


def test_margins():
    assert ranking_margin(np.array([[3.0, -1.0, 0.5, 0.2]])) == pytest.approx(0.3)
    assert ranking_margin(np.array([[3.0, -1.0, 0.5, 0.2], [1.0, 2.0, 0.0, 0.9]])) == pytest.approx(0.1)
    f = np.array([2.0, 1.5, 0.0]).reshape(1, 3, 1, 1)
    assert channel_max_margin(f) == pytest.approx(0.5)
    assert channel_max_margin(np.zeros((1, 3, 2, 2))) == np.inf
    a = np.array([1.0, -1, 1, -1])
    b = np.array([1.0, 1, -1, -1])
    groups = np.stack([a, b]).reshape(1, 1, 2, 2, 2)
    assert whitening_margin(groups) == 0.0


def test_result_pass_rule():
    assert CheckResult("x", [1e-5, 5e-4]).passed
    assert not CheckResult("x", [1e-5, 2e-3]).passed
    assert not CheckResult("x").passed


def test_sampler_gives_up(monkeypatch):
    monkeypatch.setattr(gradsuite, "MAX_ATTEMPTS", 3)
    with pytest.raises(NoValidInstance):
        gradsuite._sample(lambda r: (r,), lambda r: 0.0, np.random.default_rng(0))


def test_kink_signature_stable_under_tiny_steps():
    cfg = NetConfig(num_classes=3, k1=4, k2=4, C=2, san="on", whiten="saw")
    net = ToyNet.init(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((1, 3, 8, 8))
    y = rng.integers(0, 3, size=(1, 8, 8))
    pins = make_pins(net, x, y)
    a = kink_signature(net, x, y, pins)
    net.params["head.w"] += 1e-12
    b = kink_signature(net, x, y, pins)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_suite_covers_every_operator():
    names = set(OPERATORS)
    for op in ("conv2d", "cross_entropy", "instance_norm", "regional_norm", "cfr", "san_loss", "iw_loss",
               "giw_loss", "saw_loss"):
        assert op in names
    assert {n for n in names if n.startswith("total_loss")} >= {"total_loss[baseline]", "total_loss[full]"}


@pytest.mark.parametrize("name", [n for n in OPERATORS if not n.startswith("total_loss")])
def test_operator_check_passes(name):
    (res,) = run_suite(seed=7, instances=2, only={name})
    assert res.passed, (name, res.errors)


def test_total_loss_check_passes():
    (res,) = run_suite(seed=7, instances=1, only={"total_loss[full]"})
    assert res.passed, res.errors
