import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from decaug.baselines import (
    BaselineConfig,
    dummy_scale_penalty,
    erm_loss,
    irmv1_penalty,
    irmv1_penalty_from_logits,
    vrex_penalty,
)
from decaug.model import ModelConfig, init_params, predict_logits

from oracles import ce


@pytest.mark.parametrize("a,b,expected", [(1.0, 1.0, 0.0), (2.0, 1.0, 16.0), (0.5, 2.0, 2.25)])
def test_dummy_scale_penalty_scalar_family(a, b, expected):
    # R(w) = (w a - b)^2  ->  (dR/dw at 1)^2 = 4 a^2 (a - b)^2
    got = dummy_scale_penalty(lambda w: (w * a - b) ** 2).detach()
    assert float(got) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(4 * a * a * (a - b) ** 2)


def test_irmv1_matches_finite_difference():
    cfg = ModelConfig(input_dim=4, num_categories=3, num_contexts=2, backbone_widths=(), feature_dim=5,
                      architecture="plain", seed=2)
    p = init_params(cfg)
    rng = np.random.default_rng(0)
    envs = [(rng.normal(size=(9, 4)), rng.integers(0, 3, size=9)) for _ in range(2)]
    got = float(irmv1_penalty(p, [(torch.tensor(x), torch.tensor(y)) for x, y in envs]).detach())
    expected = 0.0
    h = 1e-6
    for x, y in envs:
        logits = predict_logits(p, torch.tensor(x)).numpy()
        d = (ce(logits * (1 + h), y).mean() - ce(logits * (1 - h), y).mean()) / (2 * h)
        expected += d * d
    assert got == pytest.approx(expected, rel=1e-6)


def test_irmv1_is_differentiable():
    logits = torch.randn(6, 2, dtype=torch.float64, requires_grad=True)
    pen = irmv1_penalty_from_logits([logits], [torch.tensor([0, 1, 0, 1, 1, 0])])
    (g,) = torch.autograd.grad(pen, logits)
    assert torch.isfinite(g).all() and float(g.abs().sum()) > 0


@pytest.mark.parametrize("risks,expected", [([0.5, 0.5], 0.0), ([1, 3], 1.0), ([2.0], 0.0)])
def test_vrex_analytic(risks, expected):
    assert float(vrex_penalty(risks)) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_vrex_brute_force_and_order(risks, rnd):
    mean = sum(risks) / len(risks)
    brute = sum((r - mean) ** 2 for r in risks) / len(risks)
    got = float(vrex_penalty(risks))
    assert got == pytest.approx(brute, abs=1e-9)
    shuffled = list(risks)
    rnd.shuffle(shuffled)
    assert float(vrex_penalty(shuffled)) == pytest.approx(got, abs=1e-9)
    assert (got == 0) == (max(risks) - min(risks) == 0) or got < 1e-20


def test_vrex_tensor_input_keeps_graph():
    r = torch.tensor([1.0, 2.0, 4.0], requires_grad=True)
    (g,) = torch.autograd.grad(vrex_penalty(r), r)
    # d/dr_i of population variance = 2 (r_i - mean) / n
    np.testing.assert_allclose(g.numpy(), 2 * (np.array([1, 2, 4]) - 7 / 3) / 3, rtol=1e-6)


def test_erm_loss_matches_numpy():
    cfg = ModelConfig(input_dim=3, num_categories=2, num_contexts=2, backbone_widths=(), feature_dim=3,
                      architecture="plain")
    p = init_params(cfg)
    x = np.random.default_rng(1).normal(size=(5, 3))
    y = np.array([0, 1, 1, 0, 0])
    logits = predict_logits(p, torch.tensor(x)).numpy()
    assert float(erm_loss(p, torch.tensor(x), torch.tensor(y))) == pytest.approx(ce(logits, y).mean(), rel=1e-12)
    with pytest.raises(ValueError):
        erm_loss(p, torch.zeros(0, 3, dtype=torch.float64), torch.zeros(0, dtype=torch.long))


def test_baseline_config():
    cfg = BaselineConfig("irmv1", penalty_weight=1000, penalty_anneal_epoch=100)
    assert cfg.weight_at(99) == 1.0 and cfg.weight_at(100) == 1000
    with pytest.raises(ValueError):
        BaselineConfig("dro")
    with pytest.raises(ValueError):
        BaselineConfig("vrex", penalty_weight=-1)
