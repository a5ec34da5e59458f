import itertools

import numpy as np
import pytest
import torch
from scipy import stats

from textcrystal.core.exceptions import ConfigError, NumericError
from textcrystal.services.diffusion import (
    NoiseDraws,
    combine_losses,
    coord_loss,
    d3pm_posterior,
    forward_coords,
    forward_lattice,
    forward_types,
    lattice_loss,
    lattice_reverse_step,
    posterior_probs,
    type_loss,
    wn_log_density,
    wn_score,
    wrap_frac_torch,
)
from textcrystal.services.schedules import make_d3pm, make_ddpm, make_sigma

T_SMALL, K_SMALL = 4, 3


@pytest.fixture
def d3pm():
    return make_d3pm(T_SMALL, K_SMALL)


def test_forward_type_marginals_match_cumulative_matrix(d3pm):
    g = torch.Generator().manual_seed(0)
    n = 100_000
    a0 = torch.randint(0, K_SMALL, (n,), generator=g)
    for t in range(1, T_SMALL + 1):
        a_t = forward_types(a0, t, d3pm, torch.rand(n, generator=g, dtype=torch.float64))
        masked = (a_t == d3pm.mask_index).double().mean().item()
        assert masked == pytest.approx(t / T_SMALL, abs=0.01)
        kept = a_t != d3pm.mask_index
        assert torch.equal(a_t[kept], a0[kept])


def _enumerated_posterior(d3pm, a0: int, a_t: int, t: int) -> np.ndarray:
    """q(a_{t-1} | a_t, a0) by summing over every trajectory a_1 .. a_t"""
    states = range(d3pm.k_states)
    weights = np.zeros(d3pm.k_states)
    for path in itertools.product(states, repeat=t):
        if path[-1] != a_t:
            continue
        p, prev = 1.0, a0
        for step, state in enumerate(path, start=1):
            p *= d3pm.transition_matrix(step)[prev, state]
            prev = state
        weights[path[-2] if t > 1 else a0] += p
    return weights / weights.sum()


def test_d3pm_posterior_matches_trajectory_enumeration(d3pm):
    for t in range(1, T_SMALL + 1):
        for a0 in range(K_SMALL):
            for a_t in (a0, d3pm.mask_index):
                if d3pm.cumulative_matrix(t)[a0, a_t] == 0:
                    with pytest.raises(NumericError):
                        d3pm_posterior(a_t, a0, t, d3pm)
                    continue
                expected = _enumerated_posterior(d3pm, a0, a_t, t)
                np.testing.assert_allclose(d3pm_posterior(a_t, a0, t, d3pm), expected, atol=1e-10)

                onehot = torch.nn.functional.one_hot(torch.tensor([a0]), d3pm.k_states).double()
                batched = posterior_probs(torch.tensor([a_t]), onehot, torch.tensor([t]), d3pm)
                np.testing.assert_allclose(batched[0].numpy(), expected, atol=1e-10)


def test_multi_step_posterior_is_a_distribution():
    d3pm = make_d3pm(20, 5)
    x0 = torch.softmax(torch.randn(6, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64), -1)
    x0 = torch.nn.functional.pad(x0, (0, 1))
    a_t = torch.tensor([5, 5, 1, 2, 5, 0])
    post = posterior_probs(a_t, x0, torch.full((6,), 12), d3pm, s=torch.full((6,), 4))
    np.testing.assert_allclose(post.sum(-1).numpy(), 1.0, atol=1e-12)
    # an unmasked a_t can only come from itself
    assert post[2, 1].item() == pytest.approx(1.0)


def test_forward_lattice_marginal_statistics():
    ddpm = make_ddpm(100, "cosine")
    t = 50
    L0 = torch.tensor([[4.0, 0.0, 0.0], [0.5, 3.5, 0.0], [0.2, 0.1, 5.0]], dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    n = 100_000
    eps = torch.randn(n, 3, 3, generator=g, dtype=torch.float64)
    L_t = forward_lattice(L0.expand(n, 3, 3), torch.full((n,), t), ddpm, eps)
    ab = ddpm.alpha_bar_at(t)
    np.testing.assert_allclose(L_t.mean(0).numpy(), np.sqrt(ab) * L0.numpy(), atol=0.01)
    flat = (L_t - np.sqrt(ab) * L0).reshape(n, 9).numpy()
    np.testing.assert_allclose(np.cov(flat.T), (1 - ab) * np.eye(9), atol=0.01)


def test_lattice_reverse_step_recovers_clean_lattice_with_true_noise():
    ddpm = make_ddpm(50, "linear")
    L0 = torch.eye(3, dtype=torch.float64) * 4
    eps = torch.randn(3, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    L_t = forward_lattice(L0, 30, ddpm, eps)
    out = lattice_reverse_step(L_t, eps, 30, 0, ddpm, torch.zeros(3, 3, dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), L0.numpy(), atol=1e-10)


def test_lattice_loss_shapes():
    assert lattice_loss(torch.ones(2, 3, 3), torch.zeros(2, 3, 3)).item() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        lattice_loss(torch.ones(2, 3, 3), torch.zeros(1, 3, 3))


def test_coordinates_approach_uniform_at_final_step():
    sigma = make_sigma(500, 0.005, 0.5)
    g = torch.Generator().manual_seed(4)
    n = 100_000
    X0 = torch.rand(1, 3, generator=g, dtype=torch.float64).expand(n, 3)
    X_T = forward_coords(X0, 500, sigma, torch.randn(n, 3, generator=g, dtype=torch.float64))
    assert torch.all((X_T >= 0) & (X_T < 1))
    assert stats.kstest(X_T[:, 0].numpy(), "uniform").statistic < 0.01


@pytest.mark.parametrize("sigma", [0.01, 0.1, 0.5, 1.0])
def test_wn_score_matches_finite_differences(sigma):
    g = torch.Generator().manual_seed(5)
    x0 = torch.rand(1000, generator=g, dtype=torch.float64)
    d = torch.rand(1000, generator=g, dtype=torch.float64) * 0.998 - 0.499
    x = x0 + d
    h = 1e-5 * sigma
    fd = (wn_log_density(x + h, x0, sigma) - wn_log_density(x - h, x0, sigma)) / (2 * h)
    score = wn_score(x, x0, sigma)
    scale = torch.clamp(score.abs(), min=1.0 / sigma)
    assert torch.max((fd - score).abs() / scale).item() < 1e-5


@pytest.mark.parametrize("sigma", [0.01, 0.1, 0.5, 1.0])
def test_wn_score_periodic_and_odd(sigma):
    g = torch.Generator().manual_seed(6)
    x0 = torch.rand(1000, generator=g, dtype=torch.float64)
    d = torch.rand(1000, generator=g, dtype=torch.float64) * 0.9 - 0.45
    base = wn_score(x0 + d, x0, sigma)
    tol = 1e-12 * max(1.0, 1.0 / sigma ** 2)
    assert torch.max((wn_score(x0 + d + 1.0, x0, sigma) - base).abs()).item() < tol
    assert torch.max((wn_score(x0 - d, x0, sigma) + base).abs()).item() < tol


def _wide_score(d, sigma, K=60):
    ks = np.arange(-K, K + 1)
    shifted = d[:, None] + ks
    logw = -shifted ** 2 / (2 * sigma ** 2)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return -(w * shifted).sum(axis=1) / sigma ** 2


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0])
def test_wn_score_truncation_against_wide_sum(sigma):
    d = np.array([-0.5, -0.499, -0.3, 0.0, 0.2, 0.49999, 0.5])
    score = wn_score(torch.as_tensor(d), torch.zeros(len(d), dtype=torch.float64), sigma).numpy()
    np.testing.assert_allclose(score, _wide_score(d, sigma), rtol=0, atol=1e-12 / sigma ** 2)
    assert abs(score[-1]) < 1e-12


def test_wn_score_rejects_bad_sigma():
    with pytest.raises(ConfigError):
        wn_score(torch.zeros(3), torch.zeros(3), 0.0)


def test_coord_loss_weighting():
    target = torch.ones(4, 3)
    pred = torch.zeros(4, 3)
    sigma = torch.full((4,), 0.5)
    assert coord_loss(target, pred, sigma, "unit").item() == pytest.approx(1.0)
    assert coord_loss(target, pred, sigma, "sigma2").item() == pytest.approx(0.25)
    with pytest.raises(ConfigError):
        coord_loss(target, pred, sigma, "cubic")


def test_type_loss_vanishes_for_confident_correct_logits(d3pm):
    a0 = torch.tensor([0, 1, 2, 1])
    a_t = torch.tensor([0, d3pm.mask_index, d3pm.mask_index, 1])
    logits = 50.0 * torch.nn.functional.one_hot(a0, K_SMALL).double()
    for t in range(1, T_SMALL):
        vb, ce = type_loss(logits, a0, a_t, torch.full((4,), t), d3pm)
        assert vb.item() < 1e-8 and ce.item() < 1e-8
    wrong = 50.0 * torch.nn.functional.one_hot((a0 + 1) % K_SMALL, K_SMALL).double()
    vb, ce = type_loss(wrong, a0, a_t, torch.full((4,), 2), d3pm)
    assert vb.item() > 1.0 and ce.item() > 1.0
    with pytest.raises(NumericError):
        type_loss(torch.full((4, K_SMALL), float("nan")), a0, a_t, torch.full((4,), 2), d3pm)


def test_combine_losses_and_breakdown():
    parts = {"lattice": torch.tensor(1.0), "coord": torch.tensor(2.0),
             "vb": torch.tensor(3.0), "ce": torch.tensor(4.0)}
    losses = combine_losses(parts, lambda_lattice=1.0, lambda_type=2.0, lambda_coord=10.0, lambda_ce=0.5)
    assert losses.total.item() == pytest.approx(1 + 20 + 2 * (3 + 2))
    assert losses.to_dict()["type_ce_loss"] == 4.0
    assert losses.is_finite()
    parts["vb"] = torch.tensor(float("nan"))
    assert not combine_losses(parts).is_finite()


def test_noise_draws_shapes_and_wrap():
    draws = NoiseDraws.draw(3, 7, torch.Generator().manual_seed(0))
    assert draws.eps_L.shape == (3, 3, 3) and draws.eps_X.shape == (7, 3)
    assert draws.type_draw.dtype == torch.float64
    wrapped = wrap_frac_torch(torch.tensor([-0.25, 1.25, -1e-20], dtype=torch.float64))
    np.testing.assert_allclose(wrapped.numpy(), [0.75, 0.25, 0.0])
