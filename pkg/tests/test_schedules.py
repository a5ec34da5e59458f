import numpy as np
import pytest
from pydantic import ValidationError

from textcrystal.core.exceptions import ConfigError
from textcrystal.schemas.config import ScheduleConfig
from textcrystal.services.schedules import build_schedules, make_d3pm, make_ddpm, make_sigma


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_ddpm_schedule_is_monotone(kind):
    ddpm = make_ddpm(500, kind)
    assert np.all((ddpm.beta > 0) & (ddpm.beta < 1))
    assert np.all(np.diff(ddpm.alpha_bar) < 0)
    np.testing.assert_allclose(ddpm.alpha_bar, np.cumprod(1 - ddpm.beta))
    assert ddpm.alpha_bar_at(0) == 1.0
    assert ddpm.alpha_bar_at(500) < 0.01


def test_ddpm_rejects_bad_input():
    with pytest.raises(ConfigError):
        make_ddpm(1)
    with pytest.raises(ConfigError):
        make_ddpm(10, "quadratic")
    with pytest.raises(ConfigError):
        make_ddpm(10, "linear", beta_start=0.0)


def test_sigma_schedule_is_geometric():
    sigma = make_sigma(100, 0.005, 0.5)
    assert sigma.sigma_at(0) == 0.005
    assert sigma.sigma_at(100) == pytest.approx(0.5)
    ratios = sigma.sigma[1:] / sigma.sigma[:-1]
    np.testing.assert_allclose(ratios, ratios[0])
    with pytest.raises(ConfigError):
        make_sigma(10, 0.5, 0.1)


def test_d3pm_uniform_keep_and_matrices():
    T, k = 4, 3
    d3pm = make_d3pm(T, k)
    assert d3pm.k_states == 4 and d3pm.mask_index == 3
    np.testing.assert_allclose(d3pm.beta, [1 / 4, 1 / 3, 1 / 2, 1.0])
    product = np.eye(k + 1)
    for t in range(1, T + 1):
        Q = d3pm.transition_matrix(t)
        np.testing.assert_allclose(Q.sum(axis=1), 1.0)
        product = product @ Q
        Q_bar = d3pm.cumulative_matrix(t)
        np.testing.assert_allclose(product, Q_bar, atol=1e-12)
        for i in range(k):
            assert Q_bar[i, i] == pytest.approx(1 - t / T, abs=1e-12)
        assert Q_bar[k, k] == 1.0
    np.testing.assert_allclose(d3pm.cumulative_matrix(T)[:, k], 1.0)


def test_d3pm_multi_step_composition():
    d3pm = make_d3pm(10, 5, kind="cosine")
    for s, t in [(0, 3), (2, 7), (5, 10)]:
        np.testing.assert_allclose(
            d3pm.cumulative_matrix(s) @ d3pm.multi_step_matrix(s, t), d3pm.cumulative_matrix(t), atol=1e-12
        )
    assert d3pm.keep_bar_at(10) == 0.0
    assert len(d3pm.Q) == 10 and len(d3pm.Q_bar) == 10


def test_build_schedules_and_config_validation():
    schedules = build_schedules(ScheduleConfig(timesteps=20), k=7)
    assert schedules.T == 20
    assert schedules.d3pm.k == 7
    summary = schedules.describe()
    assert len(summary["ddpm_beta"]) == 20 and summary["k"] == 7
    with pytest.raises(ValidationError):
        ScheduleConfig(sigma_min=0.5, sigma_max=0.1)
    with pytest.raises(ValidationError):
        ScheduleConfig(timesteps=10, unknown_key=1)
