"""
Noise schedules: DDPM betas for the lattice, exponential sigmas for the
coordinates and absorbing-state D3PM transitions for the atom types.

Arrays are stored for t = 1..T at index t - 1; the ``*_at`` accessors also
accept t = 0 (no noise).
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List

import numpy as np

from textcrystal.core.exceptions import ConfigError
from textcrystal.schemas.config import ScheduleConfig

logger = logging.getLogger(__name__)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def _cosine_curve(T: int, s: float) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    return f / f[0]


@dataclass(frozen=True)
class DDPMSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])


def make_ddpm(
    T: int,
    kind: str = "cosine",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_s: float = 0.008,
) -> DDPMSchedule:
    if T < 2:
        raise ConfigError(f"DDPM schedule needs T >= 2, got {T}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        curve = _cosine_curve(T, cosine_s)
        beta = np.clip(1.0 - curve[1:] / curve[:-1], 0.0, 0.999)
    else:
        raise ConfigError(f"Unknown DDPM schedule kind: {kind}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ConfigError("DDPM betas must lie in (0, 1)")
    alpha = 1.0 - beta
    return DDPMSchedule(T=T, beta=_frozen(beta), alpha=_frozen(alpha), alpha_bar=_frozen(np.cumprod(alpha)))


@dataclass(frozen=True)
class SigmaSchedule:
    T: int
    sigma_min: float
    sigma_max: float
    sigma: np.ndarray

    def sigma_at(self, t: int) -> float:
        return self.sigma_min if t == 0 else float(self.sigma[t - 1])


def make_sigma(T: int, sigma_min: float = 0.005, sigma_max: float = 0.5) -> SigmaSchedule:
    """sigma_t = sigma_min * (sigma_max / sigma_min) ** (t / T)"""
    if T < 1:
        raise ConfigError(f"Sigma schedule needs T >= 1, got {T}")
    if sigma_min <= 0 or sigma_max <= sigma_min:
        raise ConfigError(f"Need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    t = np.arange(1, T + 1, dtype=np.float64)
    sigma = sigma_min * (sigma_max / sigma_min) ** (t / T)
    return SigmaSchedule(T=T, sigma_min=float(sigma_min), sigma_max=float(sigma_max), sigma=_frozen(sigma))


@dataclass(frozen=True)
class D3PMSchedule:
    """Absorbing-state transitions over ``k`` real classes plus ``[MASK]`` at index ``k``.

    Row-stochastic: ``Q_t[i, j] = q(a_t = j | a_{t-1} = i)``. A real class either
    stays or jumps to the mask, so every matrix is described by its keep probability.
    """

    T: int
    k: int
    beta: np.ndarray
    keep_bar: np.ndarray  # length T + 1, keep_bar[0] = 1
    lambda_ce: float = 0.01
    kind: str = "uniform"

    @property
    def k_states(self) -> int:
        return self.k + 1

    @property
    def mask_index(self) -> int:
        return self.k

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def keep_bar_at(self, t: int) -> float:
        return float(self.keep_bar[t])

    def keep_between(self, s: int, t: int) -> float:
        """Probability that an unmasked type survives from step s to step t (s <= t)"""
        if s == t:
            return 1.0
        if self.keep_bar[s] == 0.0:
            return 0.0
        return float(self.keep_bar[t] / self.keep_bar[s])

    def transition_matrix(self, t: int) -> np.ndarray:
        """Q_t"""
        return self._absorbing(1.0 - self.beta_at(t))

    def cumulative_matrix(self, t: int) -> np.ndarray:
        """Q̄_t = Q_1 ... Q_t; the identity at t = 0"""
        return self._absorbing(self.keep_bar_at(t))

    def multi_step_matrix(self, s: int, t: int) -> np.ndarray:
        """Q_{s+1} ... Q_t"""
        return self._absorbing(self.keep_between(s, t))

    def _absorbing(self, keep: float) -> np.ndarray:
        m = np.zeros((self.k_states, self.k_states), dtype=np.float64)
        idx = np.arange(self.k)
        m[idx, idx] = keep
        m[idx, self.mask_index] = 1.0 - keep
        m[self.mask_index, self.mask_index] = 1.0
        return m

    @cached_property
    def Q(self) -> List[np.ndarray]:
        return [self.transition_matrix(t) for t in range(1, self.T + 1)]

    @cached_property
    def Q_bar(self) -> List[np.ndarray]:
        return [self.cumulative_matrix(t) for t in range(1, self.T + 1)]


def make_d3pm(T: int, k: int = 100, kind: str = "uniform", lambda_ce: float = 0.01,
              cosine_s: float = 0.008) -> D3PMSchedule:
    """``uniform`` uses beta_t = 1 / (T - t + 1), so the mask marginal after t steps is t / T"""
    if k < 2:
        raise ConfigError(f"D3PM needs at least 2 classes, got {k}")
    if T < 1:
        raise ConfigError(f"D3PM schedule needs T >= 1, got {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "uniform":
        beta = 1.0 / (T - t + 1.0)
        keep_bar = np.concatenate([[1.0], 1.0 - t / T])
    elif kind == "cosine":
        curve = _cosine_curve(T, cosine_s)
        curve[-1] = 0.0
        beta = 1.0 - curve[1:] / curve[:-1]
        keep_bar = curve
    else:
        raise ConfigError(f"Unknown D3PM schedule kind: {kind}")
    return D3PMSchedule(T=T, k=k, beta=_frozen(beta), keep_bar=_frozen(keep_bar),
                        lambda_ce=float(lambda_ce), kind=kind)


@dataclass(frozen=True)
class NoiseSchedules:
    """The three schedules of one model, built from a single ``ScheduleConfig``"""

    config: ScheduleConfig
    ddpm: DDPMSchedule
    sigma: SigmaSchedule
    d3pm: D3PMSchedule

    @property
    def T(self) -> int:
        return self.config.timesteps

    def describe(self) -> Dict[str, Any]:
        """Serializable summary stored in checkpoint headers"""
        return {
            "config": self.config.model_dump(),
            "ddpm_beta": self.ddpm.beta.tolist(),
            "sigma": self.sigma.sigma.tolist(),
            "d3pm_beta": self.d3pm.beta.tolist(),
            "k": self.d3pm.k,
        }


def build_schedules(config: ScheduleConfig, k: int = 100) -> NoiseSchedules:
    T = config.timesteps
    schedules = NoiseSchedules(
        config=config,
        ddpm=make_ddpm(T, config.ddpm_kind, config.beta_start, config.beta_end, config.cosine_s),
        sigma=make_sigma(T, config.sigma_min, config.sigma_max),
        d3pm=make_d3pm(T, k, config.d3pm_kind, config.lambda_ce, config.cosine_s),
    )
    logger.debug(f"Built schedules T={T}, alpha_bar_T={schedules.ddpm.alpha_bar[-1]:.3e}")
    return schedules
