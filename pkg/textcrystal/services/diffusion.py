"""
Forward corruption, reverse-step statistics, score targets and loss terms
for the lattice (DDPM), coordinates (wrapped normal) and atom types (D3PM)
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from textcrystal.core.exceptions import ConfigError, NumericError
from textcrystal.services.schedules import D3PMSchedule, DDPMSchedule, SigmaSchedule

logger = logging.getLogger(__name__)

TimeLike = Union[int, torch.Tensor]


def _lookup(values: np.ndarray, t: TimeLike, like: torch.Tensor) -> torch.Tensor:
    """values[t] as a tensor on ``like``'s dtype/device; ``t`` may be an int or an index tensor"""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor):
        return table[t.long()]
    return table[int(t)]


def _with_zero(values: np.ndarray, zero_value: float) -> np.ndarray:
    return np.concatenate([[zero_value], values])


def wrap_frac_torch(x: torch.Tensor) -> torch.Tensor:
    out = x - torch.floor(x)
    return torch.where(out >= 1.0, torch.zeros_like(out), out)


@dataclass
class NoiseDraws:
    """Standard-normal lattice/coordinate noise and uniform type draws"""

    eps_L: torch.Tensor
    eps_X: torch.Tensor
    type_draw: torch.Tensor

    @classmethod
    def draw(cls, num_crystals: int, num_atoms: int, generator: Optional[torch.Generator] = None,
             dtype: torch.dtype = torch.float32) -> "NoiseDraws":
        return cls(
            eps_L=torch.randn(num_crystals, 3, 3, generator=generator, dtype=dtype),
            eps_X=torch.randn(num_atoms, 3, generator=generator, dtype=dtype),
            type_draw=torch.rand(num_atoms, generator=generator, dtype=torch.float64),
        )


# ---------------------------------------------------------------- lattice

def alpha_bar_tensor(ddpm: DDPMSchedule, t: TimeLike, like: torch.Tensor) -> torch.Tensor:
    return _lookup(_with_zero(ddpm.alpha_bar, 1.0), t, like)


def forward_lattice(L0: torch.Tensor, t: TimeLike, ddpm: DDPMSchedule, eps_L: torch.Tensor) -> torch.Tensor:
    """L_t = sqrt(ᾱ_t) L0 + sqrt(1 - ᾱ_t) ε; ``t`` is per crystal for batched (B, 3, 3) input"""
    ab = alpha_bar_tensor(ddpm, t, L0)
    if ab.dim() > 0:
        ab = ab.view(-1, 1, 1)
    return torch.sqrt(ab) * L0 + torch.sqrt(1.0 - ab) * eps_L


def lattice_reverse_step(
    L_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    s: int,
    ddpm: DDPMSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Ancestral DDPM step from t to s < t using the exact two-step posterior.

    With s = t - 1 this is the usual one-step update; at s = 0 no noise is added.
    """
    ab_t = ddpm.alpha_bar_at(t)
    ab_s = ddpm.alpha_bar_at(s)
    alpha_eff = ab_t / ab_s
    beta_eff = 1.0 - alpha_eff
    mean = (L_t - beta_eff / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_eff)
    if s == 0:
        return mean
    var = beta_eff * (1.0 - ab_s) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


def lattice_loss(eps_L: torch.Tensor, eps_hat_L: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the 9 entries and the batch"""
    if eps_L.shape != eps_hat_L.shape:
        raise ConfigError(f"Lattice noise shapes differ: {tuple(eps_L.shape)} vs {tuple(eps_hat_L.shape)}")
    return torch.mean((eps_L - eps_hat_L) ** 2)


# ---------------------------------------------------------------- coordinates

def sigma_tensor(sigma_sched: SigmaSchedule, t: TimeLike, like: torch.Tensor) -> torch.Tensor:
    return _lookup(_with_zero(sigma_sched.sigma, sigma_sched.sigma_min), t, like)


def forward_coords(X0: torch.Tensor, t: TimeLike, sigma_sched: SigmaSchedule, eps_X: torch.Tensor) -> torch.Tensor:
    """X_t = wrap(X0 + σ_t ε); ``t`` is an int or one step per atom"""
    sigma = sigma_tensor(sigma_sched, t, X0)
    if sigma.dim() > 0:
        sigma = sigma.view(-1, 1)
    return wrap_frac_torch(X0 + sigma * eps_X)


def _image_range(sigma: Union[float, torch.Tensor], k_max: int) -> int:
    """Images on each side of the wrapped offset; the nearest dropped image sits
    at least (k_max + 3) σ away once σ >= 1"""
    s = float(sigma.max()) if isinstance(sigma, torch.Tensor) else float(sigma)
    return int(math.ceil((k_max + 3) * max(s, 1.0)))


def wn_score(x_t: torch.Tensor, x0: torch.Tensor, sigma: Union[float, torch.Tensor], k_max: int = 5) -> torch.Tensor:
    """d/dx_t log Σ_k exp(-(x_t - x0 + k)² / 2σ²), elementwise, period 1 in x_t.

    The sum runs over a symmetric window of images around the wrapped offset
    d in [-0.5, 0.5), widened with σ, so truncation stays below 1e-12.
    """
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    sigma_t = torch.as_tensor(sigma, dtype=x_t.dtype, device=x_t.device)
    if torch.any(sigma_t <= 0):
        raise ConfigError("wn_score needs sigma > 0")
    K = _image_range(sigma_t, k_max)
    d = x_t - x0
    d = d - torch.floor(d + 0.5)
    ks = torch.arange(-K, K + 1, dtype=x_t.dtype, device=x_t.device)
    shifted = d.unsqueeze(-1) + ks
    var = (sigma_t ** 2).unsqueeze(-1) if sigma_t.dim() > 0 else sigma_t ** 2
    weights = torch.softmax(-shifted ** 2 / (2.0 * var), dim=-1)
    return -(weights * shifted).sum(-1) / (var.squeeze(-1) if sigma_t.dim() > 0 else var)


def wn_log_density(x_t: torch.Tensor, x0: torch.Tensor, sigma: float, k_max: int = 5) -> torch.Tensor:
    """Truncated wrapped-normal log density up to the normalizing constant"""
    K = _image_range(sigma, k_max)
    d = x_t - x0
    d = d - torch.floor(d + 0.5)
    ks = torch.arange(-K, K + 1, dtype=x_t.dtype, device=x_t.device)
    shifted = d.unsqueeze(-1) + ks
    return torch.logsumexp(-shifted ** 2 / (2.0 * sigma ** 2), dim=-1)


def coord_loss(
    score_target: torch.Tensor,
    eps_hat_X: torch.Tensor,
    sigma: torch.Tensor,
    weighting: str = "sigma2",
) -> torch.Tensor:
    """Mean of w_t (target - prediction)², with w_t = σ_t² (``sigma2``) or 1 (``unit``)"""
    if score_target.shape != eps_hat_X.shape:
        raise ConfigError(
            f"Coordinate score shapes differ: {tuple(score_target.shape)} vs {tuple(eps_hat_X.shape)}"
        )
    sq = (score_target - eps_hat_X) ** 2
    if weighting == "unit":
        return sq.mean()
    if weighting == "sigma2":
        sigma = torch.as_tensor(sigma, dtype=sq.dtype, device=sq.device)
        if sigma.dim() == 1:
            sigma = sigma.view(-1, 1)
        return (sigma ** 2 * sq).mean()
    raise ConfigError(f"Unknown coordinate weighting: {weighting}")


# ---------------------------------------------------------------- atom types

def forward_types(a0: torch.Tensor, t: TimeLike, d3pm: D3PMSchedule, type_draw: torch.Tensor) -> torch.Tensor:
    """Sample a_t from row a0 of Q̄_t using uniform draws in [0, 1)"""
    keep = _lookup(d3pm.keep_bar, t, type_draw.to(torch.float64))
    masked = type_draw >= keep
    return torch.where(masked, torch.full_like(a0, d3pm.mask_index), a0)


def _cumulative_rows(x0_probs: torch.Tensor, keep: torch.Tensor, mask_index: int) -> torch.Tensor:
    """x0_probs @ Q̄ for an absorbing Q̄ with keep probability ``keep`` per row"""
    keep = keep.view(-1, 1)
    out = x0_probs * keep
    real_mass = x0_probs[:, :mask_index].sum(-1) if mask_index > 0 else 0.0
    mask_col = real_mass * (1.0 - keep.view(-1)) + x0_probs[:, mask_index]
    out = out.clone()
    out[:, mask_index] = mask_col
    return out


def _transition_cols(a_t: torch.Tensor, survive: torch.Tensor, k_states: int, mask_index: int) -> torch.Tensor:
    """Column a_t of the multi-step matrix Q_{s+1..t}, per atom"""
    survive = survive.view(-1, 1)
    n = a_t.shape[0]
    is_mask = (a_t == mask_index).view(-1, 1)
    onehot = F.one_hot(a_t.long(), k_states).to(survive.dtype)
    real = torch.ones(n, k_states, dtype=survive.dtype, device=survive.device)
    real[:, mask_index] = 0.0
    mask_column = real * (1.0 - survive)
    mask_column[:, mask_index] = 1.0
    return torch.where(is_mask, mask_column, onehot * survive)


def posterior_probs(
    a_t: torch.Tensor,
    x0_probs: torch.Tensor,
    t: torch.Tensor,
    d3pm: D3PMSchedule,
    s: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """q(a_s | a_t, x0) ∝ (x0 Q̄_s)[a_s] · Q_{s+1..t}[a_s, a_t], one row per atom.

    ``x0_probs`` is a distribution over the k + 1 states: a one-hot row gives the
    true posterior, a predicted distribution gives the model's reverse step.
    ``s`` defaults to t - 1.
    """
    if s is None:
        s = t - 1
    dtype = x0_probs.dtype
    keep_bar = torch.as_tensor(d3pm.keep_bar, dtype=torch.float64, device=x0_probs.device)
    keep_s = keep_bar[s.long()]
    keep_t = keep_bar[t.long()]
    survive = torch.where(keep_s > 0, keep_t / keep_s.clamp_min(1e-300), torch.zeros_like(keep_s))
    rows = _cumulative_rows(x0_probs, keep_s.to(dtype), d3pm.mask_index)
    cols = _transition_cols(a_t, survive.to(dtype), d3pm.k_states, d3pm.mask_index)
    joint = rows * cols
    total = joint.sum(-1, keepdim=True)
    if torch.any(total <= 0):
        raise NumericError("Zero-probability conditioning pair in D3PM posterior")
    return joint / total


def d3pm_posterior(a_t: int, a0: int, t: int, d3pm: D3PMSchedule) -> np.ndarray:
    """q(a_{t-1} | a_t, a0) by Bayes' rule on the explicit transition matrices"""
    Q_t = d3pm.transition_matrix(t)
    Qbar_prev = d3pm.cumulative_matrix(t - 1)
    Qbar_t = d3pm.cumulative_matrix(t)
    denom = Qbar_t[a0, a_t]
    if denom <= 0.0:
        raise NumericError(f"q(a_t={a_t} | a0={a0}) is zero at t={t}")
    return Q_t[:, a_t] * Qbar_prev[a0, :] / denom


def _pad_mask(probs: torch.Tensor) -> torch.Tensor:
    return F.pad(probs, (0, 1), value=0.0)


def type_loss(
    logits_a0: torch.Tensor,
    a0: torch.Tensor,
    a_t: torch.Tensor,
    t: torch.Tensor,
    d3pm: D3PMSchedule,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(vb, ce) averaged over atoms.

    vb is KL(q(a_{t-1} | a_t, a0) || p_θ(a_{t-1} | a_t)) for t >= 2 and the decoder
    term -log p_θ(a0 | a_1) at t = 1; ce is -log softmax(logits)[a0].
    """
    if not torch.all(torch.isfinite(logits_a0)):
        raise NumericError("Type logits contain non-finite values")
    t = t.long()
    tiny = torch.finfo(logits_a0.dtype).tiny
    log_probs = F.log_softmax(logits_a0, dim=-1)
    ce = F.nll_loss(log_probs, a0.long(), reduction="none")

    pred = _pad_mask(log_probs.exp())
    true = F.one_hot(a0.long(), d3pm.k_states).to(pred.dtype)
    p = posterior_probs(a_t, pred, t, d3pm).clamp_min(tiny)
    q = posterior_probs(a_t, true, t, d3pm)

    kl = (torch.xlogy(q, q) - torch.xlogy(q, p)).sum(-1)
    decoder = -torch.log(p.gather(-1, a0.long().view(-1, 1)).squeeze(-1))
    vb = torch.where(t == 1, decoder, kl)
    return vb.mean(), ce.mean()


# ---------------------------------------------------------------- totals

@dataclass(frozen=True)
class LossBreakdown:
    """Loss terms of one batch or epoch; tensors during training, floats in history"""

    lattice_loss: Any
    coord_loss: Any
    type_vb_loss: Any
    type_ce_loss: Any
    total: Any

    def item(self) -> "LossBreakdown":
        def _f(v):
            return float(v.detach().cpu()) if isinstance(v, torch.Tensor) else float(v)
        return LossBreakdown(*(_f(v) for v in (self.lattice_loss, self.coord_loss,
                                                self.type_vb_loss, self.type_ce_loss, self.total)))

    def to_dict(self) -> Dict[str, float]:
        return asdict(self.item())

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_dict().values())


def combine_losses(
    parts: Mapping[str, Any],
    lambda_lattice: float = 1.0,
    lambda_type: float = 1.0,
    lambda_coord: float = 10.0,
    lambda_ce: float = 0.01,
) -> LossBreakdown:
    """total = λ_L lattice + λ_X coord + λ_A (vb + λ ce)"""
    lattice = parts["lattice"]
    coord = parts["coord"]
    vb = parts["vb"]
    ce = parts["ce"]
    total = lambda_lattice * lattice + lambda_coord * coord + lambda_type * (vb + lambda_ce * ce)
    return LossBreakdown(lattice_loss=lattice, coord_loss=coord, type_vb_loss=vb, type_ce_loss=ce, total=total)
