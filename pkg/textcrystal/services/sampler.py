"""
Predictor-corrector sampling of crystals from a trained checkpoint
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from textcrystal.core.exceptions import ConfigError, DataError, NumericError
from textcrystal.schemas.config import SamplerConfig
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.schemas.prompt import PromptConstraints
from textcrystal.services.checkpoint import Checkpoint
from textcrystal.services.composition import atom_count, reduced_formula_of_labels
from textcrystal.services.crystal import Crystal
from textcrystal.services.diffusion import lattice_reverse_step, posterior_probs, wrap_frac_torch
from textcrystal.services.schedules import D3PMSchedule
from textcrystal.services.trainer import coord_prediction

logger = logging.getLogger(__name__)

DEGENERATE_RTOL = 1e-6


def time_steps(T: int, steps: Optional[int] = None) -> List[int]:
    """Descending steps; ``steps`` strides 1..T uniformly and always keeps t = 1"""
    if steps is None or steps >= T:
        return list(range(T, 0, -1))
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    grid = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in grid[::-1]]


def type_update(
    logits: torch.Tensor,
    a_t: torch.Tensor,
    t: int,
    d3pm: D3PMSchedule,
    strategy: str = "d3pm_ancestral",
    generator: Optional[torch.Generator] = None,
    s: Optional[int] = None,
    sigma_t: float = 0.0,
    argmax: bool = True,
) -> torch.Tensor:
    """One reverse step for atom types from t to s (default t - 1).

    ``d3pm_ancestral`` draws masked atoms from p(a_s | a_t) = Σ_a0 p̂(a0) q(a_s | a_t, a0)
    with p̂ = softmax(logits); unmasked atoms are absorbing-compatible with a
    single a0 and stay fixed. ``alg2_softmax`` perturbs the logits with σ_t-scaled
    Gaussian noise and takes the argmax (or a categorical draw when ``argmax`` is off).
    """
    s = t - 1 if s is None else s
    logits = logits.detach().to(torch.float64)
    if strategy == "d3pm_ancestral":
        a_t = a_t.long()
        masked = a_t == d3pm.mask_index
        out = a_t.clone()
        m = int(masked.sum())
        if m == 0:
            return out
        probs = F.pad(torch.softmax(logits[masked], dim=-1), (0, 1), value=0.0)
        post = posterior_probs(
            a_t[masked], probs,
            torch.full((m,), t, dtype=torch.long), d3pm,
            torch.full((m,), s, dtype=torch.long),
        )
        out[masked] = torch.multinomial(post, 1, generator=generator).view(-1)
        return out
    if strategy == "alg2_softmax":
        noisy = logits + sigma_t * torch.randn(logits.shape, generator=generator, dtype=torch.float64)
        if argmax:
            return noisy.argmax(dim=-1)
        return torch.multinomial(torch.softmax(noisy, dim=-1), 1, generator=generator).view(-1)
    raise ConfigError(f"Unknown type update strategy: {strategy}")


def _is_degenerate(L: np.ndarray) -> bool:
    scale = float(np.mean(np.linalg.norm(L, axis=1)))
    return abs(float(np.linalg.det(L))) < DEGENERATE_RTOL * scale ** 3


@dataclass
class SampleResult:
    crystal: Optional[Crystal]
    step_seconds: List[float] = field(default_factory=list)
    resampled_lattice: bool = False
    flagged_invalid: bool = False

    @property
    def seconds(self) -> float:
        return float(sum(self.step_seconds))


class Sampler:
    """Runs the reverse process of one checkpoint; reusable across prompts"""

    def __init__(self, ckpt: Checkpoint, config: Optional[SamplerConfig] = None,
                 dtype: torch.dtype = torch.float32):
        self.ckpt = ckpt
        self.config = config or SamplerConfig()
        self.dtype = dtype
        self.model = ckpt.build_model(dtype)
        self.schedules = ckpt.build_schedules()
        self.k = ckpt.denoiser.k_classes

    def choose_num_atoms(self, constraints: Optional[PromptConstraints], seed: int) -> int:
        """Atom count of the prompt formula, else a draw from the training histogram"""
        if constraints is not None:
            try:
                return atom_count(constraints.formula)
            except DataError:
                logger.warning(f"⚠️ Formula {constraints.formula!r} gives no integer atom count")
        hist = self.ckpt.num_atoms_histogram
        if not hist:
            raise ConfigError("Checkpoint has no atom-count histogram and the prompt gives no formula")
        counts = np.array(sorted(hist))
        weights = np.array([hist[c] for c in counts], dtype=float)
        rng = np.random.default_rng(seed)
        return int(rng.choice(counts, p=weights / weights.sum()))

    def sample(
        self,
        prompt_embedding: np.ndarray,
        n_atoms: Optional[int] = None,
        fixed_types: Optional[Sequence[int]] = None,
        seed: int = 0,
        mode: Optional[str] = None,
        steps: Optional[int] = None,
        id: str = "",
        meta: Optional[CrystalMeta] = None,
    ) -> SampleResult:
        cfg = self.config
        mode = mode or cfg.mode
        steps = cfg.steps if steps is None else steps
        d3pm = self.schedules.d3pm

        if mode == "csp":
            if fixed_types is None:
                raise DataError("csp sampling needs fixed atom types")
            fixed = torch.as_tensor(list(fixed_types), dtype=torch.long)
            if fixed.numel() < 1 or fixed.min() < 0 or fixed.max() >= self.k:
                raise DataError(f"Fixed atom types must lie in 0..{self.k - 1}")
            n_atoms = int(fixed.numel())
        elif mode == "gen":
            if n_atoms is None or n_atoms < 1:
                raise ConfigError("gen sampling needs a positive atom count")
        else:
            raise ConfigError(f"Unknown sampling mode: {mode}")

        text = torch.as_tensor(np.asarray(prompt_embedding, dtype=np.float64), dtype=self.dtype).view(1, -1)
        if text.shape[1] != self.ckpt.denoiser.text_input_dim:
            raise ConfigError(
                f"Prompt embedding has dimension {text.shape[1]}, model expects {self.ckpt.denoiser.text_input_dim}"
            )
        drop = torch.tensor([bool(cfg.unconditional)])
        num_atoms = torch.tensor([n_atoms], dtype=torch.long)
        g = torch.Generator().manual_seed(int(seed))

        L = torch.randn(1, 3, 3, generator=g, dtype=self.dtype)
        X = torch.rand(n_atoms, 3, generator=g, dtype=self.dtype)
        if mode == "csp":
            A = fixed
        elif cfg.strategy == "d3pm_ancestral":
            A = torch.full((n_atoms,), d3pm.mask_index, dtype=torch.long)
        else:
            A = torch.randint(0, self.k, (n_atoms,), generator=g)

        result = SampleResult(crystal=None)
        seq = time_steps(self.schedules.T, steps)
        last_L = L
        last_eps = None
        with torch.no_grad():
            for idx, t in enumerate(seq):
                started = time.perf_counter()
                s = seq[idx + 1] if idx + 1 < len(seq) else 0
                t_vec = torch.tensor([t], dtype=torch.long)
                sigma_t = self.schedules.sigma.sigma_at(t)
                sigma_s = self.schedules.sigma.sigma_at(s)

                out = self.model(A, X, L, t_vec, text, num_atoms, drop)
                L_next = lattice_reverse_step(L, out.eps_hat_L, t, s, self.schedules.ddpm,
                                              torch.randn(1, 3, 3, generator=g, dtype=self.dtype))

                score = coord_prediction(out.eps_hat_X, torch.tensor([sigma_t], dtype=self.dtype),
                                         self.ckpt.train.coord_weighting)
                gap = max(sigma_t ** 2 - sigma_s ** 2, 0.0)
                noise_std = sigma_s * math.sqrt(gap) / sigma_t
                X_half = wrap_frac_torch(
                    X + gap * score + noise_std * torch.randn(X.shape, generator=g, dtype=self.dtype)
                )

                out2 = self.model(A, X_half, L_next, t_vec, text, num_atoms, drop)
                score2 = coord_prediction(out2.eps_hat_X, torch.tensor([sigma_t], dtype=self.dtype),
                                          self.ckpt.train.coord_weighting)
                eta = cfg.step_size * sigma_s / sigma_t
                X_next = wrap_frac_torch(
                    X_half + eta * score2 + math.sqrt(2.0 * eta) * torch.randn(X.shape, generator=g, dtype=self.dtype)
                )

                if mode == "csp":
                    A_next = A
                else:
                    A_next = type_update(out.a0_logits, A, t, d3pm, cfg.strategy, g, s=s,
                                         sigma_t=sigma_t, argmax=cfg.alg2_argmax)

                if not (torch.all(torch.isfinite(L_next)) and torch.all(torch.isfinite(X_next))):
                    raise NumericError(f"Non-finite sampler state at step {idx} (t={t})")
                last_L, last_eps = L, out.eps_hat_L
                L, X, A = L_next, X_next, A_next
                result.step_seconds.append(time.perf_counter() - started)
                logger.debug(f"Sampling step {idx} (t={t}) done")

        lattice = L[0].to(torch.float64).numpy()
        if _is_degenerate(lattice) and last_eps is not None:
            t_last = seq[-1]
            std = math.sqrt(self.schedules.ddpm.beta_at(t_last))
            redo = lattice_reverse_step(last_L, last_eps, t_last, 0, self.schedules.ddpm,
                                        torch.zeros(1, 3, 3, dtype=self.dtype))
            redo = redo + std * torch.randn(1, 3, 3, generator=g, dtype=self.dtype)
            lattice = redo[0].to(torch.float64).numpy()
            result.resampled_lattice = True
            logger.warning(f"⚠️ Degenerate lattice for sample {id!r}; final lattice step resampled")
        if _is_degenerate(lattice):
            result.flagged_invalid = True
            logger.warning(f"⚠️ Sample {id!r} flagged invalid: singular lattice")
            return result

        frac = X.to(torch.float64).numpy()
        if np.linalg.det(lattice) < 0:
            lattice, frac = -lattice, -frac
        types = A.numpy().astype(np.int64)
        if np.any(types >= self.k):
            raise NumericError(f"Sample {id!r} still has masked atom types after the last step")

        extra = dict(meta.model_dump(exclude_none=True)) if meta is not None else {}
        extra.setdefault("formula", reduced_formula_of_labels(types))
        result.crystal = Crystal(
            atom_types=types,
            frac_coords=frac,
            lattice=lattice,
            id=id,
            meta=CrystalMeta(**extra),
        )
        return result


def sample(
    ckpt: Checkpoint,
    prompt_embedding: np.ndarray,
    n_atoms: Optional[int] = None,
    mode: str = "gen",
    fixed_types: Optional[Sequence[int]] = None,
    steps_override: Optional[int] = None,
    seed: int = 0,
    config: Optional[SamplerConfig] = None,
) -> SampleResult:
    """One-shot sampling; build a ``Sampler`` to reuse the model across prompts"""
    return Sampler(ckpt, config).sample(prompt_embedding, n_atoms=n_atoms, fixed_types=fixed_types,
                                        seed=seed, mode=mode, steps=steps_override)
