"""
Training loop: sample t, corrupt lattice/coordinates/types, denoise, minimize
the combined loss
"""

import logging
import time
from collections import Counter
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from textcrystal.core.exceptions import ConfigError, EmbeddingLookupError, NumericError
from textcrystal.schemas.config import DenoiserConfig, ScheduleConfig, TextEncoderConfig, TrainConfig
from textcrystal.services.batching import CrystalBatch, collate, minibatches
from textcrystal.services.checkpoint import Checkpoint, encode_rng_state
from textcrystal.services.crystal import Crystal
from textcrystal.services.denoiser import Denoiser, init_denoiser
from textcrystal.services.diffusion import (
    LossBreakdown,
    NoiseDraws,
    combine_losses,
    coord_loss,
    forward_coords,
    forward_lattice,
    forward_types,
    lattice_loss,
    sigma_tensor,
    type_loss,
    wn_score,
)
from textcrystal.services.schedules import NoiseSchedules, build_schedules

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def coord_prediction(raw: torch.Tensor, sigma_atom: torch.Tensor, weighting: str) -> torch.Tensor:
    """Score estimate from the coordinate head: r / σ under ``sigma2``, r under ``unit``"""
    if weighting == "sigma2":
        return raw / sigma_atom.view(-1, 1)
    return raw


def compute_batch_loss(
    model: Denoiser,
    batch: CrystalBatch,
    t: torch.Tensor,
    draws: NoiseDraws,
    schedules: NoiseSchedules,
    config: TrainConfig,
    drop_text: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Loss of one batch for fixed time steps and noise draws"""
    atom_crystal = batch.batch_index
    t_atom = t[atom_crystal]
    eps_L = draws.eps_L.to(batch.lattices.dtype)
    eps_X = draws.eps_X.to(batch.frac_coords.dtype)

    L_t = forward_lattice(batch.lattices, t, schedules.ddpm, eps_L)
    X_t = forward_coords(batch.frac_coords, t_atom, schedules.sigma, eps_X)
    a_t = forward_types(batch.atom_types, t_atom, schedules.d3pm, draws.type_draw)

    out = model(a_t, X_t, L_t, t, batch.text, batch.num_atoms, drop_text)

    sigma_atom = sigma_tensor(schedules.sigma, t_atom, X_t)
    target = wn_score(X_t, batch.frac_coords, sigma_atom.view(-1, 1), config.wn_k_max)
    score_hat = coord_prediction(out.eps_hat_X, sigma_atom, config.coord_weighting)
    vb, ce = type_loss(out.a0_logits, batch.atom_types, a_t, t_atom, schedules.d3pm)
    parts = {
        "lattice": lattice_loss(eps_L, out.eps_hat_L),
        "coord": coord_loss(target, score_hat, sigma_atom, config.coord_weighting),
        "vb": vb,
        "ce": ce,
    }
    return combine_losses(
        parts,
        lambda_lattice=config.lambda_lattice,
        lambda_type=config.lambda_type,
        lambda_coord=config.lambda_coord,
        lambda_ce=schedules.d3pm.lambda_ce,
    )


class Trainer:
    """Fits a denoiser to a crystal dataset with per-crystal text vectors"""

    def __init__(
        self,
        train_config: Optional[TrainConfig] = None,
        schedule_config: Optional[ScheduleConfig] = None,
        denoiser_config: Optional[DenoiserConfig] = None,
        text_encoder: Optional[TextEncoderConfig] = None,
        show_progress: bool = False,
    ):
        self.config = train_config or TrainConfig()
        self.schedule_config = schedule_config or ScheduleConfig()
        self.denoiser_config = denoiser_config or DenoiserConfig()
        self.text_encoder = text_encoder
        self.show_progress = show_progress
        self.dtype = _DTYPES[self.config.dtype]
        self.schedules = build_schedules(self.schedule_config, k=self.denoiser_config.k_classes)
        self.epoch_seconds: List[float] = []
        self.model: Optional[Denoiser] = None

    def _text_matrix(self, crystals: Sequence[Crystal], text_vectors: Mapping[str, np.ndarray]) -> np.ndarray:
        rows = []
        for c in crystals:
            if c.id not in text_vectors:
                raise EmbeddingLookupError(f"No prompt embedding for crystal {c.id!r}")
            rows.append(np.asarray(text_vectors[c.id], dtype=np.float64))
        matrix = np.stack(rows)
        if matrix.shape[1] != self.denoiser_config.text_input_dim:
            raise ConfigError(
                f"Text vectors have dimension {matrix.shape[1]}, denoiser expects "
                f"{self.denoiser_config.text_input_dim}"
            )
        return matrix

    def _optimizer(self, model: Denoiser) -> torch.optim.Optimizer:
        params = [p for p in model.parameters() if p.requires_grad]
        cls = torch.optim.AdamW if self.config.optimizer == "adamw" else torch.optim.Adam
        return cls(params, lr=self.config.learning_rate, weight_decay=self.config.weight_decay)

    def train(self, crystals: Sequence[Crystal], text_vectors: Mapping[str, np.ndarray]) -> Checkpoint:
        """Run every epoch and return the final checkpoint"""
        if not crystals:
            raise ConfigError("Training needs at least one crystal")
        cfg = self.config
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)

        text = self._text_matrix(crystals, text_vectors)
        model = init_denoiser(self.denoiser_config, self.schedule_config.timesteps).to(self.dtype)
        model.train()
        optimizer = self._optimizer(model)
        scheduler = None
        if cfg.lr_scheduler == "plateau":
            scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
                optimizer, mode="min", factor=cfg.lr_factor, patience=cfg.lr_patience, min_lr=cfg.min_lr
            )
        generator = torch.Generator().manual_seed(cfg.seed)
        T = self.schedule_config.timesteps
        history: List[Dict[str, float]] = []
        self.epoch_seconds = []

        logger.info(f"🚀 Training on {len(crystals)} crystals for {cfg.epochs} epochs (T={T})")
        epochs = tqdm(range(1, cfg.epochs + 1), desc="train", disable=not self.show_progress)
        for epoch in epochs:
            started = time.perf_counter()
            sums = np.zeros(5)
            seen = 0
            for batch_id, indices in enumerate(minibatches(len(crystals), cfg.batch_size, generator)):
                batch = collate([crystals[i] for i in indices], text[indices], dtype=self.dtype)
                B = batch.num_crystals
                t = torch.randint(1, T + 1, (B,), generator=generator)
                draws = NoiseDraws.draw(B, int(batch.num_atoms.sum()), generator, self.dtype)
                drop = torch.rand(B, generator=generator) < self.denoiser_config.text_dropout

                losses = compute_batch_loss(model, batch, t, draws, self.schedules, cfg, drop)
                if not losses.is_finite():
                    values = ", ".join(f"{k}={v:.4g}" for k, v in losses.to_dict().items())
                    raise NumericError(f"Non-finite loss at epoch {epoch}, batch {batch_id}: {values}")

                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                if cfg.grad_clip_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
                optimizer.step()

                item = losses.item()
                sums += B * np.array([item.lattice_loss, item.coord_loss, item.type_vb_loss,
                                      item.type_ce_loss, item.total])
                seen += B

            means = sums / seen
            row = {
                "epoch": epoch,
                "lattice_loss": float(means[0]),
                "coord_loss": float(means[1]),
                "type_vb_loss": float(means[2]),
                "type_ce_loss": float(means[3]),
                "total": float(means[4]),
                "lr": float(optimizer.param_groups[0]["lr"]),
            }
            history.append(row)
            if scheduler is not None:
                scheduler.step(row["total"])
            self.epoch_seconds.append(time.perf_counter() - started)
            epochs.set_postfix(loss=f"{row['total']:.4f}")
            logger.debug(f"Epoch {epoch}: total={row['total']:.5f}")

        logger.info(f"✅ Training finished: loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}")
        self.model = model
        return Checkpoint.from_model(
            model,
            schedule=self.schedule_config,
            train=cfg,
            text_encoder=self.text_encoder,
            rng_state=encode_rng_state(generator),
            epoch=cfg.epochs,
            loss_history=history,
            num_atoms_histogram=dict(sorted(Counter(c.num_atoms for c in crystals).items())),
        )


def train(
    crystals: Sequence[Crystal],
    text_vectors: Mapping[str, np.ndarray],
    train_config: Optional[TrainConfig] = None,
    schedule_config: Optional[ScheduleConfig] = None,
    denoiser_config: Optional[DenoiserConfig] = None,
    text_encoder: Optional[TextEncoderConfig] = None,
) -> Checkpoint:
    return Trainer(train_config, schedule_config, denoiser_config, text_encoder).train(crystals, text_vectors)
