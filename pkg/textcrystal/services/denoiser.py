"""
Text-guided periodic-equivariant denoising network

Node inputs fuse an atom-type embedding, a sinusoidal time embedding and the
projected text vector. Each message-passing layer sees atom pairs only through
the row Gram matrix L Lᵀ and Fourier features of fractional differences, so
node features are invariant to rotations and common fractional shifts. The
lattice head multiplies an invariant 3x3 by L, which makes it rotate with the cell.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch
from torch import nn

from textcrystal.core.exceptions import NumericError
from textcrystal.schemas.config import DenoiserConfig
from textcrystal.services.batching import CrystalBatch, pair_index

logger = logging.getLogger(__name__)

_ACTIVATIONS: Dict[str, Callable[[], nn.Module]] = {
    "silu": nn.SiLU,
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
}
_GRAM_ROWS, _GRAM_COLS = torch.triu_indices(3, 3)


def fourier_features(d: torch.Tensor, n_f: int) -> torch.Tensor:
    """[sin(2πm d) for m = 1..n_f] followed by [cos(2πm d) for m = 1..n_f], per scalar"""
    m = torch.arange(1, n_f + 1, dtype=d.dtype, device=d.device)
    angles = 2.0 * math.pi * d.unsqueeze(-1) * m
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def time_embedding(t: torch.Tensor, dim: int, T: Optional[int] = None) -> torch.Tensor:
    """Sinusoidal encoding of integer steps: [sin(t w_i)] + [cos(t w_i)], w_i = 10000^(-i/half)"""
    t = torch.as_tensor(t)
    if T is not None and (torch.any(t < 0) or torch.any(t > T)):
        raise NumericError(f"Time step outside [0, {T}]")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def gram_features(lattices: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """The 6 independent entries of L Lᵀ, optionally divided by |det L|^(2/3)"""
    gram = lattices @ lattices.transpose(-1, -2)
    feats = gram[:, _GRAM_ROWS, _GRAM_COLS]
    if normalize:
        scale = torch.abs(torch.linalg.det(lattices)).clamp_min(1e-12) ** (2.0 / 3.0)
        feats = feats / scale.unsqueeze(-1)
    return feats


def _mlp(sizes: List[int], activation: str, final_activation: bool = False) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(n_in, n_out))
        if i < len(sizes) - 2 or final_activation:
            layers.append(_ACTIVATIONS[activation]())
    return nn.Sequential(*layers)


def _scatter_sum(values: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    out = values.new_zeros((size,) + values.shape[1:])
    return out.index_add_(0, index, values)


@dataclass
class DenoiserOutput:
    eps_hat_L: torch.Tensor  # (B, 3, 3)
    a0_logits: torch.Tensor  # (N, k)
    eps_hat_X: torch.Tensor  # (N, 3), raw coordinate head output


class MessageLayer(nn.Module):
    """h_i <- h_i + ρ_h(h_i, Σ_j ρ_m(h_i, h_j, gram, ψ(x_i - x_j)))"""

    def __init__(self, hidden_dim: int, fourier_freqs: int, activation: str):
        super().__init__()
        self.fourier_freqs = fourier_freqs
        self.norm = nn.LayerNorm(hidden_dim)
        edge_in = 2 * hidden_dim + 6 + 6 * fourier_freqs
        self.edge_mlp = _mlp([edge_in, hidden_dim, hidden_dim], activation, final_activation=True)
        self.node_mlp = _mlp([2 * hidden_dim, hidden_dim, hidden_dim], activation)

    def forward(self, h, frac, gram, pairs, atom_crystal):
        src, dst = pairs
        h_in = self.norm(h)
        diff = frac[src] - frac[dst]
        edge = torch.cat([
            h_in[src],
            h_in[dst],
            gram[atom_crystal[src]],
            fourier_features(diff, self.fourier_freqs).flatten(1),
        ], dim=-1)
        messages = _scatter_sum(self.edge_mlp(edge), src, h.shape[0])
        return h + self.node_mlp(torch.cat([h_in, messages], dim=-1))


class Denoiser(nn.Module):
    """Φ_θ(A_t, X_t, L_t, t, C) with lattice, type and coordinate heads"""

    def __init__(self, config: DenoiserConfig, timesteps: int):
        super().__init__()
        self.config = config
        self.timesteps = timesteps
        hidden = config.hidden_dim
        act = config.activation

        self.atom_embedding = nn.Embedding(config.k_classes + 1, config.embed_dim)
        self.text_projection = _mlp([config.text_input_dim, config.text_proj_dim, config.text_proj_dim], act)
        self.null_text = nn.Parameter(torch.randn(config.text_proj_dim) * 0.02)
        self.fusion = _mlp([config.embed_dim + config.time_embed_dim + config.text_proj_dim, hidden, hidden], act)
        self.layers = nn.ModuleList(
            MessageLayer(hidden, config.fourier_freqs, act) for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(hidden)
        self.lattice_head = _mlp([hidden, hidden, 9], act)
        self.type_head = _mlp([hidden, hidden, config.k_classes], act)
        self.coord_head = _mlp([hidden, hidden, 3], act)

        if config.freeze_text_projection:
            for p in self.text_projection.parameters():
                p.requires_grad_(False)

    def forward(
        self,
        atom_types: torch.Tensor,
        frac_coords: torch.Tensor,
        lattices: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        num_atoms: torch.Tensor,
        drop_text: Optional[torch.Tensor] = None,
    ) -> DenoiserOutput:
        for name, value in (("frac_coords", frac_coords), ("lattices", lattices), ("text", text)):
            if not torch.all(torch.isfinite(value)):
                raise NumericError(f"Denoiser input {name} contains non-finite values")
        dtype = frac_coords.dtype
        num_crystals = lattices.shape[0]
        atom_crystal = torch.repeat_interleave(torch.arange(num_crystals, device=num_atoms.device), num_atoms)

        context = self.text_projection(text)
        if drop_text is not None:
            context = torch.where(drop_text.view(-1, 1), self.null_text.expand_as(context), context)
        temb = time_embedding(t, self.config.time_embed_dim, self.timesteps).to(dtype)

        h = self.fusion(torch.cat([
            self.atom_embedding(atom_types),
            temb[atom_crystal],
            context[atom_crystal],
        ], dim=-1))

        gram = gram_features(lattices, self.config.normalize_gram)
        pairs = pair_index(num_atoms)
        for layer in self.layers:
            h = layer(h, frac_coords, gram, pairs, atom_crystal)
        h = self.final_norm(h)

        counts = num_atoms.to(dtype).view(-1, 1)
        pooled = _scatter_sum(h, atom_crystal, num_crystals) / counts
        M = self.lattice_head(pooled).view(-1, 3, 3)
        return DenoiserOutput(
            eps_hat_L=M @ lattices,
            a0_logits=self.type_head(h),
            eps_hat_X=self.coord_head(h),
        )

    def forward_batch(self, batch: CrystalBatch, t: torch.Tensor,
                      drop_text: Optional[torch.Tensor] = None) -> DenoiserOutput:
        return self(batch.atom_types, batch.frac_coords, batch.lattices, t, batch.text,
                    batch.num_atoms, drop_text)

    def parameter_groups(self) -> Dict[str, List[str]]:
        """Parameter names keyed by top-level submodule"""
        groups: Dict[str, List[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups


def init_denoiser(config: DenoiserConfig, timesteps: int, seed: Optional[int] = None) -> Denoiser:
    """Build a denoiser whose initial weights depend only on the seed"""
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config, timesteps)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"🧠 Denoiser initialized: {config.num_layers} layers, hidden {config.hidden_dim}, "
                f"{n_params} parameters (seed {seed})")
    return model


def compute_gradients(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Gradients of ``loss_fn(model)`` for every trainable parameter"""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise NumericError(f"Non-finite loss {float(loss)} in gradient computation")
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
        if p.requires_grad
    }
