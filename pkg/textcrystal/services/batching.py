"""
Collation of crystals into flat atom batches
"""

from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch

from textcrystal.core.exceptions import DataError
from textcrystal.services.crystal import Crystal


@dataclass
class CrystalBatch:
    """B crystals with N atoms in total.

    Per-atom tensors are concatenated crystal after crystal; ``batch_index`` maps
    each atom to its crystal.
    """

    atom_types: torch.Tensor  # (N,) long
    frac_coords: torch.Tensor  # (N, 3)
    lattices: torch.Tensor  # (B, 3, 3)
    num_atoms: torch.Tensor  # (B,) long
    text: torch.Tensor  # (B, D)

    @property
    def num_crystals(self) -> int:
        return int(self.num_atoms.shape[0])

    @property
    def batch_index(self) -> torch.Tensor:
        return torch.repeat_interleave(
            torch.arange(self.num_crystals, device=self.num_atoms.device), self.num_atoms
        )

    def with_(self, **changes) -> "CrystalBatch":
        return replace(self, **changes)


def collate(
    crystals: Sequence[Crystal],
    text: np.ndarray,
    dtype: torch.dtype = torch.float32,
) -> CrystalBatch:
    """Stack crystals and their raw text vectors (one row per crystal)"""
    if not crystals:
        raise DataError("Cannot collate an empty list of crystals")
    text = np.asarray(text, dtype=np.float64)
    if text.ndim != 2 or text.shape[0] != len(crystals):
        raise DataError(f"Expected one text vector per crystal, got shape {text.shape}")
    return CrystalBatch(
        atom_types=torch.as_tensor(np.concatenate([c.atom_types for c in crystals]), dtype=torch.long),
        frac_coords=torch.as_tensor(np.concatenate([c.frac_coords for c in crystals]), dtype=dtype),
        lattices=torch.as_tensor(np.stack([c.lattice for c in crystals]), dtype=dtype),
        num_atoms=torch.as_tensor([c.num_atoms for c in crystals], dtype=torch.long),
        text=torch.as_tensor(text, dtype=dtype),
    )


def pair_index(num_atoms: torch.Tensor) -> torch.Tensor:
    """(2, E) ordered pairs (i, j) of atoms in the same crystal, self-pairs included"""
    pairs: List[torch.Tensor] = []
    offset = 0
    for n in num_atoms.tolist():
        idx = torch.arange(offset, offset + n)
        src, dst = torch.meshgrid(idx, idx, indexing="ij")
        pairs.append(torch.stack([src.reshape(-1), dst.reshape(-1)]))
        offset += n
    if not pairs:
        return torch.zeros(2, 0, dtype=torch.long)
    return torch.cat(pairs, dim=1).to(num_atoms.device)


def minibatches(size: int, batch_size: int, generator: Optional[torch.Generator] = None) -> Iterator[List[int]]:
    """Shuffled index chunks; the batch size is clamped to the dataset size"""
    batch_size = max(1, min(batch_size, size))
    order = torch.randperm(size, generator=generator).tolist()
    for start in range(0, size, batch_size):
        yield order[start:start + batch_size]
