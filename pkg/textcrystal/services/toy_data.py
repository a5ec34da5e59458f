"""
Synthetic ABX3 perovskite-like dataset and deterministic splits
"""

import logging
from typing import List, Sequence, Tuple, TypeVar

import numpy as np

from textcrystal.core.exceptions import ConfigError
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.services.crystal import Crystal, classify_crystal_system
from textcrystal.services.elements import get_element_table

logger = logging.getLogger(__name__)

A_SITES = ("Na", "K", "Ca", "Sr", "Ba", "La")
B_SITES = ("Ti", "Zr", "Nb", "Mn", "Fe", "Al")
X_SITES = ("O", "F")

# A at the corner, B at the body center, X at the face centers
_SITES = np.array([
    [0.0, 0.0, 0.0],
    [0.5, 0.5, 0.5],
    [0.5, 0.5, 0.0],
    [0.5, 0.0, 0.5],
    [0.0, 0.5, 0.5],
])
CUBIC_SPACEGROUP = 221

T = TypeVar("T")


def make_toy_crystal(rng: np.random.Generator, index: int, rattle: float = 0.0, strain: float = 0.0) -> Crystal:
    """One ABX3 cell; ``rattle`` is a cartesian displacement std (Å), ``strain`` a relative one"""
    table = get_element_table()
    a_el, b_el, x_el = (str(rng.choice(sites)) for sites in (A_SITES, B_SITES, X_SITES))
    edge = float(rng.uniform(3.7, 4.3))
    lattice = edge * np.eye(3)
    if strain > 0:
        lattice = lattice @ (np.eye(3) + strain * rng.standard_normal((3, 3)))
    frac = _SITES.copy()
    if rattle > 0:
        frac = frac + rattle * rng.standard_normal(frac.shape) @ np.linalg.inv(lattice)

    band_gap = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.5, 6.0))
    hull = 0.0 if rng.random() < 0.5 else float(rng.uniform(0.01, 0.3))
    distorted = rattle > 0 or strain > 0
    meta = CrystalMeta(
        formula=f"{a_el}{b_el}{x_el}3",
        spacegroup=None if distorted else CUBIC_SPACEGROUP,
        crystal_system=classify_crystal_system(lattice).value if strain > 0 else "cubic",
        formation_energy=float(rng.normal(-1.0, 1.0)),
        band_gap=band_gap,
        e_above_hull=hull,
    )
    labels = [table.label(a_el), table.label(b_el)] + [table.label(x_el)] * 3
    return Crystal(
        atom_types=np.array(labels, dtype=np.int64),
        frac_coords=frac,
        lattice=lattice,
        id=f"toy-{index:05d}",
        meta=meta,
    )


def make_toy_dataset(num_structures: int = 200, seed: int = 0, rattle: float = 0.0,
                     strain: float = 0.0) -> List[Crystal]:
    if num_structures < 1:
        raise ConfigError("num_structures must be positive")
    rng = np.random.default_rng(seed)
    crystals = [make_toy_crystal(rng, i, rattle, strain) for i in range(num_structures)]
    logger.info(f"✅ Generated {num_structures} toy perovskites (seed {seed})")
    return crystals


def split_dataset(
    items: Sequence[T],
    seed: int = 0,
    fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> Tuple[List[T], List[T], List[T]]:
    """Shuffled train / val / test split; sizes are floor-rounded, test takes the rest"""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ConfigError(f"Split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(len(items) * fractions[0])
    n_val = int(len(items) * fractions[1])
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    train, val, test = ([items[i] for i in idx] for idx in parts)
    return train, val, test
