"""
Shared fixtures: small crystals, seeded generators and tiny model configs
"""

import numpy as np
import pytest
import torch

from textcrystal.core.config import settings
from textcrystal.schemas.config import DenoiserConfig, ScheduleConfig, TrainConfig
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.services.crystal import Crystal, LatticeParams, lattice_from_params
from textcrystal.services.elements import get_element_table
from textcrystal.services.toy_data import make_toy_dataset

settings.LOG_TO_FILE = False


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_crystal(rng: np.random.Generator, n_atoms: int = 4, labels=None, id: str = "") -> Crystal:
    """Triclinic cell of moderate shape with random sites"""
    params = LatticeParams(
        a=float(rng.uniform(3.0, 6.0)),
        b=float(rng.uniform(3.0, 6.0)),
        c=float(rng.uniform(3.0, 6.0)),
        alpha=float(rng.uniform(70.0, 110.0)),
        beta=float(rng.uniform(70.0, 110.0)),
        gamma=float(rng.uniform(70.0, 110.0)),
    )
    if labels is None:
        labels = rng.integers(0, 90, size=n_atoms)
    return Crystal(
        atom_types=np.asarray(labels, dtype=np.int64),
        frac_coords=rng.random((len(labels), 3)),
        lattice=lattice_from_params(params),
        id=id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def nacl():
    table = get_element_table()
    return Crystal(
        atom_types=np.array([table.label("Na"), table.label("Cl")]),
        frac_coords=np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]),
        lattice=3.0 * np.eye(3),
        id="nacl",
        meta=CrystalMeta(formula="NaCl", crystal_system="cubic"),
    )


@pytest.fixture
def toy_crystals():
    return make_toy_dataset(12, seed=7)


@pytest.fixture
def tiny_schedule():
    return ScheduleConfig(timesteps=10)


@pytest.fixture
def tiny_denoiser():
    return DenoiserConfig(
        num_layers=2,
        hidden_dim=16,
        fourier_freqs=3,
        time_embed_dim=8,
        text_input_dim=8,
        text_proj_dim=8,
        text_dropout=0.0,
    )


@pytest.fixture
def tiny_train():
    return TrainConfig(epochs=2, batch_size=4, lr_scheduler="none", dtype="float64")
