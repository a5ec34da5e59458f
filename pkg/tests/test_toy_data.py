import numpy as np
import pytest

from textcrystal.core.exceptions import ConfigError
from textcrystal.services.composition import composition_of_labels, parse_formula, same_reduced_composition
from textcrystal.services.crystal import CrystalSystem, classify_crystal_system
from textcrystal.services.dataset_io import crystal_to_record
from textcrystal.services.toy_data import CUBIC_SPACEGROUP, make_toy_dataset, split_dataset


def test_toy_crystals_are_consistent(toy_crystals):
    assert len(toy_crystals) == 12
    assert len({c.id for c in toy_crystals}) == 12
    for c in toy_crystals:
        assert c.num_atoms == 5
        assert same_reduced_composition(composition_of_labels(c.atom_types), parse_formula(c.meta.formula))
        assert classify_crystal_system(c.lattice) is CrystalSystem.CUBIC
        assert c.meta.spacegroup == CUBIC_SPACEGROUP
        assert 3.7 <= c.lattice[0, 0] <= 4.3


def test_toy_dataset_is_seeded():
    a = [crystal_to_record(c) for c in make_toy_dataset(5, seed=3)]
    b = [crystal_to_record(c) for c in make_toy_dataset(5, seed=3)]
    c = [crystal_to_record(c) for c in make_toy_dataset(5, seed=4)]
    assert a == b
    assert a != c


def test_distorted_toy_crystals_drop_the_space_group():
    crystals = make_toy_dataset(8, seed=1, rattle=0.05, strain=0.05)
    for c in crystals:
        assert c.meta.spacegroup is None
        assert c.meta.crystal_system == classify_crystal_system(c.lattice).value
    with pytest.raises(ConfigError):
        make_toy_dataset(0)


def test_split_dataset():
    items = list(range(10))
    train, val, test = split_dataset(items, seed=0)
    assert (len(train), len(val), len(test)) == (6, 2, 2)
    assert sorted(train + val + test) == items
    assert split_dataset(items, seed=0) == (train, val, test)
    assert split_dataset(items, seed=1) != (train, val, test)
    for bad in [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)]:
        with pytest.raises(ConfigError):
            split_dataset(items, fractions=bad)


def test_toy_formation_energies_spread():
    energies = np.array([c.meta.formation_energy for c in make_toy_dataset(200, seed=0)])
    assert energies.mean() == pytest.approx(-1.0, abs=0.3)
    assert (energies > 0).any() and (energies < 0).any()
