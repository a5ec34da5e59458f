import json

import numpy as np
import pandas as pd
import pytest

from textcrystal.core.exceptions import DataError, UnsupportedFeatureError
from textcrystal.services.composition import (
    atom_count,
    formula_string,
    parse_formula,
    reduced_composition,
    reduced_formula_of_labels,
    same_reduced_composition,
)
from textcrystal.services.crystal import CrystalSystem, classify_crystal_system
from textcrystal.services.dataset_io import (
    cif_float,
    crystal_to_record,
    parse_cif_min,
    read_jsonl_dataset,
    read_frame,
    read_prompt_records,
    read_provenance,
    write_cif_min,
    write_frame,
    write_jsonl,
    write_jsonl_dataset,
)
from textcrystal.services.elements import get_element_table

CUBIC_BA = """data_ba
_cell_length_a 4.0
_cell_length_b 4.0
_cell_length_c 4.0(2)
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_symmetry_Int_Tables_number 221
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Ba1 Ba 0.0 0.0 0.0 1.0
"""


def test_parse_formula_and_reduction():
    counts = parse_formula("La(NiGe)2")
    assert counts == {"La": 1, "Ni": 2, "Ge": 2}
    assert atom_count("La(NiGe)2") == 5
    assert reduced_composition("Ba2Ti2O6") == {"Ba": 1, "Ti": 1, "O": 3}
    assert same_reduced_composition(parse_formula("LaNi2Ge2"), parse_formula("La(NiGe)2"))


def test_formula_string_orders_by_atomic_number():
    assert formula_string({"Ba": 1, "Ti": 1, "O": 3}) == "O3TiBa"
    table = get_element_table()
    labels = [table.label("Na"), table.label("Cl"), table.label("Na"), table.label("Cl")]
    assert reduced_formula_of_labels(labels) == "NaCl"


@pytest.mark.parametrize("bad", ["", "Xx2", "La(Ni", "Ni)2", "2Ni"])
def test_parse_formula_errors(bad):
    with pytest.raises(DataError):
        parse_formula(bad)


def test_jsonl_round_trip_is_exact(tmp_path, toy_crystals):
    path = tmp_path / "toy.jsonl"
    write_jsonl_dataset(toy_crystals[:5], path, provenance={"tool": "test"})
    loaded = read_jsonl_dataset(path)
    assert [crystal_to_record(c) for c in loaded] == [crystal_to_record(c) for c in toy_crystals[:5]]
    first_line = json.loads(path.read_text().splitlines()[0])
    assert "_provenance" in first_line


def test_jsonl_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        json.dumps({"id": "a", "atom_types": [0], "frac_coords": [[0, 0, 0]], "lattice": np.eye(3).tolist()})
        + "\n\n{not json}\n"
    )
    with pytest.raises(DataError, match=":3:"):
        read_jsonl_dataset(path)

    path.write_text(json.dumps({"id": "a", "atom_types": [0], "frac_coords": [[0, 0]], "lattice": np.eye(3).tolist()}))
    with pytest.raises(DataError, match=":1:"):
        read_jsonl_dataset(path)

    path.write_text(json.dumps({"id": "a", "atom_types": [0], "frac_coords": [[0, 0, 0]],
                                "lattice": (-np.eye(3)).tolist()}))
    with pytest.raises(DataError, match="determinant"):
        read_jsonl_dataset(path)


def test_prompt_records_reject_duplicates(tmp_path):
    path = tmp_path / "prompts.jsonl"
    write_jsonl(path, [{"id": "a", "text": "x"}, {"id": "a", "text": "y"}])
    with pytest.raises(DataError, match="duplicate"):
        read_prompt_records(path)


def test_parse_cif_min_single_site():
    c = parse_cif_min(CUBIC_BA, id="ba")
    assert c.num_atoms == 1
    assert c.atom_types[0] == get_element_table().label("Ba")
    np.testing.assert_allclose(c.lattice, 4 * np.eye(3), atol=1e-12)
    assert classify_crystal_system(c.lattice) is CrystalSystem.CUBIC
    assert c.meta.spacegroup == 221


def test_cif_round_trip(toy_crystals):
    c = toy_crystals[0]
    back = parse_cif_min(write_cif_min(c))
    np.testing.assert_array_equal(back.atom_types, c.atom_types)
    np.testing.assert_allclose(back.frac_coords, c.frac_coords, atol=1e-9)
    np.testing.assert_allclose(back.lattice @ back.lattice.T, c.lattice @ c.lattice.T, atol=1e-7)


@pytest.mark.parametrize("extra", [
    "loop_\n_symmetry_equiv_pos_as_xyz\n'x, y, z'\n'-x, -y, -z'\n",
    "_space_group_symop_operation_xyz 'x,y,z'\n",
    "data_second\n",
])
def test_cif_unsupported_features(extra):
    with pytest.raises(UnsupportedFeatureError, match="unsupported"):
        parse_cif_min(CUBIC_BA + extra)


def test_cif_partial_occupancy_and_cartesian_rejected():
    with pytest.raises(UnsupportedFeatureError):
        parse_cif_min(CUBIC_BA.replace("0.0 0.0 0.0 1.0", "0.0 0.0 0.0 0.5"))
    cartesian = CUBIC_BA.replace("_atom_site_fract_", "_atom_site_Cartn_")
    with pytest.raises(UnsupportedFeatureError):
        parse_cif_min(cartesian)
    with pytest.raises(UnsupportedFeatureError):
        parse_cif_min(CUBIC_BA.replace("Ba1 Ba 0.0", "Ba1 Ba 0.0\n;\ntext\n;\n"))


def test_cif_missing_cell_is_data_error():
    with pytest.raises(DataError, match="cell"):
        parse_cif_min(CUBIC_BA.replace("_cell_angle_gamma 90\n", ""))


def test_cif_float_strips_uncertainty():
    assert cif_float("4.0(2)", "a") == 4.0
    with pytest.raises(DataError):
        cif_float("abc", "a")


def test_csv_tables_keep_their_provenance_line(tmp_path):
    frame = pd.DataFrame({"epoch": [0, 1], "total": [2.5, 1.25]})
    prov = {"tool": "textcrystal", "seed": 3, "config": {"epochs": 2}}
    path = write_frame(frame, tmp_path / "sub" / "history.csv", prov)
    assert path.read_text().startswith("# provenance: ")
    back, back_prov = read_frame(path)
    assert back_prov == prov
    pd.testing.assert_frame_equal(back, frame)

    plain, none = read_frame(write_frame(frame, tmp_path / "plain.csv"))
    assert none is None and list(plain.columns) == ["epoch", "total"]


def test_read_provenance_of_jsonl(tmp_path):
    path = tmp_path / "rows.jsonl"
    write_jsonl(path, [{"id": "a"}], provenance={"seed": 1})
    assert read_provenance(path) == {"seed": 1}
    write_jsonl(path, [{"id": "a"}])
    assert read_provenance(path) is None
