import itertools
import json

import numpy as np
import pandas as pd
import pytest

from textcrystal.core.exceptions import DataError
from textcrystal.schemas.config import CoverageConfig
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.schemas.prompt import FormationEnergySign, PromptConstraints, ZeroSign
from textcrystal.services.crystal import Crystal
from textcrystal.services.elements import get_element_table
from textcrystal.services.evaluation import (
    CompositionValidity,
    Evaluator,
    MetadataPropertyPredictor,
    check_report_schema,
    compositional_validity,
    correctness_summary,
    coverage,
    density,
    emd_1d,
    num_elements,
    prompt_correctness,
    property_stats,
    report_frame,
    structural_validity,
    validity_rates,
    write_report,
)

TABLE = get_element_table()


def _crystal(symbols, frac, lattice=None, meta=None, id=""):
    return Crystal(
        atom_types=np.array([TABLE.label(s) for s in symbols]),
        frac_coords=np.asarray(frac, dtype=float),
        lattice=np.eye(3) * 4.0 if lattice is None else lattice,
        id=id,
        meta=meta,
    )


def test_structural_validity_threshold():
    assert structural_validity(_crystal(["Na", "Cl"], [[0, 0, 0], [0.5, 0.5, 0.5]]))
    assert not structural_validity(_crystal(["Na", "Cl"], [[0, 0, 0], [0.1, 0, 0]], lattice=np.eye(3) * 4.8))
    # a single atom only sees its own images
    assert not structural_validity(_crystal(["Po"], [[0, 0, 0]], lattice=np.eye(3) * 0.4))


@pytest.mark.parametrize("symbols, expected", [
    (["Na", "Cl"], CompositionValidity.VALID),
    (["Ba", "Pd", "Pd"], CompositionValidity.INVALID),
    (["Na", "He"], CompositionValidity.INDETERMINATE),
    (["C", "C"], CompositionValidity.ELEMENTAL),
    (["Ba", "O"], CompositionValidity.VALID),
    (["La", "Ni", "Ni", "Ge", "Ge"], CompositionValidity.INVALID),
])
def test_compositional_validity(symbols, expected):
    frac = [[i / len(symbols), 0.3, 0.1] for i in range(len(symbols))]
    assert compositional_validity(_crystal(symbols, frac)) is expected


def test_compositional_search_limit():
    c = _crystal(["Na", "Cl"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    assert compositional_validity(c, max_combinations=1) is CompositionValidity.INDETERMINATE


def test_validity_rates():
    good = _crystal(["Na", "Cl"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    bad = _crystal(["Ba", "Pd", "Pd"], [[0, 0, 0], [0.5, 0.5, 0.5], [0.05, 0, 0]])
    odd = _crystal(["Na", "He"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    struct, comp, indeterminate = validity_rates([good, bad, odd, good], jobs=2)
    assert struct == 75.0
    assert comp == 50.0
    assert indeterminate == 1
    assert validity_rates([_crystal(["C"], [[0, 0, 0]])])[1] is None
    with pytest.raises(DataError):
        validity_rates([])


def test_compositional_rate_counts_elemental_valid_and_indeterminate_invalid():
    nacl = _crystal(["Na", "Cl"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    carbon = _crystal(["C"], [[0, 0, 0]])
    na_he = _crystal(["Na", "He"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    ba_pd = _crystal(["Ba", "Pd", "Pd"], [[0, 0, 0], [0.5, 0.5, 0.5], [0.25, 0.25, 0.25]])
    _, comp, indeterminate = validity_rates([nacl, carbon, na_he, ba_pd])
    assert comp == 50.0
    assert indeterminate == 1
    assert validity_rates([carbon, carbon])[1] is None


def test_coverage_identity_and_disjoint(toy_crystals):
    assert coverage(toy_crystals, toy_crystals) == (100.0, 100.0)
    far = [_crystal(["He", "He"], [[0, 0, 0], [0.5, 0.5, 0.5]], lattice=np.eye(3) * 9.0)]
    cov_r, cov_p = coverage(far, toy_crystals)
    assert cov_r == 0.0 and cov_p == 0.0
    with pytest.raises(DataError):
        coverage([], toy_crystals)


def test_coverage_grows_with_thresholds(toy_crystals):
    gens, refs = toy_crystals[:6], toy_crystals[6:]
    previous = (0.0, 0.0)
    for thresh in (0.05, 0.2, 0.5, 1.0, 2.0):
        current = coverage(gens, refs, CoverageConfig(struct_thresh=thresh, comp_thresh=thresh))
        assert current[0] >= previous[0] and current[1] >= previous[1]
        previous = current
    assert previous == (100.0, 100.0)


def test_emd_matches_optimal_transport_on_equal_samples(rng):
    for _ in range(10):
        a, b = rng.normal(size=5), rng.normal(1.0, 2.0, size=5)
        best = min(np.mean(np.abs(a - b[list(p)])) for p in itertools.permutations(range(5)))
        assert emd_1d(a, b) == pytest.approx(best, abs=1e-12)


def test_emd_properties(rng):
    a, b, c = rng.normal(size=30), rng.normal(0.5, size=20), rng.uniform(-1, 2, size=11)
    assert emd_1d(a, a) == 0.0
    assert emd_1d(a, b) == pytest.approx(emd_1d(b, a))
    assert emd_1d(a, c) <= emd_1d(a, b) + emd_1d(b, c) + 1e-12
    assert emd_1d([0.0], [3.0]) == pytest.approx(3.0)
    with pytest.raises(DataError):
        emd_1d([], [1.0])


def test_density_and_element_count():
    po = _crystal(["Po"], [[0, 0, 0]], lattice=np.eye(3) * 3.35)
    assert density(po) == pytest.approx(209.0 / 3.35 ** 3 * 1.66053906660)
    assert density(po) == pytest.approx(9.23, abs=0.01)
    assert num_elements(_crystal(["La", "Ni", "Ni", "Ge", "Ge"], np.random.default_rng(0).random((5, 3)))) == 3


def test_property_stats_with_metadata_predictor(toy_crystals):
    stats = property_stats(toy_crystals, toy_crystals)
    assert stats["density"] == 0.0 and stats["num_elements"] == 0.0
    assert stats["formation_energy"] == "unavailable"
    stats = property_stats(toy_crystals[:6], toy_crystals[6:], MetadataPropertyPredictor())
    assert isinstance(stats["formation_energy"], float) and stats["formation_energy"] > 0


def test_prompt_correctness_fields(nacl):
    constraints = PromptConstraints(
        formula="Na2Cl2",
        formation_energy_sign=FormationEnergySign.NEGATIVE,
        band_gap_sign=ZeroSign.NONZERO,
        spacegroup=225,
        crystal_system="cubic",
    )
    result = prompt_correctness(nacl, constraints)
    assert result == {
        "formula": True,
        "crystal_system": True,
        "spacegroup": "unsupported",
        "formation_energy": "skipped",
        "band_gap": "skipped",
    }
    with_values = nacl.with_(meta=CrystalMeta(formula="NaCl", formation_energy=-2.0, band_gap=0.0))
    result = prompt_correctness(with_values, constraints, MetadataPropertyPredictor())
    assert result["formation_energy"] is True
    assert result["band_gap"] is False
    assert prompt_correctness(nacl, PromptConstraints(formula="KCl")) == {"formula": False}


def test_correctness_summary():
    rows = [{"formula": True, "spacegroup": "unsupported"}, {"formula": False, "spacegroup": "unsupported"}]
    assert correctness_summary(rows) == {"formula": 50.0, "spacegroup": "unsupported"}


def test_evaluator_on_reference_set_itself(toy_crystals):
    prompts = {c.id: PromptConstraints(formula=c.meta.formula) for c in toy_crystals}
    report, timings = Evaluator(jobs=2).evaluate(toy_crystals, toy_crystals, prompts)
    assert report.num_gens == report.num_refs == len(toy_crystals)
    assert report.match_rate == 100.0
    assert report.mean_rmse == pytest.approx(0.0, abs=1e-9)
    assert report.struct_validity == 100.0
    assert report.cov_r == report.cov_p == 100.0
    assert report.emd["density"] == 0.0 and report.emd["num_elements"] == 0.0
    assert report.correctness == {"formula": 100.0}
    assert set(timings) == {"validity", "matching", "coverage", "properties", "correctness"}


def test_evaluator_without_references(toy_crystals):
    report, timings = Evaluator().evaluate(toy_crystals)
    assert report.match_rate is None and report.cov_r is None
    assert report.emd == {} and report.correctness == {}
    assert set(timings) == {"validity"}
    with pytest.raises(DataError):
        Evaluator().evaluate([])


def test_report_output(tmp_path, toy_crystals):
    report, _ = Evaluator().evaluate(toy_crystals[:4], toy_crystals[:4])
    path = write_report(report, tmp_path / "out" / "report.json", tmp_path / "report.csv")
    payload = json.loads(path.read_text())
    check_report_schema(payload)
    assert payload["match_rate"] == 100.0
    frame = pd.read_csv(tmp_path / "report.csv")
    assert list(frame.columns) == ["name", "value", "count"]
    assert "emd.density" in set(frame["name"])
    assert report_frame(report).set_index("name").loc["cov_r", "count"] == 4

    payload["struct_validity"] = "high"
    with pytest.raises(DataError):
        check_report_schema(payload)
    payload.pop("struct_validity")
    with pytest.raises(DataError, match="missing"):
        check_report_schema(payload)


def test_report_validation_uses_the_report_model(toy_crystals):
    report, _ = Evaluator().evaluate(toy_crystals[:3], toy_crystals[:3])
    payload = json.loads(json.dumps(report.model_dump()))
    assert check_report_schema(payload) == report

    for key, value in [("cov_r", 120.0), ("num_gens", -1), ("match_rate", "50"), ("emd", [])]:
        bad = dict(payload, **{key: value})
        with pytest.raises(DataError, match=key):
            check_report_schema(bad)
    with pytest.raises(DataError, match="surprise"):
        check_report_schema(dict(payload, surprise=1))
    assert check_report_schema({k: v for k, v in payload.items() if k != "provenance"}).provenance is None
