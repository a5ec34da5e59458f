"""
Generation metrics: validity, coverage, property statistics, prompt correctness
"""

import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.spatial.distance import cdist

from textcrystal.core.config import settings
from textcrystal.core.exceptions import DataError
from textcrystal.schemas.config import CoverageConfig, MatcherConfig
from textcrystal.schemas.prompt import FormationEnergySign, PromptConstraints, ZeroSign
from textcrystal.schemas.report import EvalReport
from textcrystal.services.composition import (
    composition_of_labels,
    parse_formula,
    reduce_counts,
    same_reduced_composition,
)
from textcrystal.services.crystal import Crystal, classify_crystal_system, distance_matrix, neighbor_distances
from textcrystal.services.dataset_io import write_frame
from textcrystal.services.elements import NUM_TYPE_CLASSES, get_element_table
from textcrystal.services.matcher import match_rate
from textcrystal.services.prompts import formation_energy_sign, zero_sign

logger = logging.getLogger(__name__)

MIN_ATOM_DISTANCE = 0.5  # Å, validity needs strictly more
AMU_PER_A3_TO_G_PER_CM3 = 1.66053906660
PROPERTY_NAMES = ("formation_energy", "band_gap", "e_above_hull")

Value = Union[float, str]
T = TypeVar("T")
R = TypeVar("R")


def _parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    """Ordered map, threaded when jobs > 1"""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# ---------------------------------------------------------------- validity

def structural_validity(c: Crystal, min_distance: float = MIN_ATOM_DISTANCE) -> bool:
    """Every pair (and every atom with its own images) is more than ``min_distance`` apart"""
    return bool(distance_matrix(c).min() > min_distance)


class CompositionValidity(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    INDETERMINATE = "indeterminate"  # element without tabulated states, or search too large
    ELEMENTAL = "elemental"

    @property
    def counts_valid(self) -> bool:
        return self in (CompositionValidity.VALID, CompositionValidity.ELEMENTAL)


def compositional_validity(c: Crystal, max_combinations: Optional[int] = None) -> CompositionValidity:
    """Charge neutrality with one common oxidation state per element.

    Single-element crystals are reported as ``ELEMENTAL``; they count as valid.
    """
    table = get_element_table()
    counts = reduce_counts(composition_of_labels(c.atom_types))
    if len(counts) == 1:
        return CompositionValidity.ELEMENTAL

    symbols = list(counts)
    states = [table.by_symbol(s).oxidation_states for s in symbols]
    if any(not s for s in states):
        logger.debug(f"No oxidation states for some of {symbols}")
        return CompositionValidity.INDETERMINATE
    limit = settings.OXIDATION_MAX_COMBINATIONS if max_combinations is None else max_combinations
    if int(np.prod([len(s) for s in states])) > limit:
        logger.warning(f"⚠️ Oxidation-state search for {symbols} exceeds {limit} combinations")
        return CompositionValidity.INDETERMINATE

    amounts = [counts[s] for s in symbols]
    for combo in itertools.product(*states):
        if sum(n * q for n, q in zip(amounts, combo)) == 0:
            return CompositionValidity.VALID
    return CompositionValidity.INVALID


def validity_rates(gens: Sequence[Crystal], jobs: int = 1) -> Tuple[float, Optional[float], int]:
    """(structural %, compositional % or None for all-elemental sets, indeterminate count)"""
    if not gens:
        raise DataError("Validity needs at least one crystal")
    struct = _parallel_map(structural_validity, gens, jobs)
    comp = _parallel_map(compositional_validity, gens, jobs)
    struct_pct = 100.0 * sum(struct) / len(gens)
    indeterminate = sum(v is CompositionValidity.INDETERMINATE for v in comp)
    if all(v is CompositionValidity.ELEMENTAL for v in comp):
        return struct_pct, None, indeterminate
    comp_pct = 100.0 * sum(v.counts_valid for v in comp) / len(gens)
    return struct_pct, comp_pct, indeterminate


# ---------------------------------------------------------------- coverage

def composition_vector(c: Crystal) -> np.ndarray:
    """Element fractions over the label space"""
    vec = np.bincount(c.atom_types, minlength=NUM_TYPE_CLASSES).astype(float)
    return vec / vec.sum()


def structure_descriptor(c: Crystal, cutoff: float = 6.0, bins: int = 40) -> np.ndarray:
    """L2-normalized histogram of periodic pair distances up to ``cutoff``"""
    hist, _ = np.histogram(neighbor_distances(c, cutoff), bins=bins, range=(0.0, cutoff))
    hist = hist.astype(float)
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def coverage(
    gens: Sequence[Crystal],
    refs: Sequence[Crystal],
    config: Optional[CoverageConfig] = None,
    jobs: int = 1,
) -> Tuple[float, float]:
    """(COV-R, COV-P): share of refs near some gen, and of gens near some ref"""
    cfg = config or CoverageConfig()
    if not gens or not refs:
        raise DataError("Coverage needs non-empty generated and reference sets")

    def descriptor(c: Crystal) -> np.ndarray:
        return structure_descriptor(c, cfg.cutoff, cfg.bins)

    gen_struct = np.stack(_parallel_map(descriptor, gens, jobs))
    ref_struct = np.stack(_parallel_map(descriptor, refs, jobs))
    gen_comp = np.stack([composition_vector(c) for c in gens])
    ref_comp = np.stack([composition_vector(c) for c in refs])

    close = (cdist(gen_struct, ref_struct) <= cfg.struct_thresh) & (cdist(gen_comp, ref_comp) <= cfg.comp_thresh)
    cov_r = 100.0 * float(close.any(axis=0).mean())
    cov_p = 100.0 * float(close.any(axis=1).mean())
    return cov_r, cov_p


# ---------------------------------------------------------------- property statistics

def emd_1d(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """Earth mover's distance between two 1-D empirical distributions (area between CDFs)"""
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DataError("EMD needs two non-empty samples")
    grid = np.sort(np.concatenate([a, b]))
    deltas = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def density(c: Crystal) -> float:
    """Mass density in g/cm³"""
    table = get_element_table()
    mass = sum(table.mass(int(label)) for label in c.atom_types)
    return mass / c.volume * AMU_PER_A3_TO_G_PER_CM3


def num_elements(c: Crystal) -> int:
    return int(np.unique(c.atom_types).size)


class PropertyPredictor(Protocol):
    """Anything that can estimate formation energy, band gap and hull energy of a crystal"""

    def predict(self, crystal: Crystal) -> Mapping[str, Optional[float]]:
        ...


class MetadataPropertyPredictor:
    """Reads the property values stored in crystal metadata"""

    def predict(self, crystal: Crystal) -> Mapping[str, Optional[float]]:
        meta = crystal.meta
        return {name: (getattr(meta, name) if meta is not None else None) for name in PROPERTY_NAMES}


def property_stats(
    gens: Sequence[Crystal],
    refs: Sequence[Crystal],
    predictor: Optional[PropertyPredictor] = None,
) -> Dict[str, Value]:
    """EMD of density, element count and (with a predictor) formation energy"""
    stats: Dict[str, Value] = {
        "density": emd_1d([density(c) for c in gens], [density(c) for c in refs]),
        "num_elements": emd_1d([num_elements(c) for c in gens], [num_elements(c) for c in refs]),
    }
    stats["formation_energy"] = "unavailable"
    if predictor is not None:
        gen_e = [v for v in (predictor.predict(c).get("formation_energy") for c in gens) if v is not None]
        ref_e = [v for v in (predictor.predict(c).get("formation_energy") for c in refs) if v is not None]
        if gen_e and ref_e:
            stats["formation_energy"] = emd_1d(gen_e, ref_e)
    return stats


# ---------------------------------------------------------------- prompt correctness

def prompt_correctness(
    gen: Crystal,
    constraints: PromptConstraints,
    predictor: Optional[PropertyPredictor] = None,
) -> Dict[str, Union[bool, str]]:
    """Per-field agreement between a generated crystal and the prompt it came from.

    Fields the prompt does not mention are absent from the result.
    """
    result: Dict[str, Union[bool, str]] = {
        "formula": same_reduced_composition(composition_of_labels(gen.atom_types),
                                            reduce_counts(parse_formula(constraints.formula))),
    }
    if constraints.crystal_system:
        result["crystal_system"] = classify_crystal_system(gen.lattice).value == constraints.crystal_system.lower()
    if constraints.spacegroup is not None:
        result["spacegroup"] = "unsupported"

    wanted = {
        "formation_energy": (constraints.formation_energy_sign, FormationEnergySign.UNSPECIFIED, formation_energy_sign),
        "band_gap": (constraints.band_gap_sign, ZeroSign.UNSPECIFIED, zero_sign),
        "e_above_hull": (constraints.e_above_hull_sign, ZeroSign.UNSPECIFIED, zero_sign),
    }
    predicted = predictor.predict(gen) if predictor is not None else {}
    for name, (target, unspecified, bucket) in wanted.items():
        if target is unspecified:
            continue
        value = predicted.get(name)
        result[name] = "skipped" if value is None else bucket(value) is target
    return result


def correctness_summary(results: Sequence[Mapping[str, Union[bool, str]]]) -> Dict[str, Value]:
    """Match percentage per field; fields that were never checked keep their reason string"""
    checked: Dict[str, List[bool]] = {}
    reasons: Dict[str, str] = {}
    for row in results:
        for field, value in row.items():
            if isinstance(value, bool):
                checked.setdefault(field, []).append(value)
            else:
                reasons.setdefault(field, value)
    summary: Dict[str, Value] = {}
    for field in sorted(set(checked) | set(reasons)):
        if field in checked:
            summary[field] = 100.0 * sum(checked[field]) / len(checked[field])
        else:
            summary[field] = reasons[field]
    return summary


# ---------------------------------------------------------------- full report

def prompt_key(c: Crystal) -> str:
    """Prompt a generated crystal answers: its recorded prompt id, else its own id"""
    if c.meta is not None and c.meta.prompt_id:
        return c.meta.prompt_id
    return c.id


class Evaluator:
    """Computes an ``EvalReport`` for a set of generated crystals"""

    def __init__(
        self,
        matcher: Optional[MatcherConfig] = None,
        coverage_config: Optional[CoverageConfig] = None,
        predictor: Optional[PropertyPredictor] = None,
        jobs: int = 1,
    ):
        self.matcher = matcher or MatcherConfig()
        self.coverage_config = coverage_config or CoverageConfig()
        self.predictor = predictor
        self.jobs = jobs

    def evaluate(
        self,
        gens: Sequence[Crystal],
        refs: Optional[Sequence[Crystal]] = None,
        prompts: Optional[Mapping[str, PromptConstraints]] = None,
    ) -> Tuple[EvalReport, Dict[str, float]]:
        """Report plus seconds spent per phase"""
        if not gens:
            raise DataError("No generated crystals to evaluate")
        refs = list(refs or [])
        timings: Dict[str, float] = {}
        fields: Dict[str, object] = {"num_gens": len(gens), "num_refs": len(refs)}

        started = time.perf_counter()
        struct_pct, comp_pct, indeterminate = validity_rates(gens, self.jobs)
        fields.update(struct_validity=struct_pct, comp_validity=comp_pct, comp_indeterminate=indeterminate)
        timings["validity"] = time.perf_counter() - started

        if refs:
            started = time.perf_counter()
            groups: Dict[str, List[Crystal]] = {}
            for g in gens:
                groups.setdefault(prompt_key(g), []).append(g)
            rate, rmse = match_rate([groups.get(r.id, []) for r in refs], refs, self.matcher, self.jobs)
            fields.update(match_rate=rate, mean_rmse=rmse)
            timings["matching"] = time.perf_counter() - started

            started = time.perf_counter()
            cov_r, cov_p = coverage(gens, refs, self.coverage_config, self.jobs)
            fields.update(cov_r=cov_r, cov_p=cov_p)
            timings["coverage"] = time.perf_counter() - started

            started = time.perf_counter()
            fields["emd"] = property_stats(gens, refs, self.predictor)
            timings["properties"] = time.perf_counter() - started

        if prompts is not None:
            started = time.perf_counter()
            rows = [
                prompt_correctness(g, prompts[prompt_key(g)], self.predictor)
                for g in gens
                if prompt_key(g) in prompts
            ]
            if len(rows) < len(gens):
                logger.warning(f"⚠️ {len(gens) - len(rows)} generated crystals have no parsed prompt")
            fields["correctness"] = correctness_summary(rows)
            timings["correctness"] = time.perf_counter() - started

        report = EvalReport(**fields)
        logger.info(f"✅ Evaluated {len(gens)} crystals against {len(refs)} references")
        return report, timings


def evaluate(
    gens: Sequence[Crystal],
    refs: Optional[Sequence[Crystal]] = None,
    prompts: Optional[Mapping[str, PromptConstraints]] = None,
    matcher: Optional[MatcherConfig] = None,
    coverage_config: Optional[CoverageConfig] = None,
    predictor: Optional[PropertyPredictor] = None,
    jobs: int = 1,
) -> Tuple[EvalReport, Dict[str, float]]:
    return Evaluator(matcher, coverage_config, predictor, jobs).evaluate(gens, refs, prompts)


# ---------------------------------------------------------------- report output

def check_report_schema(payload: Mapping[str, object]) -> EvalReport:
    """Validate a report payload; every metric key must be present, null or not"""
    missing = sorted(set(EvalReport.model_fields) - {"provenance"} - set(payload))
    if missing:
        raise DataError(f"Report is missing {missing}")
    try:
        return EvalReport.model_validate(payload, strict=True)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(x) for x in err.get("loc", ()))
        raise DataError(f"Report does not fit schema at {loc}: {err.get('msg')}") from e


def report_frame(report: EvalReport) -> pd.DataFrame:
    """One metric per row: name, value, count"""
    rows = []
    for name in ("match_rate", "mean_rmse"):
        rows.append((name, getattr(report, name), report.num_refs))
    for name in ("struct_validity", "comp_validity", "comp_indeterminate", "cov_p"):
        rows.append((name, getattr(report, name), report.num_gens))
    rows.append(("cov_r", report.cov_r, report.num_refs))
    for section in ("emd", "correctness", "timings"):
        for key, value in sorted(getattr(report, section).items()):
            rows.append((f"{section}.{key}", value, report.num_gens))
    return pd.DataFrame(rows, columns=["name", "value", "count"])


def write_report(report: EvalReport, path: Union[str, Path], csv_path: Optional[Union[str, Path]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = report.model_dump()
    check_report_schema(payload)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        write_frame(report_frame(report), csv_path, report.provenance)
    logger.info(f"📝 Report written to {path}")
    return path
