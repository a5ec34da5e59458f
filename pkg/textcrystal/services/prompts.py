"""
Short-prompt generation and parsing
"""

import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from textcrystal.core.config import settings
from textcrystal.core.exceptions import DataError, PromptParseError
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.schemas.prompt import FormationEnergySign, PromptConstraints, ZeroSign
from textcrystal.services.composition import formula_elements
from textcrystal.services.crystal import CrystalSystem

logger = logging.getLogger(__name__)

PROMPT_HEAD = "Below is a description of a bulk material."
PROMPT_TAIL = "Generate the material."

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_FLAGS = re.IGNORECASE
_FORMULA_RE = re.compile(r"the chemical formula is\s+([A-Za-z0-9()]+(?:\.\d[A-Za-z0-9()]*)*)", _FLAGS)
_ELEMENTS_RE = re.compile(r"the elements are\s+([A-Za-z,\s]+?)\s*\.", _FLAGS)
_FORMATION_RE = re.compile(rf"the formation energy is\s+(negative|positive|zero|{_NUMBER})", _FLAGS)
_BAND_GAP_RE = re.compile(rf"the band gap is\s+(non-?zero|zero|{_NUMBER})", _FLAGS)
_HULL_RE = re.compile(rf"the energy above the convex hull is\s+(non-?zero|zero|{_NUMBER})", _FLAGS)
_SPACEGROUP_RE = re.compile(r"the space\s?group(?: number)? is\s+(\d+)", _FLAGS)
_SYSTEM_RE = re.compile(r"the crystal system is\s+([A-Za-z]+)", _FLAGS)


@dataclass(frozen=True)
class PromptRecord:
    """Prompt text, its parsed constraints (if any) and its raw text vector"""

    id: str
    text: str
    constraints: Optional[PromptConstraints]
    embedding: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.embedding, dtype=float)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise DataError(f"Prompt {self.id!r} has a non-finite or non-vector embedding")
        vec = vec.copy()
        vec.flags.writeable = False
        object.__setattr__(self, "embedding", vec)


def formation_energy_sign(value: Optional[float], tol: Optional[float] = None) -> FormationEnergySign:
    if value is None:
        return FormationEnergySign.UNSPECIFIED
    tol = settings.ZERO_TOLERANCE if tol is None else tol
    if value < -tol:
        return FormationEnergySign.NEGATIVE
    if value > tol:
        return FormationEnergySign.POSITIVE
    return FormationEnergySign.ZERO


def zero_sign(value: Optional[float], tol: Optional[float] = None) -> ZeroSign:
    if value is None:
        return ZeroSign.UNSPECIFIED
    tol = settings.ZERO_TOLERANCE if tol is None else tol
    return ZeroSign.ZERO if abs(value) <= tol else ZeroSign.NONZERO


def constraints_from_meta(meta: CrystalMeta, elements: Optional[Sequence[str]] = None) -> PromptConstraints:
    """Constraint fields a short prompt built from ``meta`` carries"""
    if not meta.formula:
        raise DataError("Crystal metadata has no formula")
    return PromptConstraints(
        formula=meta.formula,
        elements=tuple(elements) if elements else formula_elements(meta.formula),
        formation_energy_sign=formation_energy_sign(meta.formation_energy),
        band_gap_sign=zero_sign(meta.band_gap),
        e_above_hull_sign=zero_sign(meta.e_above_hull),
        spacegroup=meta.spacegroup,
        crystal_system=meta.crystal_system,
    )


def make_short_prompt(meta: CrystalMeta, elements: Optional[Sequence[str]] = None) -> str:
    """Render the short prompt template; clauses without metadata are omitted.

    Elements default to their order of first appearance in the formula.
    """
    c = constraints_from_meta(meta, elements)
    parts = [
        PROMPT_HEAD,
        f"The chemical formula is {c.formula}.",
        f"The elements are {', '.join(c.elements)}.",
    ]
    if c.formation_energy_sign is not FormationEnergySign.UNSPECIFIED:
        parts.append(f"The formation energy is {c.formation_energy_sign.value}.")
    if c.band_gap_sign is not ZeroSign.UNSPECIFIED:
        parts.append(f"The band gap is {c.band_gap_sign.value}.")
    if c.e_above_hull_sign is not ZeroSign.UNSPECIFIED:
        parts.append(f"The energy above the convex hull is {c.e_above_hull_sign.value}.")
    if c.spacegroup is not None:
        parts.append(f"The spacegroup number is {c.spacegroup}.")
    if c.crystal_system:
        parts.append(f"The crystal system is {c.crystal_system}.")
    parts.append(PROMPT_TAIL)
    return " ".join(parts)


def _zero_bucket(token: str) -> ZeroSign:
    low = token.lower()
    if low in ("nonzero", "non-zero"):
        return ZeroSign.NONZERO
    if low == "zero":
        return ZeroSign.ZERO
    return zero_sign(float(token))


def parse_prompt(text: str) -> PromptConstraints:
    """Recover constraint fields from prompt text.

    Clauses may appear anywhere and in any order; unknown sentences are ignored.
    Numeric property values are bucketed by sign.
    """
    m = _FORMULA_RE.search(text or "")
    if m is None:
        raise PromptParseError("Prompt has no chemical formula clause")
    formula = m.group(1)

    elements: tuple = ()
    m = _ELEMENTS_RE.search(text)
    if m:
        elements = tuple(e for e in re.split(r"[,\s]+", m.group(1)) if e)

    formation = FormationEnergySign.UNSPECIFIED
    m = _FORMATION_RE.search(text)
    if m:
        token = m.group(1).lower()
        if token in ("negative", "positive", "zero"):
            formation = FormationEnergySign(token)
        else:
            formation = formation_energy_sign(float(token))

    band_gap = ZeroSign.UNSPECIFIED
    m = _BAND_GAP_RE.search(text)
    if m:
        band_gap = _zero_bucket(m.group(1))

    hull = ZeroSign.UNSPECIFIED
    m = _HULL_RE.search(text)
    if m:
        hull = _zero_bucket(m.group(1))

    spacegroup = None
    m = _SPACEGROUP_RE.search(text)
    if m:
        spacegroup = int(m.group(1))

    crystal_system = None
    m = _SYSTEM_RE.search(text)
    if m:
        label = m.group(1).lower()
        if label in {s.value for s in CrystalSystem}:
            crystal_system = label
        else:
            logger.warning(f"⚠️ Ignoring unknown crystal system {m.group(1)!r} in prompt")

    try:
        return PromptConstraints(
            formula=formula,
            elements=elements,
            formation_energy_sign=formation,
            band_gap_sign=band_gap,
            e_above_hull_sign=hull,
            spacegroup=spacegroup,
            crystal_system=crystal_system,
        )
    except ValidationError as e:
        raise PromptParseError(f"Inconsistent prompt constraints: {e.errors()[0].get('msg')}")


def try_parse_prompt(text: str) -> Optional[PromptConstraints]:
    """``parse_prompt`` for free-form descriptions that may carry no formula"""
    try:
        return parse_prompt(text)
    except DataError:
        return None
