"""
Prompt and embedding schemas
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class FormationEnergySign(str, Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    ZERO = "zero"
    UNSPECIFIED = "unspecified"


class ZeroSign(str, Enum):
    ZERO = "zero"
    NONZERO = "nonzero"
    UNSPECIFIED = "unspecified"


class PromptConstraints(BaseModel):
    """Fields carried by a short prompt"""

    model_config = ConfigDict(frozen=True)

    formula: str
    elements: Tuple[str, ...] = ()
    formation_energy_sign: FormationEnergySign = FormationEnergySign.UNSPECIFIED
    band_gap_sign: ZeroSign = ZeroSign.UNSPECIFIED
    e_above_hull_sign: ZeroSign = ZeroSign.UNSPECIFIED
    spacegroup: Optional[int] = None
    crystal_system: Optional[str] = None

    @field_validator("crystal_system")
    @classmethod
    def normalize_crystal_system(cls, v):
        return v.strip().lower() if v else v

    @model_validator(mode="after")
    def check_elements(self):
        if self.elements:
            from textcrystal.services.composition import parse_formula

            if set(self.elements) != set(parse_formula(self.formula)):
                raise ValueError(
                    f"Elements {sorted(self.elements)} do not match formula {self.formula}"
                )
        return self


class PromptRecordIn(BaseModel):
    """Prompt JSONL row; csp sampling also needs atom_types"""

    model_config = ConfigDict(extra="forbid")

    id: str
    text: str
    atom_types: Optional[List[int]] = None


class EmbeddingRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    vector: List[float]

    @field_validator("vector")
    @classmethod
    def validate_vector(cls, v):
        if not v:
            raise ValueError("Embedding vector is empty")
        return v
