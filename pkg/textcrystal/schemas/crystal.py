"""
Crystal dataset schemas
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, field_validator


class CrystalMeta(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    formula: Optional[str] = None
    spacegroup: Optional[int] = None
    crystal_system: Optional[str] = None
    formation_energy: Optional[float] = None
    band_gap: Optional[float] = None
    e_above_hull: Optional[float] = None
    # written by the sampler
    prompt_id: Optional[str] = None
    sample_index: Optional[int] = None
    flagged_invalid: Optional[bool] = None

    @field_validator("spacegroup")
    @classmethod
    def validate_spacegroup(cls, v):
        if v is not None and not 1 <= v <= 230:
            raise ValueError("Space group number must be in 1..230")
        return v

    @field_validator("crystal_system")
    @classmethod
    def normalize_crystal_system(cls, v):
        return v.strip().lower() if v else v


class CrystalRecord(BaseModel):
    """One JSON-Lines dataset row"""

    model_config = ConfigDict(extra="forbid")

    id: str
    atom_types: List[int]
    frac_coords: List[List[float]]
    lattice: List[List[float]]
    meta: Optional[CrystalMeta] = None

    @field_validator("frac_coords")
    @classmethod
    def validate_coords(cls, v):
        if any(len(row) != 3 for row in v):
            raise ValueError("Every frac_coords row needs 3 entries")
        return v

    @field_validator("lattice")
    @classmethod
    def validate_lattice(cls, v):
        if len(v) != 3 or any(len(row) != 3 for row in v):
            raise ValueError("Lattice must be 3x3")
        return v
