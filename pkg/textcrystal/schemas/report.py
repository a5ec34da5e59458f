"""
Evaluation report schema
"""

from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

Percent = Optional[float]


class EvalReport(BaseModel):
    """Metric bundle written by ``evaluate``.

    ``None`` means the metric does not apply (no refs given, elemental dataset,
    no predictor); string entries in ``emd`` and ``correctness`` name the reason.
    """

    model_config = ConfigDict(extra="forbid")

    num_gens: int = Field(0, ge=0)
    num_refs: int = Field(0, ge=0)
    match_rate: Percent = None
    mean_rmse: Optional[float] = Field(None, ge=0)
    struct_validity: Percent = None
    comp_validity: Percent = None
    comp_indeterminate: int = Field(0, ge=0)
    cov_r: Percent = None
    cov_p: Percent = None
    emd: Dict[str, Union[float, str]] = Field(default_factory=dict)
    correctness: Dict[str, Union[float, str]] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    provenance: Optional[Dict[str, Any]] = None

    @field_validator("match_rate", "struct_validity", "comp_validity", "cov_r", "cov_p")
    @classmethod
    def validate_percent(cls, v):
        if v is not None and not 0.0 <= v <= 100.0:
            raise ValueError(f"Percentage out of range: {v}")
        return v

    @field_validator("correctness")
    @classmethod
    def validate_correctness(cls, v):
        for key, value in v.items():
            if isinstance(value, float) and not 0.0 <= value <= 100.0:
                raise ValueError(f"Correctness percentage for {key} out of range: {value}")
        return v
