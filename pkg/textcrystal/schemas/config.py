"""
Run configuration schemas

Every model forbids unknown keys.
"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from textcrystal.core.config import settings


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleConfig(_Strict):
    timesteps: int = Field(500, ge=2)
    ddpm_kind: Literal["cosine", "linear"] = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cosine_s: float = 0.008
    sigma_min: float = Field(0.005, gt=0)
    sigma_max: float = Field(0.5, gt=0)
    d3pm_kind: Literal["uniform", "cosine"] = "uniform"
    lambda_ce: float = Field(0.01, ge=0)

    @model_validator(mode="after")
    def check_sigma_range(self):
        if self.sigma_max <= self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        return self


class DenoiserConfig(_Strict):
    num_layers: int = Field(4, ge=1)
    hidden_dim: int = Field(512, ge=1)
    atom_embed_dim: Optional[int] = Field(None, ge=1)
    fourier_freqs: int = Field(10, ge=1)
    time_embed_dim: int = Field(64, ge=2)
    text_input_dim: int = Field(64, ge=1)
    text_proj_dim: int = Field(64, ge=1)
    k_classes: int = Field(100, ge=2)
    activation: Literal["silu", "relu", "gelu", "tanh"] = "silu"
    normalize_gram: bool = True
    text_dropout: float = Field(0.1, ge=0, lt=1)
    freeze_text_projection: bool = False
    seed: int = 0

    @field_validator("time_embed_dim")
    @classmethod
    def even_time_dim(cls, v):
        if v % 2:
            raise ValueError("time_embed_dim must be even")
        return v

    @property
    def embed_dim(self) -> int:
        return self.atom_embed_dim or self.hidden_dim


class TextEncoderConfig(_Strict):
    d_text: int = Field(64, ge=8)
    seed: int = 0


class TrainConfig(_Strict):
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(512, ge=1)
    lambda_lattice: float = Field(1.0, ge=0)
    lambda_type: float = Field(1.0, ge=0)
    lambda_coord: float = Field(10.0, ge=0)
    optimizer: Literal["adam", "adamw"] = "adam"
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    lr_scheduler: Literal["plateau", "none"] = "plateau"
    lr_factor: float = Field(0.6, gt=0, lt=1)
    lr_patience: int = Field(30, ge=0)
    min_lr: float = Field(1e-4, ge=0)
    grad_clip_norm: Optional[float] = Field(None, gt=0)
    coord_weighting: Literal["sigma2", "unit"] = "sigma2"
    wn_k_max: int = Field(5, ge=1)
    seed: int = 0
    deterministic: bool = True
    dtype: Literal["float32", "float64"] = "float32"


class SamplerConfig(_Strict):
    mode: Literal["gen", "csp"] = "gen"
    num_samples: int = Field(1, ge=1)
    steps: Optional[int] = Field(None, ge=1)
    strategy: Literal["d3pm_ancestral", "alg2_softmax"] = "d3pm_ancestral"
    alg2_argmax: bool = True
    step_size: float = Field(1e-5, ge=0)
    unconditional: bool = False


class MatcherConfig(_Strict):
    ltol: float = Field(0.3, gt=0)
    stol: float = Field(0.5, gt=0)
    angle_tol: float = Field(10.0, gt=0)


class CoverageConfig(_Strict):
    struct_thresh: float = Field(0.4, gt=0)
    comp_thresh: float = Field(0.25, gt=0)
    cutoff: float = Field(6.0, gt=0)
    bins: int = Field(40, ge=1)


class _RunConfig(_Strict):
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    jobs: int = Field(default_factory=lambda: settings.DEFAULT_JOBS, ge=1)
    deterministic: bool = True
    out: Optional[str] = None


class GenPromptsRunConfig(_RunConfig):
    dataset: Optional[str] = None


class TrainRunConfig(_RunConfig):
    dataset: Optional[str] = None
    prompts: Optional[str] = None
    embeddings: Optional[str] = None
    history_csv: Optional[str] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    text_encoder: TextEncoderConfig = Field(default_factory=TextEncoderConfig)

    @model_validator(mode="before")
    @classmethod
    def seed_sections(cls, data):
        """The run seed fills train.seed and denoiser.seed unless they are set"""
        if not isinstance(data, dict):
            return data
        data = dict(data)
        seed = data.get("seed", settings.DEFAULT_SEED)
        for section in ("train", "denoiser"):
            values = data.get(section)
            if values is None:
                data[section] = {"seed": seed}
            elif isinstance(values, dict) and "seed" not in values:
                data[section] = {**values, "seed": seed}
        return data


class SampleRunConfig(_RunConfig):
    checkpoint: Optional[str] = None
    prompts: Optional[str] = None
    embeddings: Optional[str] = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)


class EvaluateRunConfig(_RunConfig):
    gens: Optional[str] = None
    refs: Optional[str] = None
    prompts: Optional[str] = None
    timings: Optional[str] = None
    csv: Optional[str] = None
    metadata_properties: bool = False  # read property values from crystal metadata
    matcher: MatcherConfig = Field(default_factory=MatcherConfig)
    coverage: CoverageConfig = Field(default_factory=CoverageConfig)


class ToyRunConfig(_RunConfig):
    num_structures: int = Field(200, ge=1)
    rattle: float = Field(0.0, ge=0)
    strain: float = Field(0.0, ge=0)
    split: bool = False
