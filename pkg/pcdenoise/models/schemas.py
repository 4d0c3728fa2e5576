"""Pydantic schemas for experiment configuration, metric reports and dataset records"""

from enum import Enum
from pathlib import Path
from typing import Optional, Dict, Any, List, Tuple
import math

from pydantic import (
    BaseModel,
    Field,
    ConfigDict,
    field_validator,
    model_validator,
    computed_field,
)

from pcdenoise.core.errors import ConfigError, DatasetIOError


def _split_csv(v):
    """Accept '32,64' style strings for list fields"""
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


class NoiseKind(str, Enum):
    """Supported additive noise densities"""

    ISOTROPIC_GAUSSIAN = "isotropic_gaussian"
    LAPLACE = "laplace"
    DISCRETE = "discrete"
    ANISOTROPIC_GAUSSIAN = "anisotropic_gaussian"
    UNIDIRECTIONAL_GAUSSIAN = "unidirectional_gaussian"
    UNIFORM_BALL = "uniform_ball"


# CLI の短縮名
NOISE_KIND_ALIASES: Dict[str, str] = {
    "gaussian": NoiseKind.ISOTROPIC_GAUSSIAN.value,
    "anisotropic": NoiseKind.ANISOTROPIC_GAUSSIAN.value,
    "unidirectional": NoiseKind.UNIDIRECTIONAL_GAUSSIAN.value,
    "uniform": NoiseKind.UNIFORM_BALL.value,
}


class NoiseSpec(BaseModel):
    """Additive corruption applied to a unit-sphere-normalized cloud"""

    kind: NoiseKind = Field(
        default=NoiseKind.ISOTROPIC_GAUSSIAN,
        description="Noise density: " + ", ".join(k.value for k in NoiseKind)
    )
    scale: float = Field(
        default=0.02,
        gt=0,
        description="Scale s as a fraction of the bounding-sphere radius"
    )
    seed: int = Field(default=0, ge=0, description="RNG seed of the noise stream")

    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("kind", mode="before")
    @classmethod
    def resolve_alias(cls, v):
        if isinstance(v, str):
            return NOISE_KIND_ALIASES.get(v.strip().lower(), v.strip().lower())
        return v


class UniformityConfig(BaseModel):
    """Seed ratio and ball-area fractions of the uniformity metric"""

    seed_ratio: float = Field(default=0.05, gt=0, le=1, description="Seed count M = ceil(r N)")
    area_fractions: List[float] = Field(
        default_factory=lambda: [0.004, 0.006, 0.008, 0.010],
        min_length=1,
        description="Area fractions p; each ball radius is sqrt(p)"
    )

    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("area_fractions", mode="before")
    @classmethod
    def parse_fractions(cls, v):
        return _split_csv(v)

    @field_validator("area_fractions")
    @classmethod
    def validate_fractions(cls, v: List[float]) -> List[float]:
        for p in v:
            if not 0 < p < 1:
                raise ValueError(f"area fraction {p} must lie in (0, 1)")
        return v

    @property
    def radii(self) -> List[float]:
        return [math.sqrt(p) for p in self.area_fractions]


class MetricReport(BaseModel):
    """Evaluation result for one denoised cloud"""

    cd: float
    uniformity: float
    p2m: Optional[float] = None
    emd: Optional[float] = None

    @computed_field
    @property
    def scaled_cd(self) -> float:
        return self.cd * 1e4

    @computed_field
    @property
    def scaled_p2m(self) -> Optional[float]:
        return None if self.p2m is None else self.p2m * 1e4

    @computed_field
    @property
    def scaled_uniformity(self) -> float:
        return self.uniformity * 1e3

    def to_row(self, shape: str = "-", noise: str = "-") -> List[str]:
        """TSV row in the column order of REPORT_COLUMNS"""
        return [
            shape,
            noise,
            f"{self.scaled_cd:.6f}",
            "nan" if self.scaled_p2m is None else f"{self.scaled_p2m:.6f}",
            f"{self.scaled_uniformity:.6f}",
            "nan" if self.emd is None else f"{self.emd:.8f}",
        ]


REPORT_COLUMNS = ["shape", "noise", "cd_x1e4", "p2m_x1e4", "uni_x1e3", "emd"]


class DenoiseSchedule(BaseModel):
    """Iteration count, geometric step sizes and UniNet activation step"""

    T: int = Field(default=30, ge=1, description="Number of gradient-ascent iterations")
    s0: float = Field(default=0.2, gt=0, description="Initial step size")
    gamma: float = Field(default=0.95, gt=0, le=1, description="Step-size decay per iteration")
    t_act: int = Field(default=20, ge=0, description="Iteration from which UniNet is applied")
    scale_uninet: bool = Field(
        default=False,
        description="Scale the UniNet displacement by the step size of its iteration"
    )
    patch_size: int = Field(default=1000, ge=1, description="Inference patch size")
    coverage_factor: float = Field(default=3.0, gt=0, description="Patch seeds = ceil(f n / patch_size)")

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def validate_activation_step(self):
        if self.t_act > self.T:
            raise ValueError(f"t_act ({self.t_act}) must not exceed T ({self.T})")
        return self

    def step_size(self, t: int) -> float:
        return self.s0 * self.gamma ** t

    def step_sizes(self) -> List[float]:
        return [self.step_size(t) for t in range(self.T)]


class ModelConfig(BaseModel):
    """Architecture hyperparameters"""

    k_feat: int = Field(default=16, ge=1, description="Neighbours of the feature-extractor graph")
    feat_widths: List[int] = Field(
        default_factory=lambda: [32, 64],
        min_length=1,
        description="Width of each dense edge-conv layer of the feature extractor"
    )
    feat_blocks: int = Field(default=2, ge=1, description="Dense blocks per feature edge-conv layer")
    k_grad: int = Field(default=32, ge=1, description="Noisy-cloud neighbours of the gradient head")
    grad_widths: List[int] = Field(
        default_factory=lambda: [128, 64],
        min_length=1,
        description="Hidden widths of the per-neighbour gradient MLP"
    )
    k_uninet: int = Field(default=8, ge=1, description="UniNet neighbour count K")
    l_uninet: int = Field(default=2, ge=1, description="UniNet graph-convolution depth L")
    uninet_width: int = Field(default=32, ge=1, description="UniNet shared MLP width")
    uninet_growth: int = Field(default=16, ge=1, description="UniNet dense block width")
    init_seed: int = Field(default=0, ge=0, description="Parameter initialization seed")

    model_config = ConfigDict(extra="forbid")

    @field_validator("feat_widths", "grad_widths", mode="before")
    @classmethod
    def parse_widths(cls, v):
        return _split_csv(v)


class TrainingConfig(BaseModel):
    """Two-stage training recipe"""

    epochs: int = Field(default=100, ge=1, description="Training epochs per stage")
    lr: float = Field(default=2e-4, gt=0, description="Initial Adam learning rate")
    lr_decay: float = Field(default=0.8, gt=0, le=1, description="Multiplicative decay at milestones")
    lr_milestones: List[int] = Field(
        default_factory=lambda: [30, 60, 90],
        description="Epochs at which the learning rate decays"
    )
    batch_size: int = Field(default=4, ge=1, description="Patches per optimizer step")
    steps_per_epoch: int = Field(default=4, ge=1, description="Optimizer steps per epoch")
    patch_size: int = Field(default=1000, ge=2, description="Training patch size")
    noise_std_min: float = Field(default=0.005, ge=0, description="Lower bound of the per-patch noise std")
    noise_std_max: float = Field(default=0.02, ge=0, description="Upper bound of the per-patch noise std")
    scale_min: float = Field(default=0.8, gt=0, description="Lower bound of the augmentation scale")
    scale_max: float = Field(default=1.2, gt=0, description="Upper bound of the augmentation scale")
    rotate: bool = Field(default=True, description="Random rotation about a uniform random axis")
    k_target: int = Field(default=4, ge=1, description="Clean neighbours averaged for the score target")
    val_meshes: int = Field(default=2, ge=0, description="Manifest meshes held out for validation")
    val_patches: int = Field(default=2, ge=1, description="Validation patches per held-out cloud")
    seed: int = Field(default=0, ge=0, description="Training RNG seed")

    model_config = ConfigDict(extra="forbid")

    @field_validator("lr_milestones", mode="before")
    @classmethod
    def parse_milestones(cls, v):
        return _split_csv(v)

    @field_validator("lr_milestones")
    @classmethod
    def validate_milestones(cls, v: List[int]) -> List[int]:
        if list(v) != sorted(v):
            raise ValueError("lr_milestones must be sorted")
        return v

    @model_validator(mode="after")
    def validate_ranges(self):
        if self.noise_std_min > self.noise_std_max:
            raise ValueError("noise_std_min must not exceed noise_std_max")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        return self


class ExperimentConfig(BaseModel):
    """All keys of an experiment config file, grouped by section"""

    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    denoise: DenoiseSchedule = Field(default_factory=DenoiseSchedule)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainingConfig = Field(default_factory=TrainingConfig)
    uniformity: UniformityConfig = Field(default_factory=UniformityConfig)

    model_config = ConfigDict(extra="forbid")

    @classmethod
    def from_pairs(cls, lines: List[str]) -> "ExperimentConfig":
        """
        Build a config from flat 'section.key=value' lines

        Args:
            lines: Lines of a key=value file; blank lines and '#' comments are ignored

        Returns:
            Validated ExperimentConfig

        Raises:
            ConfigError: On malformed lines, unknown keys or invalid values
        """
        sections: Dict[str, Dict[str, Any]] = {}
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", "expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.count(".") != 1:
                raise ConfigError(key, "keys have the form section.name")
            section, name = key.split(".")
            if section not in cls.model_fields:
                raise ConfigError(key, f"unknown section '{section}'")
            section_model = cls.model_fields[section].annotation
            if name not in section_model.model_fields:
                raise ConfigError(key, f"unknown key in section '{section}'")
            sections.setdefault(section, {})[name] = value

        try:
            return cls.model_validate(sections)
        except ValueError as e:
            errors = getattr(e, "errors", lambda: [])()
            key = ".".join(str(p) for p in errors[0]["loc"]) if errors else "config"
            raise ConfigError(key, str(e)) from e

    @classmethod
    def from_file(cls, path: Optional[Path]) -> "ExperimentConfig":
        """Load a key=value config file; None yields the defaults"""
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(str(path), str(e)) from e
        return cls.from_pairs(text.splitlines())

    @classmethod
    def describe_keys(cls) -> List[Tuple[str, str, str]]:
        """(key, default, description) for every schema key"""
        rows = []
        for section, field in cls.model_fields.items():
            section_model = field.annotation
            defaults = section_model()
            for name, sub in section_model.model_fields.items():
                default = getattr(defaults, name)
                if isinstance(default, Enum):
                    default = default.value
                if isinstance(default, list):
                    default = ",".join(str(v) for v in default)
                rows.append((f"{section}.{name}", str(default), sub.description or ""))
        return rows


class ManifestEntry(BaseModel):
    """One clean cloud of a synthesized dataset"""

    mesh_id: str
    count: int = Field(..., ge=1)
    path: str
    center: Tuple[float, float, float]
    scale: float = Field(..., gt=0)

    model_config = ConfigDict(frozen=True)

    @field_validator("mesh_id", "path")
    @classmethod
    def no_tabs(cls, v: str) -> str:
        if "\t" in v or "\n" in v:
            raise ValueError("manifest fields must not contain tabs or newlines")
        return v


class TrainingLogRow(BaseModel):
    """One CSV line of the training log"""

    stage: str
    epoch: int
    lr: float
    train_loss: float
    val_cd: Optional[float] = None
    val_emd: Optional[float] = None
    val_emd_identity: Optional[float] = None
    val_disp: Optional[float] = None
