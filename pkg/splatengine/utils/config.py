"""Run configuration: loss weights, stage budgets, ablations and presets."""

import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, Literal

from pydantic import BaseModel, Field, RootModel, field_validator

from splatengine.constants import DEFAULT_PRESET, PRESETS, THREADS_ENV_VARS
from splatengine.scene import DensifyThresholds

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """An unknown preset or an unreadable configuration file."""


class LossWeights(BaseModel):
    depth: float = Field(5.0, ge=0, description="Depth term weight.")
    color: float = Field(
        0.1, ge=0, description="Photometric weight during initialisation."
    )
    flow: float = Field(1.0, ge=0, description="Optical-flow term weight.")
    cycle: float = Field(1.0, ge=0, description="Cycle-consistency weight.")
    seg: float = Field(1.0, ge=0, description="Segmentation term weight.")
    sdf: float = Field(0.001, ge=0, description="Eikonal term weight.")
    photo: float = Field(
        1.0, ge=0, description="Photometric weight during joint refinement."
    )
    normal: float = Field(1.0, ge=0, description="Normal term weight.")


class StageBudgets(BaseModel):
    proxy: int = Field(4000, ge=0, description="SDF proxy iterations.")
    background: int = Field(
        2000, ge=0, description="Background pre-training iterations."
    )
    foreground: int = Field(
        2000,
        ge=0,
        description="Pre-training iterations per foreground object.",
    )
    joint: int = Field(6000, ge=0, description="Joint refinement iterations.")


class AblationToggles(BaseModel):
    """Switches for the reconstruction components that ablation runs remove."""

    depth_loss: bool = True
    normal_loss: bool = True
    skeleton: bool = True
    soft: bool = True
    root_init: bool = True
    """Initialise object roots from the dataset's coarse poses."""
    root: bool = True
    """Model per-frame root motion at all."""


class ModelArchitecture(BaseModel):
    pose_frequencies: int = Field(6, ge=0)
    pose_width: int = Field(256, ge=1)
    pose_depth: int = Field(5, ge=1)
    activation: Literal["relu", "silu", "softplus"] = "relu"
    bone_count: int = Field(12, ge=1)
    temperature: float = Field(
        0.05, gt=0, description="Skinning softmax temperature (units²)."
    )
    coupling_layers: int = Field(4, ge=1)
    coupling_width: int = Field(128, ge=1)
    coupling_depth: int = Field(2, ge=1)
    latent_dim: int = Field(16, ge=1)
    proxy_frequencies: int = Field(6, ge=0)
    proxy_width: int = Field(256, ge=1)
    proxy_depth: int = Field(5, ge=1)
    gaussians_per_object: int = Field(20_000, ge=0)
    background_gaussians: int = Field(20_000, ge=0)


class RunConfig(BaseModel):
    dataset: Path | None = Field(None, description="Dataset directory.")
    out: Path = Field(Path("out"), description="Output directory.")
    preset: str = Field(DEFAULT_PRESET, description="Preset name.")
    weights: LossWeights = LossWeights()
    budgets: StageBudgets = StageBudgets()
    ablation: AblationToggles = AblationToggles()
    architecture: ModelArchitecture = ModelArchitecture()
    densify: DensifyThresholds = DensifyThresholds()
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    scene_scale: float = Field(
        0.2, gt=0, description="Scale applied to depth and translations."
    )
    learning_rate: float = Field(1e-4, gt=0)
    lr_decay: float = Field(0.5, gt=0, le=1)
    lr_step: int = Field(2000, ge=1)
    rays_per_batch: int = Field(2048, ge=1)
    ray_samples: int = Field(17, ge=2)
    ray_band: float = Field(
        0.05,
        gt=0,
        description="Half-width of the proxy ray samples around the surface.",
    )
    cycle_samples: int = Field(512, ge=1)
    cycle_noise: float = Field(0.01, ge=0)
    freeze_background: bool = True
    freeze_bone_rest: bool = False
    log_every: int = Field(50, ge=1)

    @field_validator("preset")
    @classmethod
    def check_preset(cls, value: str) -> str:
        if value not in PRESETS:
            raise ValueError(
                f"Unknown preset '{value}'. Available presets: {list(PRESETS)}"
            )
        return value


class OverrideValue(RootModel):
    """A single override value: any scalar, never a container."""

    root: Any

    @field_validator("root", mode="after")
    @classmethod
    def check_type(cls, value: Any) -> Any:
        if isinstance(value, (dict, list, set, tuple)):
            raise ValueError(
                "OverrideValue must not be a container type "
                "(dict, list, set, tuple)"
            )
        return value


class ConfigOverrides(RootModel):
    """Dotted-path overrides, e.g. {"weights.depth": 1.5}."""

    root: Dict[str, OverrideValue]

    @field_validator("root", mode="after")
    @classmethod
    def validate_paths(
        cls, value: Dict[str, OverrideValue]
    ) -> Dict[str, OverrideValue]:
        for key in value:
            _check_path(key)
        return value

    def nested(self) -> dict:
        result: dict = {}
        for key, value in self.root.items():
            *parents, leaf = key.split(".")
            target = result
            for parent in parents:
                target = target.setdefault(parent, {})
            target[leaf] = value.root
        return result


def _check_path(key: str) -> None:
    model = RunConfig
    parts = key.split(".")
    for i, part in enumerate(parts):
        if part not in model.model_fields:
            raise ValueError(f"Unknown configuration key '{key}'.")
        annotation = model.model_fields[part].annotation
        is_model = isinstance(annotation, type) and issubclass(
            annotation, BaseModel
        )
        if i < len(parts) - 1:
            if not is_model:
                raise ValueError(f"Unknown configuration key '{key}'.")
            model = annotation
        elif is_model:
            raise ValueError(
                f"Configuration key '{key}' names a section, not a value."
            )


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file {path} does not exist.")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Configuration file {path} is not valid TOML: {e}")


def resolve_config(
    preset: str | None = None,
    config_file: str | Path | None = None,
    overrides: Dict[str, Any] | None = None,
) -> RunConfig:
    """Build a RunConfig with precedence flags > file > preset > defaults.

    Args:
        preset (str | None): preset name; the file's `preset` key is used
            when omitted.
        config_file (str | Path | None): TOML file with RunConfig fields.
        overrides (Dict[str, Any] | None): dotted-path flag overrides.

    Returns:
        RunConfig: the validated configuration.
    """
    file_values = read_config_file(config_file) if config_file else {}
    preset = preset or file_values.get("preset", DEFAULT_PRESET)
    if preset not in PRESETS:
        raise ConfigError(
            f"Unknown preset '{preset}'. Available presets: {list(PRESETS)}"
        )
    flag_values = ConfigOverrides(overrides or {}).nested()

    values = _merge(PRESETS[preset], file_values)
    values = _merge(values, flag_values)
    values["preset"] = preset
    if "threads" not in values:
        for name in THREADS_ENV_VARS:
            if os.environ.get(name):
                values["threads"] = int(os.environ[name])
                break
    config = RunConfig(**values)
    logger.debug(f"Resolved configuration: {config.model_dump_json()}")
    return config
