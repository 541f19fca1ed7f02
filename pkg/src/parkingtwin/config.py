"""Pipeline configuration: defaults, presets, file parsing, overrides.

Config files are plain text `key = value` lines (# comments). Nested
dataclass fields use dotted paths, e.g. `tsdf.voxel_size = 0.05`. The same
syntax feeds `--set` overrides on the command line; precedence is
defaults < preset < config file < --set, applied in that order.

Presets bundle the feature toggles used for ablation:

    A  no dynamic filtering, plain RGB averaging, no gradient weight,
       no seam pass (the naive baseline)
    B  masking and occlusion filtering on, still RGB averaging
    C  the full system: masking, CIELAB fusion with luminance flattening,
       gradient weighting, seam refinement
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import pose_from_parts
from .dynamic_filter import ConstraintThresholds
from .errors import ConfigError
from .seam_refine import SeamParams
from .texture_fusion import FusionParams
from .tsdf_geometry import TsdfParams

PRESETS = ("A", "B", "C")


@dataclass
class PipelineConfig:
    dataset: str = ""
    map_path: str = ""  # defaults to <dataset>/map.osm
    out_mesh: str = "twin.ply"
    report_path: str = ""  # defaults next to out_mesh

    mode: str = "offline"  # offline | online
    preset: str = "C"
    filter_enabled: bool = True

    # geometry registration
    coordinate_mode: str = "planar"  # planar | geodetic
    origin: tuple[float, float] | None = None
    align_to_axes: bool = True
    angle_bin_deg: float = 1.0
    # camera-to-map registration, "tx ty tz qx qy qz qw"
    initial_alignment: np.ndarray = field(
        default_factory=lambda: np.eye(4))

    # online mode
    workers: int = 0  # 0 = PARKINGTWIN_THREADS or cpu count
    queue_depth: int = 8
    realtime: bool = False  # drop frames when behind instead of blocking
    snapshot_every: int = 0  # emit an intermediate mesh every N frames
    snapshot_dir: str = ""

    # evaluation and debugging
    eval_gt: str = ""  # directory of reference renders
    eval_every: int = 10
    dump_masks: str = ""
    debug_fields: bool = False

    tsdf: TsdfParams = field(default_factory=TsdfParams)
    filter: ConstraintThresholds = field(default_factory=ConstraintThresholds)
    fusion: FusionParams = field(default_factory=FusionParams)
    seam: SeamParams = field(default_factory=SeamParams)

    def validate(self) -> None:
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.coordinate_mode not in ("planar", "geodetic"):
            raise ConfigError(
                f"coordinate_mode must be planar or geodetic, got "
                f"{self.coordinate_mode!r}")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")
        self.tsdf.validate()
        self.filter.validate()
        self.fusion.validate()
        self.seam.validate()


def apply_preset(config: PipelineConfig, preset: str) -> None:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    config.preset = preset
    if preset == "A":
        config.filter_enabled = False
        config.fusion.space = "rgb"
        config.fusion.use_gradient_weight = False
        config.seam.enabled = False
    elif preset == "B":
        config.filter_enabled = True
        config.filter.occlusion_filtering = True
        config.fusion.space = "rgb"
        config.fusion.use_gradient_weight = False
        config.seam.enabled = False
    else:
        config.filter_enabled = True
        config.filter.occlusion_filtering = True
        config.fusion.space = "lab"
        config.fusion.use_gradient_weight = True
        config.seam.enabled = True


# ---------------------------------------------------------------------------
# key=value plumbing

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _coerce(name: str, text: str, current) -> object:
    text = text.strip()
    try:
        if isinstance(current, bool):
            return _parse_bool(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, str):
            return text
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    raise ConfigError(f"{name}: unsupported value type "
                      f"{type(current).__name__}")


def _known_keys(config: PipelineConfig) -> list[str]:
    keys = []
    for f in fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(f"{f.name}.{g.name}" for g in fields(value))
        else:
            keys.append(f.name)
    return keys


def set_key(config: PipelineConfig, key: str, value: str) -> None:
    """Assign one dotted key. Special cases: `preset` expands immediately,
    `origin` takes "x,y", `initial_alignment` takes 7 pose numbers."""
    key = key.strip()
    if key == "preset":
        apply_preset(config, value.strip())
        return
    if key == "origin":
        parts = value.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"origin: expected two numbers, got {value!r}")
        config.origin = (float(parts[0]), float(parts[1]))
        return
    if key == "initial_alignment":
        parts = value.replace(",", " ").split()
        if len(parts) != 7:
            raise ConfigError(
                "initial_alignment: expected 'tx ty tz qx qy qz qw'")
        nums = [float(p) for p in parts]
        config.initial_alignment = pose_from_parts(
            np.array(nums[:3]), np.array(nums[3:]))
        return

    target = config
    name = key
    if "." in key:
        group, name = key.split(".", 1)
        if not hasattr(config, group) or not dataclasses.is_dataclass(
                getattr(config, group)):
            raise ConfigError(
                f"unknown config group {group!r} in key {key!r}")
        target = getattr(config, group)
    if "." in name or not hasattr(target, name):
        raise ConfigError(
            f"unknown config key {key!r}; known keys: "
            f"{', '.join(_known_keys(config))}")
    current = getattr(target, name)
    setattr(target, name, _coerce(key, value, current))


def parse_config_text(text: str, config: PipelineConfig,
                      source: str = "<config>") -> None:
    """Apply `key = value` lines in order. The preset key is applied where
    it appears, so later explicit keys can override what it set."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            set_key(config, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None,
                base: PipelineConfig | None = None) -> PipelineConfig:
    config = base if base is not None else PipelineConfig()
    if base is None:
        apply_preset(config, config.preset)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_config_text(text, config, source=str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(config, key, value)
    config.validate()
    return config
