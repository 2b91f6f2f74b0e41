"""Run configuration: flat ``key = value`` files mapped onto typed sections.

Every key is unique across sections, so a config file is a flat list. Lines
starting with ``#`` and blank lines are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _opt(default, kind: str, doc: str, choices: tuple[str, ...] | None = None):
    return field(default=default, metadata={"kind": kind, "doc": doc, "choices": choices})


@dataclass
class EncodingConfig:
    encoder: str = _opt("hybrid", "choice", "feature encoders in use", ("hybrid", "hash", "triplane"))
    oneblob_bins: int = _opt(16, "pos_int", "one-blob bins per axis")
    hash_levels: int = _opt(16, "pos_int", "hash grid levels")
    hash_features: int = _opt(2, "pos_int", "features per hash level")
    hash_table_log2: int = _opt(13, "pos_int", "log2 of the hash table size per level")
    hash_base_res: int = _opt(16, "pos_int", "coarsest hash resolution along the longest axis")
    hash_finest_voxel: float = _opt(0.02, "pos_float", "max voxel edge of the finest hash level [m]")
    triplane_channels: int = _opt(32, "pos_int", "channels per tri-plane")
    geo_coarse_cell: float = _opt(0.24, "pos_float", "geometry tri-plane coarse cell [m]")
    geo_fine_cell: float = _opt(0.06, "pos_float", "geometry tri-plane fine cell [m]")
    app_coarse_cell: float = _opt(0.24, "pos_float", "appearance tri-plane coarse cell [m]")
    app_fine_cell: float = _opt(0.03, "pos_float", "appearance tri-plane fine cell [m]")
    bounds_min: tuple = _opt((-2.1, -1.6, -0.1), "vec3", "scene bounds min corner [m]")
    bounds_max: tuple = _opt((2.1, 1.6, 2.6), "vec3", "scene bounds max corner [m]")
    hidden_dim: int = _opt(32, "pos_int", "decoder hidden width")
    g_dim: int = _opt(15, "pos_int", "geometry embedding width")


@dataclass
class RenderConfig:
    n_strat: int = _opt(32, "pos_int", "stratified samples per ray")
    n_surf: int = _opt(8, "nonneg_int", "samples near the measured depth per ray")
    truncation: float = _opt(0.06, "pos_float", "SDF truncation distance T [m]")
    near: float = _opt(0.0, "nonneg_float", "near plane [m]")
    far: float = _opt(0.0, "nonneg_float", "far plane [m]; 0 means the bounds diagonal")
    max_depth: float = _opt(10.0, "pos_float", "depths above this are invalid [m]")
    beta_init: float = _opt(20.0, "pos_float", "initial density sharpness")


@dataclass
class LossConfig:
    w_color: float = _opt(5.0, "nonneg_float", "color loss weight")
    w_depth: float = _opt(0.1, "nonneg_float", "depth loss weight")
    w_patch: float = _opt(1.0, "nonneg_float", "patch SSIM loss weight")
    w_smooth: float = _opt(1e-6, "nonneg_float", "hash smoothness weight")
    w_sdfm: float = _opt(200.0, "nonneg_float", "middle truncation SDF weight")
    w_sdft: float = _opt(10.0, "nonneg_float", "tail truncation SDF weight")
    w_fs: float = _opt(5.0, "nonneg_float", "free-space weight")
    mid_fraction: float = _opt(0.5, "pos_float", "middle band half-width as a fraction of T")
    patch_loss: bool = _opt(True, "bool", "enable the patch SSIM loss")
    patch_side: int = _opt(32, "pos_int", "patch side s (s*s rays per patch)")
    patch_reps: int = _opt(10, "pos_int", "patch draws M per iteration")
    ssim_c1: float = _opt(1e-4, "pos_float", "SSIM stabilizer C1")
    ssim_c2: float = _opt(9e-4, "pos_float", "SSIM stabilizer C2")
    smooth_region: int = _opt(8, "pos_int", "vertices per side of the smoothness region")


@dataclass
class OptimConfig:
    lr_geometry: float = _opt(1e-2, "nonneg_float", "lr for hash tables, geometry planes and beta")
    lr_appearance: float = _opt(1e-2, "nonneg_float", "lr for appearance planes")
    lr_decoder: float = _opt(1e-3, "nonneg_float", "lr for both decoders")
    lr_pose_track: float = _opt(1e-3, "nonneg_float", "pose lr while tracking")
    lr_pose_ba: float = _opt(5e-4, "nonneg_float", "pose lr in mapping and global BA")
    adam_beta1: float = _opt(0.9, "pos_float", "Adam beta1")
    adam_beta2: float = _opt(0.999, "pos_float", "Adam beta2")
    adam_eps: float = _opt(1e-8, "pos_float", "Adam epsilon")


@dataclass
class PipelineConfig:
    pixels_track: int = _opt(2000, "pos_int", "rays per tracking iteration")
    pixels_map: int = _opt(4000, "pos_int", "rays per mapping / BA iteration")
    iters_track: int = _opt(10, "pos_int", "tracking iterations per frame")
    iters_map: int = _opt(20, "pos_int", "mapping iterations per window")
    iters_init: int = _opt(200, "pos_int", "mapping iterations on the first frame")
    iters_gba: int = _opt(20, "pos_int", "global BA iterations")
    map_every: int = _opt(5, "pos_int", "mapping stride [frames]")
    gba_every: int = _opt(20, "pos_int", "global BA stride [frames]")
    window_keyframes: int = _opt(4, "nonneg_int", "random keyframes per mapping window")
    t_l: float = _opt(0.09, "pos_float", "keyframe admission loss threshold")
    top_n: int = _opt(15, "pos_int", "keyframes used by global BA")
    kf_fallback_every: int = _opt(20, "pos_int", "forced keyframe admission stride [frames]")
    ray_floor: int = _opt(32, "nonneg_int", "min rays per keyframe in global BA")
    gba: bool = _opt(True, "bool", "enable active global BA")
    divergence_factor: float = _opt(10.0, "pos_float", "tracking divergence ratio to initial loss")
    seed: int = _opt(0, "nonneg_int", "random seed")
    deterministic: bool = _opt(False, "bool", "fixed reduction order")
    max_frames: int = _opt(0, "nonneg_int", "process at most this many frames; 0 means all")


@dataclass
class SynthConfig:
    n_frames: int = _opt(50, "pos_int", "synthetic frames")
    width: int = _opt(160, "pos_int", "image width [px]")
    height: int = _opt(120, "pos_int", "image height [px]")
    fx: float = _opt(120.0, "pos_float", "focal length x [px]")
    fy: float = _opt(120.0, "pos_float", "focal length y [px]")
    cx: float = _opt(79.5, "pos_float", "principal point x [px]")
    cy: float = _opt(59.5, "pos_float", "principal point y [px]")
    depth_scale: float = _opt(5000.0, "pos_float", "raw depth units per meter")
    fps: float = _opt(30.0, "pos_float", "synthetic frame rate [Hz]")


@dataclass
class EvalConfig:
    mesh_resolution: float = _opt(0.02, "pos_float", "marching cubes grid step [m]")
    mesh_samples: int = _opt(200000, "pos_int", "surface samples for mesh metrics")
    completion_threshold_cm: float = _opt(5.0, "pos_float", "completion rate threshold [cm]")
    eval_frame_stride: int = _opt(5, "pos_int", "held-out frame stride for depth L1")
    eval_frame_offset: int = _opt(2, "nonneg_int", "held-out frame offset for depth L1")
    eval_pixel_stride: int = _opt(4, "pos_int", "pixel stride for depth L1")
    cull_margin: float = _opt(0.06, "nonneg_float", "mesh culling slack behind the observed depth [m]")


@dataclass
class RunConfig:
    run_dir: str = _opt("", "str", "run directory; empty means $HYBRIDSLAM_RUN_DIR or runs/<dataset>")
    overwrite: bool = _opt(False, "bool", "allow writing into a non-empty output directory")


SECTIONS = {
    "encoding": EncodingConfig,
    "render": RenderConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "pipeline": PipelineConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "run": RunConfig,
}


@dataclass
class Config:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def set(self, key: str, raw: Any) -> None:
        section, f = _KEYS.get(key, (None, None))
        if f is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(getattr(self, section), key, _coerce(key, f, raw))

    def get(self, key: str):
        section, f = _KEYS[key]
        return getattr(getattr(self, section), key)

    def items(self):
        for key, (section, _) in _KEYS.items():
            yield key, getattr(getattr(self, section), key)

    def copy(self) -> "Config":
        return dataclasses.replace(
            self, **{name: dataclasses.replace(getattr(self, name)) for name in SECTIONS}
        )

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"# [{section}]")
            for f in fields(SECTIONS[section]):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, section), f.name))}")
        return "\n".join(lines) + "\n"


_KEYS = {f.name: (section, f) for section, cls in SECTIONS.items() for f in fields(cls)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, f: dataclasses.Field, raw: Any):
    kind = f.metadata["kind"]
    text = raw.strip() if isinstance(raw, str) else raw
    try:
        if kind in ("pos_int", "nonneg_int"):
            if isinstance(text, bool):
                raise ValueError
            value = int(text) if not isinstance(text, str) else int(text, 10)
            if kind == "pos_int" and value <= 0:
                raise ConfigError(f"{key}: positive integer required, got {value}")
            if kind == "nonneg_int" and value < 0:
                raise ConfigError(f"{key}: non-negative integer required, got {value}")
            return value
        if kind in ("pos_float", "nonneg_float", "float"):
            value = float(text)
            if kind == "pos_float" and not value > 0:
                raise ConfigError(f"{key}: positive number required, got {value}")
            if kind == "nonneg_float" and not value >= 0:
                raise ConfigError(f"{key}: non-negative number required, got {value}")
            return value
        if kind == "bool":
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if kind == "choice":
            if text not in f.metadata["choices"]:
                raise ConfigError(f"{key}: expected one of {', '.join(f.metadata['choices'])}, got {text!r}")
            return text
        if kind == "str":
            return str(text)
        if kind == "vec3":
            parts = text.split(",") if isinstance(text, str) else list(text)
            vec = tuple(float(p) for p in parts)
            if len(vec) != 3:
                raise ValueError
            return vec
    except ConfigError:
        raise
    except (TypeError, ValueError):
        pass
    expected = {
        "pos_int": "positive integer",
        "nonneg_int": "non-negative integer",
        "pos_float": "positive number",
        "nonneg_float": "non-negative number",
        "float": "number",
        "bool": "boolean (true/false)",
        "vec3": "three comma-separated numbers",
        "str": "text",
    }[kind]
    raise ConfigError(f"{key}: expected {expected}, got {raw!r}")


def parse_config_text(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    cfg = base.copy() if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def parse_config(path: str | Path | None) -> Config:
    """Read a config file; ``None`` yields all defaults."""
    if path is None:
        return Config()
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def default_table() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            rows.append(f"| `{f.name}` | `{_format(f.default)}` | {f.metadata['doc']} |")
    return "\n".join(rows)
