"""Run configuration: a TOML file with one section per pipeline stage.

Sections and keys are validated strictly (unknown ones are rejected) and the
effective configuration, defaults included, is echoed back as TOML next to
every command's outputs; parsing the echo reproduces the run exactly.

Grammar: standard TOML restricted to flat sections of ints, floats, booleans,
strings and homogeneous arrays.  Example::

    [phantom]
    shape = [32, 48, 40]
    n_cases = 10

    [phase1]
    epochs = 30
    lr = 0.05

Keys of ``0`` for ``steps_per_epoch``/``stride`` mean "derive automatically".
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import UNetConfig
from .phantom import PhantomSpec
from .pipeline import (CT_WINDOW, PET_WINDOW, FusionConfig, InferenceConfig,
                       Phase1Config, Phase2Config)
from .tensor import OptimConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config",
           "echo_config"]


class ConfigError(ValueError):
    """Unknown sections/keys or values that fail validation."""


@dataclass(frozen=True)
class MetricsConfig:
    connectivity: int = 26
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs, one attribute per TOML section."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 10
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase1_model: UNetConfig = None  # type: ignore[assignment]
    phase2: Phase2Config = field(default_factory=Phase2Config)
    phase2_model: UNetConfig = None  # type: ignore[assignment]
    fusion: FusionConfig = field(default_factory=FusionConfig)
    inference: InferenceConfig = None  # type: ignore[assignment]
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        from .model import default_2d_config, default_3d_config
        if self.phase1_model is None:
            object.__setattr__(self, "phase1_model", default_2d_config())
        if self.phase2_model is None:
            object.__setattr__(self, "phase2_model", default_3d_config())
        if self.inference is None:
            object.__setattr__(self, "inference",
                               InferenceConfig(patch=tuple(self.phase2.patch)))


_PHANTOM_KEYS = {
    "shape", "spacing", "lesion_count", "lesion_radius_mm", "decoy_count",
    "decoy_radius_mm", "lesion_uptake", "decoy_uptake", "background_uptake",
    "ct_tissue_hu", "blur_sigma_mm", "noise_sigma", "seed", "n_cases",
}
_PHASE1_KEYS = {
    "epochs", "schedule_epochs", "crop", "lesion_fraction", "flip_prob",
    "rotation_deg_max", "batch", "axis", "pet_window", "lr", "weight_decay",
    "momentum", "seed", "steps_per_epoch", "channels", "norm",
}
_PHASE2_KEYS = {
    "epochs", "schedule_epochs", "patch", "batch", "lesion_center_prob",
    "pet_window", "ct_window", "lr", "weight_decay", "momentum", "seed",
    "steps_per_epoch", "channels", "norm",
}
_FUSION_KEYS = {"gate", "low", "high"}
_INFERENCE_KEYS = {"stride", "window_batch"}
_METRICS_KEYS = {"connectivity", "folds", "seed"}
_PATHS_KEYS = {"data", "out"}
_SECTIONS = {
    "phantom": _PHANTOM_KEYS, "phase1": _PHASE1_KEYS, "phase2": _PHASE2_KEYS,
    "fusion": _FUSION_KEYS, "inference": _INFERENCE_KEYS,
    "metrics": _METRICS_KEYS, "paths": _PATHS_KEYS,
}


def _check_keys(section: str, table: dict) -> None:
    unknown = set(table) - _SECTIONS[section]
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in [{section}]; "
            f"known keys: {sorted(_SECTIONS[section])}")


def _pair(v) -> tuple:
    return tuple(v)


def _optim(table: dict, default_epochs: int) -> OptimConfig:
    return OptimConfig(
        alpha0=float(table.get("lr", 1e-3)),
        epochs=int(table.get("schedule_epochs", 0) or table.get("epochs", default_epochs)),
        weight_decay=float(table.get("weight_decay", 1e-4)),
        momentum=float(table.get("momentum", 0.0)),
    )


def parse_config(text: str) -> RunConfig:
    """Parse and validate TOML text into a :class:`RunConfig`."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown section(s) {sorted(unknown)}; known: {sorted(_SECTIONS)}")
    for section in raw:
        if not isinstance(raw[section], dict):
            raise ConfigError(f"top-level key {section!r} must be a [section]")
        _check_keys(section, raw[section])

    ph = raw.get("phantom", {})
    phantom = PhantomSpec(
        shape=_pair(ph.get("shape", (64, 96, 80))),
        spacing=_pair(ph.get("spacing", (4.0, 4.0, 4.0))),
        lesion_count=_pair(ph.get("lesion_count", (0, 3))),
        lesion_radius_mm=_pair(ph.get("lesion_radius_mm", (8.0, 16.0))),
        decoy_count=_pair(ph.get("decoy_count", (1, 3))),
        decoy_radius_mm=_pair(ph.get("decoy_radius_mm", (18.0, 28.0))),
        lesion_uptake=_pair(ph.get("lesion_uptake", (4.0, 8.0))),
        decoy_uptake=_pair(ph.get("decoy_uptake", (8.0, 14.0))),
        background_uptake=float(ph.get("background_uptake", 1.0)),
        ct_tissue_hu=_pair(ph.get("ct_tissue_hu", (120.0, 200.0))),
        blur_sigma_mm=float(ph.get("blur_sigma_mm", 2.0)),
        noise_sigma=float(ph.get("noise_sigma", 0.0)),
        seed=int(ph.get("seed", 0)),
    )
    n_cases = int(ph.get("n_cases", 10))

    p1 = raw.get("phase1", {})
    phase1 = Phase1Config(
        crop=_pair(p1.get("crop", (64, 80))),
        lesion_fraction=float(p1.get("lesion_fraction", 0.2)),
        flip_prob=float(p1.get("flip_prob", 0.5)),
        rotation_deg_max=float(p1.get("rotation_deg_max", 15.0)),
        batch=int(p1.get("batch", 8)),
        axis=int(p1.get("axis", 1)),
        pet_window=_pair(p1.get("pet_window", PET_WINDOW)),
        optimizer=_optim(p1, 200),
        seed=int(p1.get("seed", 0)),
        epochs=int(p1["epochs"]) if "epochs" in p1 else None,
        steps_per_epoch=int(p1.get("steps_per_epoch", 0)) or None,
    )
    phase1_model = UNetConfig(
        rank=2, in_channels=1,
        levels=len(p1.get("channels", (8, 16, 32))),
        channels=tuple(p1.get("channels", (8, 16, 32))),
        norm=p1.get("norm", "batch"),
    )

    p2 = raw.get("phase2", {})
    phase2 = Phase2Config(
        patch=_pair(p2.get("patch", (32, 48, 48))),
        batch=int(p2.get("batch", 2)),
        lesion_center_prob=float(p2.get("lesion_center_prob", 0.5)),
        pet_window=_pair(p2.get("pet_window", PET_WINDOW)),
        ct_window=_pair(p2.get("ct_window", CT_WINDOW)),
        optimizer=_optim(p2, 500),
        seed=int(p2.get("seed", 0)),
        epochs=int(p2["epochs"]) if "epochs" in p2 else None,
        steps_per_epoch=int(p2.get("steps_per_epoch", 0)) or None,
    )
    phase2_model = UNetConfig(
        rank=3, in_channels=2,
        levels=len(p2.get("channels", (8, 16, 32, 32))),
        channels=tuple(p2.get("channels", (8, 16, 32, 32))),
        norm=p2.get("norm", "layer"),
    )

    fu = raw.get("fusion", {})
    fusion = FusionConfig(gate=float(fu.get("gate", 0.5)),
                          low=float(fu.get("low", 0.1)),
                          high=float(fu.get("high", 0.9)))

    inf = raw.get("inference", {})
    stride = inf.get("stride", 0)
    inference = InferenceConfig(
        patch=tuple(phase2.patch),
        stride=_pair(stride) if stride else None,
        window_batch=int(inf.get("window_batch", 4)),
    )

    me = raw.get("metrics", {})
    metrics = MetricsConfig(connectivity=int(me.get("connectivity", 26)),
                            folds=int(me.get("folds", 5)),
                            seed=int(me.get("seed", 0)))

    paths = {k: str(v) for k, v in raw.get("paths", {}).items()}

    try:
        return RunConfig(phantom=phantom, n_cases=n_cases, phase1=phase1,
                         phase1_model=phase1_model, phase2=phase2,
                         phase2_model=phase2_model, fusion=fusion,
                         inference=inference, metrics=metrics, paths=paths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot format {type(value).__name__} as TOML")


def echo_config(cfg: RunConfig) -> str:
    """Serialize the effective configuration; parsing it round-trips."""
    ph, p1, p2 = cfg.phantom, cfg.phase1, cfg.phase2
    sections: list[tuple[str, list[tuple[str, object]]]] = [
        ("phantom", [
            ("shape", ph.shape), ("spacing", ph.spacing),
            ("lesion_count", ph.lesion_count),
            ("lesion_radius_mm", ph.lesion_radius_mm),
            ("decoy_count", ph.decoy_count),
            ("decoy_radius_mm", ph.decoy_radius_mm),
            ("lesion_uptake", ph.lesion_uptake),
            ("decoy_uptake", ph.decoy_uptake),
            ("background_uptake", ph.background_uptake),
            ("ct_tissue_hu", ph.ct_tissue_hu),
            ("blur_sigma_mm", ph.blur_sigma_mm),
            ("noise_sigma", ph.noise_sigma),
            ("seed", ph.seed), ("n_cases", cfg.n_cases),
        ]),
        ("phase1", [
            ("epochs", p1.run_epochs), ("schedule_epochs", p1.optimizer.epochs),
            ("crop", p1.crop), ("lesion_fraction", p1.lesion_fraction),
            ("flip_prob", p1.flip_prob),
            ("rotation_deg_max", p1.rotation_deg_max), ("batch", p1.batch),
            ("axis", p1.axis), ("pet_window", p1.pet_window),
            ("lr", p1.optimizer.alpha0),
            ("weight_decay", p1.optimizer.weight_decay),
            ("momentum", p1.optimizer.momentum), ("seed", p1.seed),
            ("steps_per_epoch", p1.steps_per_epoch or 0),
            ("channels", cfg.phase1_model.channels),
            ("norm", cfg.phase1_model.norm),
        ]),
        ("phase2", [
            ("epochs", p2.run_epochs), ("schedule_epochs", p2.optimizer.epochs),
            ("patch", p2.patch), ("batch", p2.batch),
            ("lesion_center_prob", p2.lesion_center_prob),
            ("pet_window", p2.pet_window), ("ct_window", p2.ct_window),
            ("lr", p2.optimizer.alpha0),
            ("weight_decay", p2.optimizer.weight_decay),
            ("momentum", p2.optimizer.momentum), ("seed", p2.seed),
            ("steps_per_epoch", p2.steps_per_epoch or 0),
            ("channels", cfg.phase2_model.channels),
            ("norm", cfg.phase2_model.norm),
        ]),
        ("fusion", [
            ("gate", cfg.fusion.gate), ("low", cfg.fusion.low),
            ("high", cfg.fusion.high),
        ]),
        ("inference", [
            ("stride", cfg.inference.stride or 0),
            ("window_batch", cfg.inference.window_batch),
        ]),
        ("metrics", [
            ("connectivity", cfg.metrics.connectivity),
            ("folds", cfg.metrics.folds), ("seed", cfg.metrics.seed),
        ]),
        ("paths", sorted(cfg.paths.items())),
    ]
    out = []
    for name, pairs in sections:
        if name == "paths" and not pairs:
            continue
        out.append(f"[{name}]")
        for key, value in pairs:
            out.append(f"{key} = {_fmt(value)}")
        out.append("")
    return "\n".join(out)
