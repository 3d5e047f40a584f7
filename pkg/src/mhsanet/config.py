"""Run configuration: one TOML document, validated in full before any work starts."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .backbone import BackboneConfig
from .branch import BranchConfig
from .data_io import SyntheticSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import VARIANTS, ModelConfig
from .training import LrSchedule, SamplerConfig, TrainSettings

SECTIONS = ("backbone", "branch", "loss", "sampler", "schedule", "data", "eval")
# the feature-map geometry lives in [backbone]; [data] inherits it
_DATA_SHARED = ("Hf", "Wf", "C")


@dataclass(frozen=True)
class EvalSettings:
    variant: str = "full"
    fusion: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"eval.variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branch: BranchConfig = field(default_factory=BranchConfig)
    branch_enabled: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        b, d = self.backbone, self.data
        if (b.Hf, b.Wf) != (d.Hf, d.Wf):
            raise ConfigError("data and backbone disagree on the feature-map size")
        if b.provider == "synthetic" and (d.modality != "features" or d.C != b.C):
            raise ConfigError("the synthetic provider needs data.modality = 'features' with C channels")
        if b.provider == "tiny_encoder" and (d.modality != "images" or d.image_channels != b.image_channels):
            raise ConfigError("the tiny_encoder provider needs data.modality = 'images'")
        if self.sampler.P_ids > d.n_ids:
            raise ConfigError(f"sampler.P_ids={self.sampler.P_ids} exceeds data.n_ids={d.n_ids}")
        self.model_config()  # surfaces K > J and similar

    def model_config(self) -> ModelConfig:
        return ModelConfig(backbone=self.backbone, branch=self.branch, branch_enabled=self.branch_enabled,
                           n_classes=self.data.n_ids)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(sampler=self.sampler, schedule=self.schedule, loss=self.loss, seed=self.seed)

    def replace(self, **section_updates: dict[str, Any]) -> "RunConfig":
        """Copy with some keys changed, e.g. ``replace(loss={"lambda2": 0.0})``."""
        doc = to_dict(self)
        for section, updates in section_updates.items():
            if section == "seed":
                doc["seed"] = updates
            else:
                doc.setdefault(section, {}).update(updates)
        return from_dict(doc)


def _build(cls, section: str, values: dict, extra: dict | None = None):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)} - set(extra or ())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**{**values, **(extra or {})})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    backbone = _build(BackboneConfig, "backbone", doc.get("backbone", {}))
    branch_doc = dict(doc.get("branch", {}))
    enabled = branch_doc.pop("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError("branch.enabled must be a boolean")
    branch_cfg = _build(BranchConfig, "branch", branch_doc)
    loss = _build(LossWeights, "loss", doc.get("loss", {}))
    sampler = _build(SamplerConfig, "sampler", doc.get("sampler", {}))
    sched_doc = dict(doc.get("schedule", {}))
    if "decay" in sched_doc:
        try:
            sched_doc["decay"] = tuple((int(e), float(lr)) for e, lr in sched_doc["decay"])
        except (TypeError, ValueError):
            raise ConfigError("schedule.decay must be a list of [epoch, lr] pairs") from None
    schedule = _build(LrSchedule, "schedule", sched_doc)
    shared = {k: getattr(backbone, k) for k in _DATA_SHARED}
    shared["seed"] = seed
    shared["image_channels"] = backbone.image_channels
    shared["modality"] = "images" if backbone.provider == "tiny_encoder" else "features"
    data = _build(SyntheticSpec, "data", doc.get("data", {}), extra=shared)
    ev = _build(EvalSettings, "eval", doc.get("eval", {}))
    return RunConfig(seed, backbone, branch_cfg, enabled, loss, sampler, schedule, data, ev)


def to_dict(cfg: RunConfig) -> dict:
    from dataclasses import asdict

    data = asdict(cfg.data)
    for k in _DATA_SHARED + ("seed", "image_channels", "modality"):
        data.pop(k)
    data["occluder_area_frac"] = list(cfg.data.occluder_area_frac)
    branch_doc = asdict(cfg.branch)
    branch_doc["enabled"] = cfg.branch_enabled
    if branch_doc["hidden"] is None:
        del branch_doc["hidden"]
    sched = asdict(cfg.schedule)
    sched["decay"] = [list(p) for p in cfg.schedule.decay]
    ev = asdict(cfg.eval)
    if ev["fusion"] is None:
        del ev["fusion"]
    return {"seed": cfg.seed, "backbone": asdict(cfg.backbone), "branch": branch_doc, "loss": asdict(cfg.loss),
            "sampler": asdict(cfg.sampler), "schedule": sched, "data": data, "eval": ev}


def loads(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(doc)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    """TOML text for ``cfg`` (flat tables only, so a tiny writer suffices)."""
    out = [f"seed = {cfg.seed}", ""]
    for section, table in to_dict(cfg).items():
        if section == "seed":
            continue
        out.append(f"[{section}]")
        out.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
        out.append("")
    return "\n".join(out)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write {type(v).__name__} to TOML")
