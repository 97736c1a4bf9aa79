"""JSON application config.

Every section maps onto one of the package dataclasses.  Unknown keys are
errors, and only the ``paths`` section may be overridden from the
environment (``FCNCASCADE_DATA``, ``FCNCASCADE_MODEL``, ``FCNCASCADE_OUT``).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .cascade import CascadeModel, VerifyConfig
from .pipeline import PipelineConfig
from .pyramid import PyramidConfig
from .score_map import ProposalConfig
from .trainer import IoUConfig, TrainConfig

ENV_PREFIX = "FCNCASCADE_"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data: str | None = None
    model: str | None = None
    out: str | None = None


@dataclass
class AppConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    stage_thresholds: tuple[float, float] = (0.5, 0.7)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    train: PipelineConfig = field(default_factory=PipelineConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        self.stage_thresholds = tuple(float(t) for t in self.stage_thresholds)
        if len(self.stage_thresholds) != 2 or not all(0 <= t <= 1 for t in self.stage_thresholds):
            raise ConfigError(f"stage_thresholds must be two values in [0, 1], got {self.stage_thresholds}")
        if not 0 < self.train.target_recall <= 1:
            raise ConfigError(f"target_recall must lie in (0, 1], got {self.train.target_recall}")
        if not 0 < self.verify.context <= 2 or not self.verify.zooms or min(self.verify.zooms) < 1:
            raise ConfigError(f"invalid verify section {self.verify}")

    def apply_to(self, model: CascadeModel) -> CascadeModel:
        """Copy the inference settings onto ``model``."""
        return dataclasses.replace(model, pyramid_cfg=self.pyramid, proposal_cfg=self.proposal,
                                   stage_thresholds=self.stage_thresholds, verify_cfg=self.verify)

    @classmethod
    def from_model(cls, model: CascadeModel, base: AppConfig | None = None) -> AppConfig:
        base = base or cls()
        return dataclasses.replace(base, pyramid=model.pyramid_cfg, proposal=model.proposal_cfg,
                                   stage_thresholds=model.stage_thresholds, verify=model.verify_cfg)


# nested dataclass fields and the types to build them with
_NESTED = {
    (AppConfig, "pyramid"): PyramidConfig,
    (AppConfig, "proposal"): ProposalConfig,
    (AppConfig, "verify"): VerifyConfig,
    (AppConfig, "train"): PipelineConfig,
    (AppConfig, "paths"): Paths,
    (PipelineConfig, "stage1"): TrainConfig,
    (PipelineConfig, "verify_plain"): TrainConfig,
    (PipelineConfig, "verify_mined"): TrainConfig,
    (PipelineConfig, "iou"): IoUConfig,
}
_TUPLES = {(PyramidConfig, "target_long_edges"), (VerifyConfig, "zooms"), (IoUConfig, "partial"),
           (AppConfig, "stage_thresholds"), (TrainConfig, "near_band")}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}.{key}".lstrip("."))
        elif (cls, key) in _TUPLES:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def config_from_dict(doc: dict) -> AppConfig:
    return _build(AppConfig, doc, "")


def config_to_dict(cfg: AppConfig) -> dict:
    return _plain(cfg)


def with_env_paths(cfg: AppConfig, environ=None) -> AppConfig:
    environ = os.environ if environ is None else environ
    overrides = {}
    for f in dataclasses.fields(Paths):
        value = environ.get(ENV_PREFIX + f.name.upper())
        if value:
            overrides[f.name] = value
    if not overrides:
        return cfg
    return dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **overrides))


def load_config(path=None, environ=None) -> AppConfig:
    """Parse ``path`` (defaults when None) and apply environment path overrides."""
    cfg = AppConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = config_from_dict(doc)
    return with_env_paths(cfg, environ)


def save_config(cfg: AppConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    tmp.replace(path)
