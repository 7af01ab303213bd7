"""Run configuration from ``key = value`` text files with command-line overrides.

Sampler settings use the prefix ``sampler.`` and scene settings the prefix
``scene.``; run-level keys (input paths, photon budget, hyperparameters)
have no prefix. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .chain import SamplerConfig
from .core import ValidationError
from .estimators import DEPTH_ESTIMATORS
from .scene import SceneSpec


@dataclass
class RunSettings:
    cube: Optional[str] = None
    endmembers: Optional[str] = None
    irf: Optional[str] = None
    output_dir: str = "out"
    budget: float = 1.0
    alpha: float = 1.0
    nu: float = 0.05
    epsilon: float = 0.2
    beta_n: float = 0.1
    beta_l: float = 0.1
    beta_0: float = 0.9
    c: float = 2.0
    t_min: Optional[int] = None
    t_max: Optional[int] = None
    ref_bin: Optional[int] = None  # depth reference bin for reported ranges; default t_min
    depth_estimator: str = "histogram"


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def set(self, key: str, text: str) -> None:
        target, name = self._resolve(key)
        hints = typing.get_type_hints(type(target))
        try:
            value = _coerce(text, hints[name])
        except ValueError as exc:
            raise ValidationError([f"{key}: {exc}"]) from None
        setattr(target, name, value)

    def _resolve(self, key: str):
        section, _, name = key.rpartition(".")
        target = {"": self.run, "sampler": self.sampler, "scene": self.scene}.get(section)
        if target is None or name not in {f.name for f in dataclasses.fields(target)}:
            raise ValidationError([f"unknown configuration key '{key}'"])
        return target, name

    def validate(self) -> None:
        try:
            self.sampler.__post_init__()
        except ValueError as exc:
            raise ValidationError([str(exc)]) from None
        if self.run.depth_estimator not in DEPTH_ESTIMATORS:
            raise ValidationError([f"depth_estimator must be one of {', '.join(DEPTH_ESTIMATORS)}"])

    @classmethod
    def load(cls, path=None, overrides: Optional[dict] = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError([f"{path}:{lineno}: expected 'key = value'"])
                key, value = (s.strip() for s in line.split("=", 1))
                try:
                    cfg.set(key, value)
                except ValidationError as exc:
                    raise ValidationError([f"{path}:{lineno}: {p}" for p in exc.problems]) from None
        for key, value in (overrides or {}).items():
            target, name = cfg._resolve(key)
            setattr(target, name, value)
        cfg.validate()
        return cfg

    def dump(self) -> str:
        lines = []
        for prefix, obj in (("", self.run), ("sampler.", self.sampler), ("scene.", self.scene)):
            for f in dataclasses.fields(obj):
                lines.append(f"{prefix}{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(text: str, tp) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "auto", ""):
            return None
        return _coerce(text, inner[0])
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if tp is tuple or origin is tuple:
        return tuple(_number(v.strip()) for v in text.split(",") if v.strip())
    raise ValueError(f"unsupported type {tp}")


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)
