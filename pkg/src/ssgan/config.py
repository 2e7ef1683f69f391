"""Run configuration: a flat TOML file whose keys CLI flags may override."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

import tomli_w

from .errors import ConfigError
from .training import TrainingConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REPORT_FORMATS = ("csv", "json", "table")


@dataclass
class RunConfig(TrainingConfig):
    root: str = ""
    protocol: str = "indian"
    manifest: str = ""
    out: str = "runs"
    checkpoint: str = ""
    resume: str = ""
    image_shape: tuple = (3, 64, 64)
    report_formats: tuple = REPORT_FORMATS

    def training(self):
        names = {f.name for f in dataclasses.fields(TrainingConfig)}
        return TrainingConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self):
        super().validate()
        if len(self.image_shape) != 3:
            raise ConfigError("image_shape needs three entries (C, H, W)", field="image_shape")
        bad = set(self.report_formats) - set(REPORT_FORMATS)
        if bad:
            raise ConfigError(f"unknown report formats {sorted(bad)}", field="report_formats")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("channel_widths", "image_shape", "report_formats"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}", field=unknown[0])
        d = dict(d)
        for key in ("channel_widths", "image_shape", "report_formats"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        _check_types(cfg)
        return cfg

    def replace(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        return RunConfig.from_dict({**self.to_dict(), **changes})


def _check_types(cfg):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        default = f.default if f.default is not dataclasses.MISSING else None
        if default is None or isinstance(value, type(default)):
            continue
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            setattr(cfg, f.name, float(value))
            continue
        raise ConfigError(f"{f.name} should be {type(default).__name__}, got {value!r}",
                          field=f.name)


def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config file: {exc}", field="config") from None
    return RunConfig.from_dict(raw)


def serialize_config(cfg):
    return tomli_w.dumps(cfg.to_dict())


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}", field="config") from None
