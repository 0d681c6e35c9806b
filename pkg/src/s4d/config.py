"""Run configuration: a flat ``key = value`` file merged with command-line overrides.

Keys are dotted by section (``model.dim``, ``finetune.epochs``, ``synth.noise``)
except for the handful of run-level keys (``seed``, ``out_dir`` ...). Unknown
keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    sfer_classes: int = 3
    dfer_classes: int = 6
    sfer_per_class: int = 100
    dfer_per_class: int = 60
    image_size: int = 32
    video_length: int = 12
    channels: int = 3
    noise: float = 0.05
    temporal_coding: bool = True
    test_fraction: float = 0.4

    def __post_init__(self):
        want = self.dfer_classes // 2 if self.temporal_coding else self.dfer_classes
        if self.sfer_classes != want:
            raise ConfigError(f"sfer_classes must be {want} so both tasks share class semantics")


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(lr_base=1.6e-2, batch_size=32, steps=300, epochs=1)


def _finetune_defaults() -> TrainConfig:
    return TrainConfig(lr_base=1e-3, scale_lr=False, batch_size=16, batch_size_sfer=32, epochs=8)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""
    checkpoint: str = ""
    no_pretrain: bool = False
    baseline_mtl: bool = False
    wall_clock: bool = False
    pretrain_image_prop: float = 1.0
    eval_clips: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    finetune: TrainConfig = field(default_factory=_finetune_defaults)
    synth: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "pretrain", "finetune", "synth")

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.run_dir / "data"

    def items(self):
        """``(key, value)`` pairs in a stable order, sections last."""
        for f in fields(self):
            if f.name not in self.SECTIONS:
                yield f.name, getattr(self, f.name)
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if f.name != "seed":  # the run-level seed drives every stage
                    yield f"{sec}.{f.name}", getattr(obj, f.name)

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def write(self, path) -> None:
        Path(path).write_text(self.dump())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(_parse(x, like[0], key) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(overrides: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string overrides to ``base`` (defaults if None); rejects unknown keys."""
    cfg = base or RunConfig()
    top: dict = {}
    sec: dict[str, dict] = {s: {} for s in RunConfig.SECTIONS}
    current = dict(cfg.items())
    for key, raw in overrides.items():
        if key not in current:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse(raw, current[key], key)
        if "." in key:
            s, name = key.split(".", 1)
            sec[s][name] = value
        else:
            top[key] = value
    try:
        new_secs = {s: dataclasses.replace(getattr(cfg, s), **sec[s]) for s in RunConfig.SECTIONS}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = dataclasses.replace(cfg, **top, **new_secs)
    for s in ("pretrain", "finetune"):
        setattr(out, s, dataclasses.replace(getattr(out, s), seed=out.seed))
    return out


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    merged = parse_lines(Path(path).read_text(), str(path)) if path else {}
    merged.update(overrides or {})
    return resolve(merged)
