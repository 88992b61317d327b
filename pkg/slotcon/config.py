"""
Run configuration: flat YAML files of dotted `section.field` keys, layered through `include`.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union, get_args, get_origin

import ruamel.yaml
from ruamel.yaml.comments import CommentedMap
from ruamel.yaml.error import YAMLError

from slotcon.detect import DetectConfig
from slotcon.errors import ConfigError, DomainError, ParseError
from slotcon.geometry import GridSpec
from slotcon.losses import LossConfig
from slotcon.model import ModelConfig
from slotcon.synthdata import AugmentConfig, SceneConfig
from slotcon.trainer import TrainConfig

INCLUDE_KEY = "include"
# fields owned by the grid section and copied into the others
GRID_OWNED = {"scene": {"image_size"}, "model": {"image_size", "grid_size"}}


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 200
    test_scenes: int = 50

    def validate(self):
        if self.train_scenes < 0 or self.test_scenes < 0:
            raise ConfigError("data.train_scenes", "split sizes must be non-negative")


@dataclass(frozen=True)
class GridConfig:
    image_size: int = 128
    G: int = 8

    def validate(self):
        try:
            GridSpec(self.image_size, self.G)
        except DomainError as e:
            raise ConfigError("grid.G", str(e)) from None


SECTIONS = {
    "grid": GridConfig,
    "scene": SceneConfig,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "detect": DetectConfig,
    "data": DataConfig,
}


@dataclass(frozen=True)
class Settings:
    grid: GridSpec = field(default_factory=lambda: GridSpec(128, 8))
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.scene.validate()
        self.augment.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.detect.validate()
        self.data.validate()
        self.detect.params(self.grid, self.scene)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {"grid.image_size": self.grid.image_size, "grid.G": self.grid.G}
        for section in SECTIONS:
            if section == "grid":
                continue
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if f.name in GRID_OWNED.get(section, ()):
                    continue
                value = getattr(obj, f.name)
                flat[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return flat

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "Settings":
        values: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        for key, value in flat.items():
            section, _, name = str(key).partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(key, "unknown configuration key")
            fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
            if name not in fields or name in GRID_OWNED.get(section, ()):
                raise ConfigError(key, "unknown configuration key")
            values[section][name] = _coerce(key, value, fields[name].type)

        grid_cfg = GridConfig(**values.pop("grid"))
        grid_cfg.validate()
        grid = GridSpec(grid_cfg.image_size, grid_cfg.G)
        values["scene"]["image_size"] = grid.image_size
        values["model"].update(image_size=grid.image_size, grid_size=grid.G)
        sections = {name: SECTIONS[name](**kwargs) for name, kwargs in values.items()}
        settings = cls(grid=grid, **sections)
        settings.validate()
        return settings


def _describe(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(key: str, value: Any, tp) -> Any:
    origin, args = get_origin(tp), get_args(tp)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, inner[0])
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(f"{key}[{i}]", v, args[0]) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(key, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(f"{key}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return str(value)
    raise ConfigError(key, f"unsupported field type {_describe(tp)}")


class ConfigFile:
    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self._yaml = ruamel.yaml.YAML()

    def _load(self, path: Path) -> Dict[str, Any]:
        try:
            with open(path) as f:
                data = self._yaml.load(f)
        except OSError as e:
            raise ParseError(str(path), "file", e.strerror or str(e)) from None
        except YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            location = f"line {mark.line + 1} column {mark.column + 1}" if mark else "document"
            raise ParseError(str(path), location, getattr(e, "problem", None) or str(e)) from None
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ParseError(str(path), "document", "expected a mapping of `section.field: value` keys")
        return {str(k): _plain(v) for k, v in data.items()}

    def read(self, seen: Tuple[Path, ...] = ()) -> Dict[str, Any]:
        """Flat key-value pairs with includes resolved (the including file wins)."""
        path = self.path.resolve()
        if path in seen:
            chain = " -> ".join(str(p) for p in seen + (path, ))
            raise ConfigError(INCLUDE_KEY, f"include cycle: {chain}")
        data = self._load(path)
        include = data.pop(INCLUDE_KEY, None)
        if include is None:
            return data
        if not isinstance(include, str):
            raise ConfigError(INCLUDE_KEY, f"expected a relative path, got {include!r}")
        merged = ConfigFile(path.parent / include).read(seen + (path, ))
        merged.update(data)
        return merged

    def write(self, settings: "Settings", comment: Optional[str] = None):
        data = CommentedMap(settings.to_flat())
        if comment:
            data.yaml_set_start_comment(comment)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            self._yaml.dump(data, f)


def _plain(value: Any) -> Any:
    """ruamel round-trip scalars and sequences to plain Python values."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        return float(value)
    if isinstance(value, str):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """`key=value` strings with YAML-typed values, as given on the command line."""
    yaml = ruamel.yaml.YAML(typ="safe", pure=True)
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(pair, "overrides must look like section.field=value")
        try:
            out[key.strip()] = _plain(yaml.load(raw))
        except YAMLError as e:
            raise ConfigError(key.strip(), f"cannot parse value {raw!r}: {e}") from None
    return out


def load_settings(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> Settings:
    flat = Settings().to_flat()
    if path is not None:
        flat.update(ConfigFile(path).read())
    flat.update(parse_overrides(overrides))
    return Settings.from_flat(flat)
