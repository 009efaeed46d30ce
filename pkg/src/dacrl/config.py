"""Run configuration: flat ``dotted.key = value`` text with ``include`` directives.

Example::

    # desk.cfg
    include = base.cfg
    seed = 3
    synthetic.treatment_sd = 1.0
    train.lr = 0.001
    train.clip = 0.1, 10

Values are parsed as JSON scalars when possible (numbers, ``true``/``false``,
quoted strings); a comma turns a value into a tuple; anything else stays a bare string.
"""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import config_hash
from .data import ValidationError
from .synthetic import SyntheticConfig
from .trainer import PretrainConfig, TrainConfig

WORKSPACE_ENV = "DACRL_WORKSPACE"


class ConfigError(ValidationError):
    """Malformed configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class AdaptConfig:
    """Target-domain experiment: a second synthetic cohort under perturbed treatment dynamics."""

    target_treatment_scale: float = -1.0
    target_patient_seed_offset: int = 1000
    fraction: float = 0.3
    epochs: int = 300
    lr: float = 1e-2

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ConfigError("adapt.fraction: must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    command: str = ""
    seed: int = 0
    run: int = 0
    k: int = 64
    V: int = 20
    name: str = "run"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def seeded(self) -> "RunConfig":
        """Propagate the master seed into every component seed."""
        return dataclasses.replace(
            self,
            synthetic=self.synthetic.replace(seed=self.seed),
            pretrain=dataclasses.replace(self.pretrain, seed=self.seed),
            train=self.train.replace(seed=self.seed),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content(self) -> dict:
        """Everything that determines outputs; excludes the command name."""
        d = self.to_dict()
        d.pop("command")
        return d

    @property
    def config_hash(self) -> str:
        return config_hash(self.content())

    @property
    def run_id(self) -> str:
        return f"{self.name}-{self.config_hash[:12]}"

    def data_hash(self) -> str:
        """Hash of the parts that fix the data and the encoder shapes."""
        return config_hash({"synthetic": dataclasses.asdict(self.synthetic), "run": self.run, "k": self.k, "V": self.V})

    def to_text(self) -> str:
        lines = []
        for key, value in sorted(flatten(self.to_dict()).items()):
            if isinstance(value, (list, tuple)):
                lines.append(f"{key} = {', '.join(json.dumps(v) for v in value)}")
            else:
                lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_value(text: str):
    if "," in text and not text.strip().startswith('"'):
        return tuple(_parse_scalar(p) for p in text.split(","))
    return _parse_scalar(text)


def read_config_text(path: str | Path, _seen: tuple[Path, ...] = ()) -> dict[str, object]:
    """Flat key/value mapping; included files are read first and overridden by later lines."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include: cycle through {path}")
    if not path.exists():
        raise ConfigError(f"include: {path} does not exist")
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path.name}:{lineno}: empty key")
        if key == "include":
            values.update(read_config_text(path.parent / str(_parse_scalar(value)), _seen + (path,)))
        else:
            values[key] = parse_value(value)
    return values


def _coerce(path: str, tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(path, args[0], value)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, tuple) or len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} comma-separated values")
        return tuple(_coerce(path, a, v) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, values: dict[str, object], prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs, nested = {}, {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"{prefix}{key}: unknown field")
        if rest:
            if not dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"{prefix}{key}: {prefix}{head} has no sub-fields")
            nested.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"{prefix}{key}: is a section; set {prefix}{head}.<field>")
            kwargs[head] = _coerce(prefix + key, hints[head], value)
    for head, sub in nested.items():
        kwargs[head] = _build(hints[head], sub, f"{prefix}{head}.")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def build_config(values: dict[str, object]) -> RunConfig:
    return _build(RunConfig, values, "").seeded()


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    values = read_config_text(path) if path is not None else {}
    values.update(overrides or {})
    return build_config(values)


def workspace_root(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(WORKSPACE_ENV, "dacrl-workspace"))


@dataclass(frozen=True)
class RunPaths:
    """Data lives under the data hash so runs that differ only in training share it."""

    root: Path
    run_id: str
    data_id: str

    @classmethod
    def for_config(cls, cfg: RunConfig, root: str | Path | None = None) -> "RunPaths":
        return cls(workspace_root(root), cfg.run_id, f"data-{cfg.data_hash()[:12]}")

    @property
    def run_dir(self) -> Path:
        return self.root / self.run_id

    @property
    def data(self) -> Path:
        return self.root / self.data_id

    @property
    def checkpoints(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.run_dir / "reports"

    @property
    def manifest(self) -> Path:
        return self.run_dir / "manifest.json"
