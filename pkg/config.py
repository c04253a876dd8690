"""
Run configuration: dataclass sections, TOML files and `--section.field` flags.

Precedence is defaults < TOML file < command-line flags. Each section is
owned by the module it configures; this module only gathers them.
"""
import argparse
import json
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from backbone import BackboneConfig
from errors import ConfigError
from global_branch import AttentionConfig
from local_branch import TcssConfig
from objectives import LossWeights
from pose_parts import PartsConfig
from training import ABLATIONS, TrainConfig


@dataclass
class DataConfig:
    height: int = 64
    width: int = 32
    num_joints: int = 17
    flip_probability: float = 0.5
    erase_probability: float = 0.5

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"frame size must be positive, got {self.height}x{self.width}", field="data.height")
        for name in ("flip_probability", "erase_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {p}", field=f"data.{name}")


@dataclass
class EvalConfig:
    max_rank: int = 20
    batch_size: int = 16

    def validate(self):
        if self.max_rank < 1:
            raise ConfigError(f"must be >= 1, got {self.max_rank}", field="eval.max_rank")
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", field="eval.batch_size")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    parts: PartsConfig = field(default_factory=PartsConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    tcss: TcssConfig = field(default_factory=TcssConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        config = cls()
        config.update(data)
        return config

    def update(self, data):
        """Merge a nested {section: {field: value}} mapping; unknown names are rejected."""
        sections = self.sections()
        for section_name, values in data.items():
            if section_name not in sections:
                raise ConfigError(f"unknown section (expected one of {sorted(sections)})", field=section_name)
            if not isinstance(values, dict):
                raise ConfigError("a section must be a table of fields", field=section_name)
            for name, value in values.items():
                set_field(self, f"{section_name}.{name}", value)
        return self

    def validate(self):
        for section in self.sections().values():
            if hasattr(section, "validate"):
                section.validate()
        if self.train.T != self.backbone.T:
            raise ConfigError(f"train.T={self.train.T} differs from backbone.T={self.backbone.T}",
                              field="train.T")
        return self

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def field_names(config=None):
    """Every `section.field` path of a RunConfig, in declaration order."""
    config = config or RunConfig()
    return [f"{name}.{f.name}" for name, section in config.sections().items() for f in fields(section)]


def coerce(value, current, path):
    """Convert `value` to the type of the field's current value."""
    if isinstance(value, str) and not isinstance(current, str):
        if isinstance(current, bool):
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"expected a boolean, got {value!r}", field=path)
            return lowered in ("true", "1", "yes")
        if isinstance(current, (list, dict)):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as e:
                raise ConfigError(f"expected JSON, got {value!r} ({e})", field=path) from None
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if not isinstance(value, list):
                raise TypeError
            return value
        if isinstance(current, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {type(current).__name__}, got {value!r}", field=path) from None
    return value


def set_field(config, path, value):
    section_name, _, name = path.partition(".")
    sections = config.sections()
    if section_name not in sections:
        raise ConfigError("unknown section", field=path)
    section = sections[section_name]
    if name not in {f.name for f in fields(section)}:
        raise ConfigError("unknown field", field=path)
    setattr(section, name, coerce(value, getattr(section, name), path))


def load_toml(path):
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", field="--config") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}", field="--config") from None


def add_config_arguments(parser):
    """One `--section.field` flag per config field; help shows the default."""
    defaults = RunConfig()
    group = parser.add_argument_group("configuration fields (override --config)")
    for path in field_names(defaults):
        section, name = path.split(".")
        default = getattr(getattr(defaults, section), name)
        shown = json.dumps(default) if isinstance(default, (list, bool)) else default
        group.add_argument(f"--{path}", dest=f"cfg:{path}", default=None, metavar="VALUE",
                           help=f"(default: {shown})")
    group.add_argument("--config", default=None, help="TOML file with [section] tables")
    group.add_argument("--ablate", action="append", default=[], choices=list(ABLATIONS),
                       help="switch off a component; may be repeated")
    return parser


def resolve(args, extra=None):
    """
    Build the effective RunConfig from parsed arguments.

    `extra` maps `section.field` paths to values coming from convenience
    flags (`--epochs`, `--seed`); they rank with the explicit flags.
    """
    config = RunConfig()
    if getattr(args, "config", None):
        config.update(load_toml(args.config))
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            set_field(config, key[len("cfg:"):], value)
    for path, value in (extra or {}).items():
        if value is not None:
            set_field(config, path, value)
    for flag in getattr(args, "ablate", None) or []:
        setattr(config.train, flag, True)
    return config.validate()


class UsageParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage()
        self.exit(1, f"{self.prog}: error: {message}\n")
