"""Run configuration: a versioned TOML document with one table per component.

Unknown keys and wrongly typed values are rejected with the dotted key in the
message.  ``--override section.key=value`` flags are parsed as TOML values, so
``trainer.lr=1e-3`` and ``perturbation.rotation_deg=[-10, 10]`` both work.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data_core import CLASS_SCHEMES
from .losses import LossConfig
from .nets import ARCHS, FUSIONS, ModelConfig
from .prior import PriorConfig
from .trainer import SSL_MODES, TrainConfig
from .transforms import PerturbationPolicy

SCHEMA_VERSION = 1
OUTPUT_ENV = "CAROTID_SSL_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str = ""
    class_scheme: str = "multiclass"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    k_folds: int = 0  # >= 2 runs patient-wise cross-validation in train-seg
    n_val: int = 1  # validation patients per fold
    roi_size: int = 64
    roi_max_shift: int = 0
    use_prior_filter: bool = True


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "trainer": TrainConfig,
    "loss": LossConfig,
    "prior": PriorConfig,
    "perturbation": PerturbationPolicy,
}
CHOICES = {
    "data.class_scheme": CLASS_SCHEMES,
    "model.fusion": FUSIONS,
    "model.arch": ARCHS,
    "trainer.ssl_mode": SSL_MODES,
    "trainer.task": ("localization", "segmentation"),
    "trainer.rampup_unit": ("epoch", "step"),
}
TOP_LEVEL = {"schema_version", "seed", "output_dir"}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "output_dir": self.output_dir}
        for name in SECTIONS:
            if self.sections.get(name):
                out[name] = _plain(self.sections[name])
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    # ---- typed views; task defaults first, then the file, then the seed

    def data(self) -> DataConfig:
        return _build("data", DataConfig, {}, self.section("data"))

    def model(self, task: str) -> ModelConfig:
        base = ModelConfig.coarse().to_dict() if task == "localization" else ModelConfig.fine().to_dict()
        return _build("model", ModelConfig, base, self.section("model"))

    def trainer(self, task: str) -> TrainConfig:
        base = (TrainConfig.localization() if task == "localization" else TrainConfig.segmentation()).to_dict()
        base["seed"] = self.seed
        return _build("trainer", TrainConfig, base, {**self.section("trainer"), "task": task})

    def loss(self, task: str) -> LossConfig:
        base = (LossConfig.localization() if task == "localization" else LossConfig.segmentation()).to_dict()
        return _build("loss", LossConfig, base, self.section("loss"))

    def prior(self) -> PriorConfig:
        return _build("prior", PriorConfig, {}, self.section("prior"))

    def policy(self) -> PerturbationPolicy:
        return _build("perturbation", PerturbationPolicy, {}, self.section("perturbation"))

    def effective(self, task: str) -> dict:
        """Fully resolved configuration for ``task`` (defaults + file + overrides)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": _plain(dataclasses.asdict(self.data())),
            "model": _plain(self.model(task).to_dict()),
            "trainer": _plain(self.trainer(task).to_dict()),
            "loss": _plain(self.loss(task).to_dict()),
            "prior": _plain(dataclasses.asdict(self.prior())),
            "perturbation": _plain(dataclasses.asdict(self.policy())),
        }


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items() if v is not None}


def _build(section: str, cls, base: dict, values: dict):
    kwargs = {**base, **values}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _field_types(cls) -> dict[str, Any]:
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory()) for f in dataclasses.fields(cls)}


def _check_value(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} numbers, got {value!r}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected numbers, got {value!r}")
        value = tuple(float(v) for v in value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {list(CHOICES[key])}, got {value!r}")
    return value


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})")
    cfg = RunConfig()
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            fields = _field_types(SECTIONS[key])
            sec = {}
            for k, v in value.items():
                if k not in fields:
                    raise ConfigError(f"{key}.{k}: unknown key")
                sec[k] = _check_value(f"{key}.{k}", v, fields[k])
            cfg.sections[key] = sec
        elif key == "seed":
            cfg.seed = _check_value("seed", value, 0)
        elif key == "output_dir":
            cfg.output_dir = _check_value("output_dir", value, "")
        elif key != "schema_version":
            raise ConfigError(f"{key}: unknown key")
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        # bare words are taken as strings, e.g. trainer.ssl_mode=owc
        value = raw.strip()
    return path, value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(path)}: {part!r} is not a table")
        node[path[-1]] = value
    return out


def load_config(path: Optional[str | os.PathLike], overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML ({exc})") from exc
    return config_from_dict(apply_overrides(raw, overrides))


def resolve_output(path: str | os.PathLike) -> Path:
    """Relative output paths live under ``$CAROTID_SSL_OUTPUT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def write_effective(config: RunConfig, task: str, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / "effective_config.toml"
    p.write_text(tomli_w.dumps(config.effective(task)))
    return p
