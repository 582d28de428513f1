import copy
import dataclasses
import hashlib
import json
import os
import tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import anyio

from .dataset import DEFAULT_RATIOS, ReviewFormat
from .encoder import EncoderKind, EncoderProvider
from .evaluation import EvalConfig
from .exceptions import ConfigError
from .llm import BackendKind, LlmBackendConfig
from .rpg import ProfileConfig
from .synth import SynthConfig
from .trainer import TrainConfig

CONFIG_FILE = "reform.toml"


def load_bool(name: str, default=False) -> bool:
    if not (v := os.getenv(name)):
        return default
    return v.lower() not in ("0", "false", "off", "no", "n")


@dataclass(frozen=True)
class DataConfig:
    reviews: str | None = None
    format: ReviewFormat = ReviewFormat.jsonl
    k_core: int = 5
    ratios: tuple[int, int, int] = DEFAULT_RATIOS
    factors: str | None = None
    out_dir: str = "reform_out"

    def __post_init__(self):
        if self.k_core < 1:
            raise ConfigError(f"data.k_core must be >= 1, got {self.k_core}")
        try:
            object.__setattr__(self, "format", ReviewFormat(self.format))
        except ValueError:
            raise ConfigError(f"Unknown data.format {self.format!r}") from None
        object.__setattr__(self, "ratios", tuple(self.ratios))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    llm: LlmBackendConfig = field(default_factory=LlmBackendConfig)
    encoder: EncoderProvider = field(default_factory=EncoderProvider)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.data.out_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self)


SECTIONS: dict[str, Any] = {
    f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "seed"
}
# Sections whose `seed` follows the top-level one unless set explicitly
SEEDED = ("train", "synth")
ENUMS = {("llm", "kind"): BackendKind, ("encoder", "kind"): EncoderKind}


def _section(name: str, values: Any) -> Any:
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    if unknown := sorted(set(values) - known):
        raise ConfigError(f"Unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = dict(values)
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
        if (kind := ENUMS.get((name, key))) is not None:
            try:
                values[key] = kind(value)
            except ValueError:
                raise ConfigError(f"Unknown {name}.{key}: {value!r}") from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [{name}]: {e}") from e


def build_config(raw: dict) -> RunConfig:
    if unknown := sorted(set(raw) - set(SECTIONS) - {"seed"}):
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    sections = {}
    for name in SECTIONS:
        if not isinstance(values := raw.get(name, {}), dict):
            raise ConfigError(f"[{name}] must be a table")
        values = dict(values)
        if name in SEEDED:
            values.setdefault("seed", seed)
        sections[name] = _section(name, values)
    return RunConfig(seed, **sections)


def parse_value(text: str) -> Any:
    """A TOML literal, or the raw text when it is not one.

    Example::
        >>> parse_value("0.5"), parse_value("[10, 20]"), parse_value("mock")
        (0.5, [10, 20], 'mock')
    """
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str] | tuple[str, ...]) -> dict:
    out = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like section.key=value: {item!r}")
        *parents, leaf = key.strip().split(".")
        target = out
        for p in parents:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"Cannot override inside non-table {key!r}")
        target[leaf] = parse_value(value.strip())
    return out


def read_toml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        return tomllib.loads(path.read_text("utf8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from e


class ConfigLocator:
    """Find `reform.toml` in the working directory or up to four parents"""

    @staticmethod
    async def work_dir(name: str, cwd) -> Path | None:
        parent = await cwd()
        for _ in range(5):
            if await parent.joinpath(name).exists():
                return Path(parent)
            parent = parent.parent
        return None

    @staticmethod
    def workdir(name: str, cwd: Path | None = None) -> Path | None:
        parent = cwd or Path.cwd()
        for _ in range(5):
            if parent.joinpath(name).exists():
                return parent
            parent = parent.parent
        return None

    @classmethod
    def find(cls, name: str = CONFIG_FILE, cwd: Path | None = None) -> Path | None:
        if cwd is None:
            found = anyio.run(cls.work_dir, name, anyio.Path.cwd)
        else:
            found = cls.workdir(name, cwd)
        return None if found is None else found / name


def load_config(
    path: Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    cwd: Path | None = None,
) -> tuple[RunConfig, Path | None]:
    """Resolved config and the file it came from (None for pure defaults)"""
    if path is None:
        path = ConfigLocator.find(cwd=cwd)
    raw = read_toml(path) if path is not None else {}
    return build_config(apply_overrides(raw, overrides)), path


def with_runtime(
    cfg: RunConfig,
    seed: int | None = None,
    out: Path | None = None,
    threads: int | None = None,
    deterministic: bool = False,
) -> RunConfig:
    """Apply the dedicated command-line flags on top of a resolved config"""
    if seed is not None:
        cfg = replace(
            cfg,
            seed=seed,
            train=replace(cfg.train, seed=seed),
            synth=replace(cfg.synth, seed=seed),
        )
    if out is not None:
        cfg = replace(cfg, data=replace(cfg.data, out_dir=str(out)))
    if deterministic or load_bool("REFORM_DETERMINISTIC"):
        threads = 1
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}")
        cfg = replace(
            cfg,
            eval=replace(cfg.eval, threads=threads),
            profile=replace(cfg.profile, in_flight=threads),
        )
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON of the config"""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()[:16]


def require_path(value: str | None, key: str) -> Path:
    if not value:
        raise ConfigError(f"{key} is not set")
    if not (path := Path(value)).exists():
        raise ConfigError(f"{key} points to a missing path: {path}")
    return path
