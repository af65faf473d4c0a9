"""Pipeline configuration: an INI file with one section per algorithm.

Example::

    [data]
    ratings = ml-1m/ratings.dat
    catalog = ml-1m/movies.dat
    format = movielens-dat

    [split]
    fraction = 0.8
    seed = 42

    [algorithms]
    names = most-popular, item-knn

    [item-knn]
    neighborhood_size = 50

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import FORMATS
from .recommenders.base import ALGORITHMS, ConfigError, ModelConfig

DEFAULT_LIST_SIZE = 10
DEFAULT_COHORTS = 10
DEFAULT_FRACTION = 0.8
DEFAULT_SEED = 42

_KNOWN = {
    "data": {"ratings", "catalog", "format", "catalog_format", "rating_min", "rating_max"},
    "split": {"fraction", "seed"},
    "evaluation": {"list_size", "cohorts", "relevance_threshold"},
    "output": {"dir"},
    "algorithms": {"names"},
}
_MODEL_KEYS = {
    "neighborhood_size": int,
    "similarity": str,
    "factors": int,
    "learning_rate": float,
    "regularization": float,
    "epochs": int,
    "seed": int,
}


@dataclass(frozen=True)
class PipelineConfig:
    ratings: Path
    catalog: Path
    format: str = "movielens-dat"
    catalog_format: str = "movielens-dat"
    rating_scale: tuple[float, float] = (1.0, 5.0)
    fraction: float = DEFAULT_FRACTION
    seed: int = DEFAULT_SEED
    list_size: int = DEFAULT_LIST_SIZE
    cohorts: int = DEFAULT_COHORTS
    relevance_threshold: float | None = None
    algorithms: dict[str, ModelConfig] = field(default_factory=dict)
    out_dir: Path = Path("out")
    source_text: str = ""

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()

    def with_overrides(self, seed=None, out=None, algos=None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            models = {
                name: replace(m, seed=seed) if m.seed == self.seed else m
                for name, m in cfg.algorithms.items()
            }
            cfg = replace(cfg, seed=seed, algorithms=models)
        if out is not None:
            cfg = replace(cfg, out_dir=Path(out))
        if algos:
            unknown = [a for a in algos if a not in cfg.algorithms]
            if unknown:
                raise ConfigError(
                    f"--algo {unknown[0]!r} is not configured; configured: {', '.join(cfg.algorithms)}"
                )
            cfg = replace(cfg, algorithms={a: cfg.algorithms[a] for a in algos})
        return cfg

    def check_inputs(self) -> None:
        for key, p in (("data.ratings", self.ratings), ("data.catalog", self.catalog)):
            if not p.exists():
                raise ConfigError(f"{key}: file not found: {p}")


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key) or not parser.get(section, key).strip():
        return default
    raw = parser.get(section, key).strip()
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, base_dir=path.parent)


def parse_config(text: str, base_dir: Path | str = ".") -> PipelineConfig:
    base_dir = Path(base_dir)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None

    for section in parser.sections():
        if section in _KNOWN:
            extra = set(parser.options(section)) - _KNOWN[section]
        elif section in ALGORITHMS:
            extra = set(parser.options(section)) - set(_MODEL_KEYS)
        else:
            raise ConfigError(
                f"unknown section [{section}]; algorithm sections must be one of: {', '.join(ALGORITHMS)}"
            )
        if extra:
            raise ConfigError(f"{section}.{sorted(extra)[0]}: unknown key")

    for key in ("ratings", "catalog"):
        if not _get(parser, "data", key, str, None):
            raise ConfigError(f"data.{key}: required key missing")

    fmt = _get(parser, "data", "format", str, "movielens-dat")
    cat_fmt = _get(parser, "data", "catalog_format", str, fmt)
    for key, value in (("format", fmt), ("catalog_format", cat_fmt)):
        if value not in FORMATS:
            raise ConfigError(f"data.{key}: {value!r} is not one of {', '.join(FORMATS)}")

    lo = _get(parser, "data", "rating_min", float, 1.0)
    hi = _get(parser, "data", "rating_max", float, 5.0)
    if lo >= hi:
        raise ConfigError("data.rating_max: must exceed data.rating_min")

    fraction = _get(parser, "split", "fraction", float, DEFAULT_FRACTION)
    if not 0 < fraction < 1:
        raise ConfigError("split.fraction: must lie strictly between 0 and 1")
    seed = _get(parser, "split", "seed", int, DEFAULT_SEED)

    list_size = _get(parser, "evaluation", "list_size", int, DEFAULT_LIST_SIZE)
    if list_size < 1:
        raise ConfigError("evaluation.list_size: must be >= 1")
    cohorts = _get(parser, "evaluation", "cohorts", int, DEFAULT_COHORTS)
    if cohorts < 2:
        raise ConfigError("evaluation.cohorts: must be >= 2")
    threshold = _get(parser, "evaluation", "relevance_threshold", float, None)

    names_raw = _get(parser, "algorithms", "names", str, ", ".join(ALGORITHMS))
    names = [n.strip() for n in names_raw.split(",") if n.strip()]
    if not names:
        raise ConfigError("algorithms.names: at least one algorithm is required")
    models = {}
    for name in names:
        if name not in ALGORITHMS:
            raise ConfigError(
                f"algorithms.names: unknown algorithm {name!r}; valid names: {', '.join(ALGORITHMS)}"
            )
        if name in models:
            raise ConfigError(f"algorithms.names: {name!r} listed twice")
        kwargs = {"seed": seed}
        for key, conv in _MODEL_KEYS.items():
            value = _get(parser, name, key, conv, None)
            if value is not None:
                kwargs[key] = value
        try:
            models[name] = ModelConfig(name, **kwargs).resolved()
        except ConfigError as e:
            raise ConfigError(f"[{name}] {e}") from None

    out_dir = _get(parser, "output", "dir", str, "out")
    return PipelineConfig(
        ratings=base_dir / _get(parser, "data", "ratings", str, None),
        catalog=base_dir / _get(parser, "data", "catalog", str, None),
        format=fmt,
        catalog_format=cat_fmt,
        rating_scale=(lo, hi),
        fraction=fraction,
        seed=seed,
        list_size=list_size,
        cohorts=cohorts,
        relevance_threshold=threshold,
        algorithms=models,
        out_dir=base_dir / out_dir,
        source_text=text,
    )
